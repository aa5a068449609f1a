// SPDX-License-Identifier: Apache-2.0
//
// Times the serial reference kernels against the OpenMP versions and checks
// they agree bitwise. Run manually: build/tools/bench_kernels [reps]

#include <omp.h>

#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "magent/kernels.hpp"
#include "magent/rng.hpp"

using namespace magent;

namespace {

std::vector<double> random_vec(size_t n, uint64_t key) {
    std::vector<double> v(n);
    rng::Stream s(key);
    for (size_t i = 0; i < n; ++i) v[i] = s.uniform(i, -1.0, 1.0);
    return v;
}

struct Case {
    std::string name;
    double flops;
    std::vector<double> out_serial, out_parallel;
    double t_serial = 0.0, t_parallel = 0.0;
};

template <typename F>
void run_case(Case& c, int reps, F&& f) {
    for (int pass = 0; pass < 2; ++pass) {
        kernels::set_backend(pass == 0 ? kernels::Backend::Serial : kernels::Backend::Parallel);
        auto& out = pass == 0 ? c.out_serial : c.out_parallel;
        f(out);  // warmup + result capture
        const double t0 = omp_get_wtime();
        for (int r = 0; r < reps; ++r) f(out);
        const double dt = (omp_get_wtime() - t0) / reps;
        (pass == 0 ? c.t_serial : c.t_parallel) = dt;
    }
    kernels::set_backend(kernels::Backend::Parallel);
}

void report(const Case& c) {
    const bool exact = c.out_serial.size() == c.out_parallel.size() &&
                       std::memcmp(c.out_serial.data(), c.out_parallel.data(),
                                   c.out_serial.size() * sizeof(double)) == 0;
    std::printf("%-22s serial %8.3f ms (%6.2f GF/s)   omp %8.3f ms (%6.2f GF/s)   speedup %5.2fx   bitwise %s\n",
                c.name.c_str(), c.t_serial * 1e3, c.flops / c.t_serial * 1e-9, c.t_parallel * 1e3,
                c.flops / c.t_parallel * 1e-9, c.t_serial / c.t_parallel, exact ? "yes" : "NO");
}

}  // namespace

int main(int argc, char** argv) {
    const int reps = argc > 1 ? std::atoi(argv[1]) : 5;
    std::printf("threads available: %d\n", omp_get_max_threads());

    {
        const int m = 256, k = 256, n = 256;
        auto a = random_vec(static_cast<size_t>(m) * k, 1);
        auto b = random_vec(static_cast<size_t>(k) * n, 2);
        Case c{"gemm_nn 256^3", 2.0 * m * k * n, {}, {}};
        run_case(c, reps, [&](std::vector<double>& out) {
            out.resize(static_cast<size_t>(m) * n);
            kernels::gemm_nn(out.data(), a.data(), b.data(), m, k, n, false);
        });
        report(c);

        Case c2{"gemm_nt 256^3", 2.0 * m * k * n, {}, {}};
        run_case(c2, reps, [&](std::vector<double>& out) {
            out.resize(static_cast<size_t>(m) * n);
            kernels::gemm_nt(out.data(), a.data(), b.data(), m, k, n, false);
        });
        report(c2);

        Case c3{"gemm_tn 256^3", 2.0 * m * k * n, {}, {}};
        run_case(c3, reps, [&](std::vector<double>& out) {
            out.resize(static_cast<size_t>(m) * n);
            kernels::gemm_tn(out.data(), a.data(), b.data(), m, k, n, false);
        });
        report(c3);
    }
    {
        const int rows = 8192, cols = 64;
        auto x = random_vec(static_cast<size_t>(rows) * cols, 3);
        Case c{"softmax 8192x64", 5.0 * rows * cols, {}, {}};
        run_case(c, reps, [&](std::vector<double>& out) {
            out.resize(x.size());
            kernels::softmax_rows(x.data(), out.data(), rows, cols);
        });
        report(c);
    }
    {
        const int rows = 8192, cols = 64;
        auto x = random_vec(static_cast<size_t>(rows) * cols, 4);
        auto gain = random_vec(cols, 5);
        auto bias = random_vec(cols, 6);
        std::vector<double> xhat(x.size()), istd(rows);
        Case c{"layer_norm 8192x64", 8.0 * rows * cols, {}, {}};
        run_case(c, reps, [&](std::vector<double>& out) {
            out.resize(x.size());
            kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), out.data(), xhat.data(),
                                     istd.data(), rows, cols, 1e-5);
        });
        report(c);
    }
    {
        const int64_t n = 1 << 21;
        auto g = random_vec(static_cast<size_t>(n), 7);
        auto p0 = random_vec(static_cast<size_t>(n), 8);
        std::vector<double> m(static_cast<size_t>(n), 0.0), v(static_cast<size_t>(n), 0.0);
        Case c{"adam_step 2M", 10.0 * static_cast<double>(n), {}, {}};
        run_case(c, reps, [&](std::vector<double>& out) {
            out = p0;
            std::fill(m.begin(), m.end(), 0.0);
            std::fill(v.begin(), v.end(), 0.0);
            kernels::adam_step(out.data(), g.data(), m.data(), v.data(), n, 1, 1e-3, 0.9, 0.98, 1e-9, 0.0);
        });
        report(c);
    }
    return 0;
}
