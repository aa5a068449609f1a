// SPDX-License-Identifier: Apache-2.0
//
// Test-only oracles, deliberately written against the most literal
// definitions and kept independent of the library implementations they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "magent/rng.hpp"
#include "magent/tensor.hpp"

namespace oracles {

// ---- central finite differences ----

struct FdReport {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

// f evaluates a scalar from the current contents of the given tensors.
// For each element of each tensor, compares the analytic gradient stored in
// tensor.grad against (f(x+h) - f(x-h)) / 2h.
inline FdReport finite_difference(std::vector<magent::Tensor*> inputs,
                                  const std::function<double()>& f, double step = 1e-6) {
    FdReport report;
    for (magent::Tensor* t : inputs) {
        for (int64_t i = 0; i < t->numel(); ++i) {
            const double saved = t->data[static_cast<size_t>(i)];
            t->data[static_cast<size_t>(i)] = saved + step;
            const double up = f();
            t->data[static_cast<size_t>(i)] = saved - step;
            const double down = f();
            t->data[static_cast<size_t>(i)] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double ad = t->grad.empty() ? 0.0 : t->grad[static_cast<size_t>(i)];
            const double denom = std::max({1.0, std::abs(fd), std::abs(ad)});
            report.max_rel_err = std::max(report.max_rel_err, std::abs(fd - ad) / denom);
            ++report.checked;
        }
    }
    return report;
}

inline magent::Tensor random_tensor(std::vector<int> shape, uint64_t key, double lo = -1.0,
                                    double hi = 1.0) {
    magent::Tensor t(std::move(shape));
    magent::rng::Stream s(key);
    for (int64_t i = 0; i < t.numel(); ++i)
        t.data[static_cast<size_t>(i)] = s.uniform(static_cast<uint64_t>(i), lo, hi);
    return t;
}

// ---- brute-force BLEU ----
// Literal n-gram counting with std::map, add-one smoothing for n >= 2,
// matching the contract of the library implementation but sharing no code.

inline std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& seq, int n) {
    std::map<std::vector<int>, int> counts;
    for (int i = 0; i + n <= static_cast<int>(seq.size()); ++i)
        counts[std::vector<int>(seq.begin() + i, seq.begin() + i + n)] += 1;
    return counts;
}

inline double bleu_sentence(const std::vector<int>& hyp, const std::vector<int>& ref) {
    if (hyp.empty()) return 0.0;
    double log_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        const auto hc = ngram_counts(hyp, n);
        const auto rc = ngram_counts(ref, n);
        long long matches = 0, total = 0;
        for (const auto& [gram, count] : hc) {
            total += count;
            auto it = rc.find(gram);
            if (it != rc.end()) matches += std::min(count, it->second);
        }
        double p;
        if (n == 1)
            p = total > 0 ? static_cast<double>(matches) / static_cast<double>(total) : 0.0;
        else
            p = static_cast<double>(matches + 1) / static_cast<double>(total + 1);
        if (p <= 0.0) return 0.0;
        log_sum += std::log(p);
    }
    double bp = 1.0;
    if (hyp.size() < ref.size())
        bp = std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(hyp.size()));
    return 100.0 * bp * std::exp(log_sum / 4.0);
}

inline double bleu_corpus(const std::vector<std::vector<int>>& hyps,
                          const std::vector<std::vector<int>>& refs) {
    long long hyp_len = 0, ref_len = 0;
    double log_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        long long matches = 0, total = 0;
        for (size_t i = 0; i < hyps.size(); ++i) {
            const auto hc = ngram_counts(hyps[i], n);
            const auto rc = ngram_counts(refs[i], n);
            for (const auto& [gram, count] : hc) {
                total += count;
                auto it = rc.find(gram);
                if (it != rc.end()) matches += std::min(count, it->second);
            }
        }
        if (matches == 0) return 0.0;
        log_sum += std::log(static_cast<double>(matches) / static_cast<double>(total));
    }
    for (size_t i = 0; i < hyps.size(); ++i) {
        hyp_len += static_cast<long long>(hyps[i].size());
        ref_len += static_cast<long long>(refs[i].size());
    }
    double bp = 1.0;
    if (hyp_len < ref_len)
        bp = std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return 100.0 * bp * std::exp(log_sum / 4.0);
}

}  // namespace oracles
