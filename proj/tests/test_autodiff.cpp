// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "magent/autodiff.hpp"
#include "magent/model.hpp"
#include "support/oracles.hpp"

using namespace magent;
using oracles::random_tensor;

namespace {

using Build = std::function<Var(Graph&)>;

double backward_into(std::vector<Tensor*> params, const Build& build) {
    for (Tensor* p : params) {
        p->requires_grad = true;
        p->grad.clear();
    }
    Graph g;
    Var loss = build(g);
    g.backward(loss);
    return g.value(loss).data[0];
}

void check_fd(std::vector<Tensor*> params, const Build& build, double tol = 1e-4) {
    backward_into(params, build);
    const auto report = oracles::finite_difference(params, [&] {
        Graph g;
        return g.value(build(g)).data[0];
    });
    CHECK(report.checked > 0);
    CHECK(report.max_rel_err < tol);
}

Tensor weights(const std::vector<int>& shape, uint64_t key) { return random_tensor(shape, key); }

}  // namespace

TEST_CASE("backward of sum(x) is all ones; sum(x*x) is 2x") {
    Tensor x = random_tensor({3, 4}, 1);
    x.requires_grad = true;
    {
        Graph g;
        Var vx = g.param(x);
        g.backward(g.sum(vx));
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad[static_cast<size_t>(i)] == 1.0);
    }
    x.grad.clear();
    {
        Graph g;
        Var vx = g.param(x);
        g.backward(g.sum(g.mul(vx, vx)));
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(x.grad[static_cast<size_t>(i)] == doctest::Approx(2.0 * x.data[static_cast<size_t>(i)]));
    }
}

TEST_CASE("repeated backward without zeroing accumulates") {
    Tensor x = random_tensor({5}, 2);
    x.requires_grad = true;
    Graph g;
    Var loss = g.sum(g.param(x));
    g.backward(loss);
    g.backward(loss);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad[static_cast<size_t>(i)] == 2.0);
}

TEST_CASE("backward requires a scalar loss") {
    Tensor x = random_tensor({2, 2}, 3);
    x.requires_grad = true;
    Graph g;
    Var vx = g.param(x);
    CHECK_THROWS_AS(g.backward(vx), std::invalid_argument);
}

TEST_CASE("matmul rejects mismatched shapes") {
    Tensor a = random_tensor({2, 3}, 4);
    Tensor b = random_tensor({4, 2}, 5);
    Graph g;
    CHECK_THROWS_AS(g.matmul(g.input(a), g.input(b)), std::invalid_argument);
}

TEST_CASE("matmul gradients match finite differences") {
    Tensor a = random_tensor({3, 4}, 6);
    Tensor b = random_tensor({4, 2}, 7);
    Tensor w = weights({3, 2}, 8);
    check_fd({&a, &b}, [&](Graph& g) {
        return g.sum(g.mul(g.matmul(g.param(a), g.param(b)), g.input(w)));
    }, 1e-5);
}

TEST_CASE("bmm gradients match finite differences") {
    Tensor a = random_tensor({2, 3, 4}, 9);
    Tensor b = random_tensor({2, 4, 5}, 10);
    Tensor w = weights({2, 3, 5}, 11);
    check_fd({&a, &b}, [&](Graph& g) {
        return g.sum(g.mul(g.bmm(g.param(a), g.param(b)), g.input(w)));
    });
}

TEST_CASE("bmm_nt equals bmm against the transposed operand") {
    Tensor a = random_tensor({3, 4, 6}, 50);
    Tensor b = random_tensor({3, 5, 6}, 51);
    Graph g;
    Var direct = g.bmm_nt(g.input(a), g.input(b));
    Var via_permute = g.bmm(g.input(a), g.permute(g.input(b), {0, 2, 1}));
    // two kernels, same contraction order; only FMA rounding may differ
    for (int64_t i = 0; i < g.value(direct).numel(); ++i)
        CHECK(g.value(direct).data[static_cast<size_t>(i)] ==
              doctest::Approx(g.value(via_permute).data[static_cast<size_t>(i)]).epsilon(1e-13));

    Tensor w = weights({3, 4, 5}, 52);
    check_fd({&a, &b}, [&](Graph& gg) {
        return gg.sum(gg.mul(gg.bmm_nt(gg.param(a), gg.param(b)), gg.input(w)));
    });
}

TEST_CASE("linear equals matmul plus bias row and differentiates cleanly") {
    Tensor x = random_tensor({5, 4}, 53);
    Tensor wt = random_tensor({4, 7}, 54);
    Tensor b = random_tensor({7}, 55);
    Graph g;
    Var fused = g.linear(g.input(x), g.input(wt), g.input(b));
    Var split = g.add_rowvec(g.matmul(g.input(x), g.input(wt)), g.input(b));
    CHECK(g.value(fused).data == g.value(split).data);

    Tensor w = weights({5, 7}, 56);
    check_fd({&x, &wt, &b}, [&](Graph& gg) {
        return gg.sum(gg.mul(gg.linear(gg.param(x), gg.param(wt), gg.param(b)), gg.input(w)));
    }, 1e-5);
}

TEST_CASE("split_heads and merge_heads invert each other and differentiate") {
    Tensor x = random_tensor({5, 6}, 57);
    Graph g;
    Var heads = g.split_heads(g.input(x), 3);
    CHECK(g.value(heads).shape == std::vector<int>{3, 5, 2});
    Var back = g.merge_heads(heads);
    CHECK(g.value(back).data == x.data);

    Tensor w = weights({3, 5, 2}, 58);
    check_fd({&x}, [&](Graph& gg) {
        return gg.sum(gg.mul(gg.split_heads(gg.param(x), 3), gg.input(w)));
    });
    Tensor h3 = random_tensor({3, 5, 2}, 59);
    Tensor w2 = weights({5, 6}, 60);
    check_fd({&h3}, [&](Graph& gg) {
        return gg.sum(gg.mul(gg.merge_heads(gg.param(h3)), gg.input(w2)));
    });
}

TEST_CASE("elementwise and structural ops match finite differences") {
    Tensor a = random_tensor({4, 6}, 12);
    Tensor b = random_tensor({4, 6}, 13);
    Tensor row = random_tensor({6}, 14);
    Tensor w = weights({4, 6}, 15);
    check_fd({&a, &b}, [&](Graph& g) {
        return g.sum(g.mul(g.add(g.param(a), g.param(b)), g.input(w)));
    });
    check_fd({&a, &b}, [&](Graph& g) {
        return g.sum(g.mul(g.mul(g.param(a), g.param(b)), g.input(w)));
    });
    check_fd({&a, &row}, [&](Graph& g) {
        return g.sum(g.mul(g.add_rowvec(g.param(a), g.param(row)), g.input(w)));
    });
    check_fd({&a}, [&](Graph& g) { return g.sum(g.mul(g.scale(g.param(a), -2.5), g.input(w))); });
    Tensor w3 = weights({6, 4}, 16);
    check_fd({&a}, [&](Graph& g) {
        return g.sum(g.mul(g.permute(g.param(a), {1, 0}), g.input(w3)));
    });
    Tensor wr = weights({24}, 17);
    check_fd({&a}, [&](Graph& g) { return g.sum(g.mul(g.reshape(g.param(a), {24}), g.input(wr))); });
    Tensor c = random_tensor({2, 3, 4}, 18);
    Tensor wp = weights({4, 2, 3}, 19);
    check_fd({&c}, [&](Graph& g) {
        return g.sum(g.mul(g.permute(g.param(c), {2, 0, 1}), g.input(wp)));
    });
}

TEST_CASE("log, relu, softmax, log_softmax, layer_norm match finite differences") {
    Tensor pos = random_tensor({3, 5}, 20, 0.5, 2.0);
    Tensor w = weights({3, 5}, 21);
    check_fd({&pos}, [&](Graph& g) { return g.sum(g.mul(g.log(g.param(pos)), g.input(w))); });

    Tensor x = random_tensor({3, 5}, 22);
    // keep activations away from the relu kink so central differences are clean
    for (auto& v : x.data)
        if (std::abs(v) < 0.05) v += 0.1;
    check_fd({&x}, [&](Graph& g) { return g.sum(g.mul(g.relu(g.param(x)), g.input(w))); });

    Tensor logits = random_tensor({4, 7}, 23, -2.0, 2.0);
    Tensor ws = weights({4, 7}, 24);
    check_fd({&logits}, [&](Graph& g) {
        return g.sum(g.mul(g.softmax_rows(g.param(logits)), g.input(ws)));
    });
    check_fd({&logits}, [&](Graph& g) {
        return g.sum(g.mul(g.log_softmax_rows(g.param(logits)), g.input(ws)));
    });

    Tensor gain = random_tensor({7}, 25, 0.5, 1.5);
    Tensor bias = random_tensor({7}, 26);
    check_fd({&logits, &gain, &bias}, [&](Graph& g) {
        return g.sum(g.mul(g.layer_norm(g.param(logits), g.param(gain), g.param(bias)), g.input(ws)));
    });
}

TEST_CASE("embedding lookup gradients match finite differences") {
    Tensor table = random_tensor({9, 4}, 27);
    Tensor w = weights({5, 4}, 28);
    const std::vector<int> ids{0, 3, 3, 8, 1};
    check_fd({&table}, [&](Graph& g) {
        return g.sum(g.mul(g.embedding_lookup(g.param(table), ids), g.input(w)));
    });
}

TEST_CASE("dropout: eval identity, train mask fixed by key, gradients correct") {
    Tensor x = random_tensor({6, 6}, 29);
    {
        Graph g;
        Var vx = g.input(x);
        Var out = g.dropout(vx, 0.4, 123, false);
        CHECK(out.id == vx.id);  // eval mode is a no-op
    }
    Graph g1, g2;
    Var o1 = g1.dropout(g1.input(x), 0.4, 777, true);
    Var o2 = g2.dropout(g2.input(x), 0.4, 777, true);
    CHECK(g1.value(o1).data == g2.value(o2).data);
    int zeros = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double v = g1.value(o1).data[static_cast<size_t>(i)];
        if (v == 0.0)
            ++zeros;
        else
            CHECK(v == doctest::Approx(x.data[static_cast<size_t>(i)] / 0.6));
    }
    CHECK(zeros > 0);
    CHECK(zeros < x.numel());

    Tensor w = weights({6, 6}, 30);
    check_fd({&x}, [&](Graph& g) {
        return g.sum(g.mul(g.dropout(g.param(x), 0.4, 777, true), g.input(w)));
    });
}

TEST_CASE("cross entropy: one-hot targets reduce to NLL, uniform case, gradient check") {
    const int T = 5, V = 4;
    Tensor logits = random_tensor({T, V}, 31);
    const std::vector<int> ids{1, 3, 0, 2, 2};
    Tensor onehot({T, V});
    for (int t = 0; t < T; ++t) onehot.at(t, ids[static_cast<size_t>(t)]) = 1.0;
    Tensor mask({T}, std::vector<double>(T, 1.0));

    Graph g;
    Var lp = g.log_softmax_rows(g.input(logits));
    Var ce = g.cross_entropy(lp, g.input(onehot), g.input(mask));
    Var nll = g.nll(lp, ids, std::vector<double>(T, 1.0));
    CHECK(g.value(ce).data[0] == doctest::Approx(g.value(nll).data[0]).epsilon(1e-15));

    // uniform target, uniform prediction -> T * log V
    Tensor zero({T, V});
    Tensor uniform({T, V}, std::vector<double>(static_cast<size_t>(T) * V, 1.0 / V));
    Graph g2;
    Var lp2 = g2.log_softmax_rows(g2.input(zero));
    Var ce2 = g2.cross_entropy(lp2, g2.input(uniform), g2.input(mask));
    CHECK(g2.value(ce2).data[0] == doctest::Approx(T * std::log(static_cast<double>(V))).epsilon(1e-12));

    // masked rows contribute nothing
    Tensor mask2({T}, {1, 0, 1, 0, 1});
    Graph g3;
    Var ce3 = g3.cross_entropy(g3.log_softmax_rows(g3.input(logits)), g3.input(onehot), g3.input(mask2));
    double manual = 0.0;
    {
        Graph gm;
        const Tensor& l = gm.value(gm.log_softmax_rows(gm.input(logits)));
        for (int t = 0; t < T; t += 2) manual -= l.at(t, ids[static_cast<size_t>(t)]);
    }
    CHECK(g3.value(ce3).data[0] == doctest::Approx(manual).epsilon(1e-12));

    Tensor soft({T, V});
    for (int t = 0; t < T; ++t) {
        double sum = 0.0;
        for (int k = 0; k < V; ++k) {
            soft.at(t, k) = std::abs(std::sin(t * 7.0 + k * 3.0)) + 0.1;
            sum += soft.at(t, k);
        }
        for (int k = 0; k < V; ++k) soft.at(t, k) /= sum;
    }
    check_fd({&logits}, [&](Graph& gg) {
        return gg.cross_entropy(gg.log_softmax_rows(gg.param(logits)), gg.input(soft), gg.input(mask));
    }, 1e-5);
    check_fd({&logits}, [&](Graph& gg) {
        return gg.nll(gg.log_softmax_rows(gg.param(logits)), ids, std::vector<double>(T, 1.0));
    }, 1e-5);
}

TEST_CASE("relative attention logits: zero table equals absolute attention") {
    const int H = 2, T = 6, dh = 4, clip = 2;
    Tensor q = random_tensor({H, T, dh}, 32);
    Tensor k = random_tensor({H, T, dh}, 33);
    Tensor rel({2 * clip + 1, dh});
    Graph g;
    Var vrel = g.rel_attention_logits(g.input(q), g.input(k), g.input(rel), clip);
    Var vabs = g.scale(g.bmm(g.input(q), g.permute(g.input(k), {0, 2, 1})), 1.0 / std::sqrt(4.0));
    const Tensor& r = g.value(vrel);
    const Tensor& a = g.value(vabs);
    for (int64_t i = 0; i < r.numel(); ++i)
        CHECK(r.data[static_cast<size_t>(i)] ==
              doctest::Approx(a.data[static_cast<size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("relative attention logits: distances beyond the clip share one embedding") {
    const int H = 1, T = 7, dh = 3, clip = 2;
    Tensor q = random_tensor({H, T, dh}, 34);
    Tensor k = random_tensor({H, T, dh}, 35);
    Tensor rel = random_tensor({2 * clip + 1, dh}, 36);
    Graph g;
    const Tensor& out = g.value(g.rel_attention_logits(g.input(q), g.input(k), g.input(rel), clip));
    const double s = 1.0 / std::sqrt(3.0);
    auto content = [&](int i, int j) {
        double acc = 0.0;
        for (int d = 0; d < dh; ++d) acc += q.at(0, i, d) * k.at(0, j, d);
        return s * acc;
    };
    // j - i in {2, 3, 4, ...} all clip to +2: the residual term must match.
    const double r2 = out.at(0, 0, 2) - content(0, 2);
    for (int j = 3; j < T; ++j) CHECK(out.at(0, 0, j) - content(0, j) == doctest::Approx(r2).epsilon(1e-12));
    const double rm2 = out.at(0, 6, 4) - content(6, 4);
    for (int j = 0; j < 4; ++j) CHECK(out.at(0, 6, j) - content(6, j) == doctest::Approx(rm2).epsilon(1e-12));
}

TEST_CASE("relative attention gradients match finite differences") {
    const int H = 2, T = 5, dh = 4, clip = 2;
    Tensor q = random_tensor({H, T, dh}, 37);
    Tensor k = random_tensor({H, T, dh}, 38);
    Tensor rel = random_tensor({2 * clip + 1, dh}, 39);
    Tensor w = weights({H, T, T}, 40);
    check_fd({&q, &k, &rel}, [&](Graph& g) {
        return g.sum(
            g.mul(g.rel_attention_logits(g.param(q), g.param(k), g.param(rel), clip), g.input(w)));
    });
}

TEST_CASE("composed transformer forward matches finite differences on every parameter") {
    AgentSpec spec;
    spec.variant = AgentVariant::RelPos;  // exercises the relative path end to end
    spec.seed = 5;
    spec.d_model = 8;
    spec.n_heads = 2;
    spec.ffn_dim = 12;
    spec.enc_layers = 1;
    spec.dec_layers = 1;
    spec.rel_clip = 2;
    spec.dropout = 0.2;
    spec.vocab_size = 9;
    AgentModel agent = init_agent(spec);
    // 1e-2-scale parameters keep the finite-difference quotients well conditioned
    for (auto& p : agent.params)
        for (auto& v : p.value.data) v *= 0.5;

    const std::vector<int> src{4, 5, 6, 7};
    const std::vector<int> tgt{8, 4, 5};
    const DropoutCtx ctx{true, 42};

    std::vector<Tensor*> params;
    for (auto& p : agent.params) {
        p.value.requires_grad = true;
        p.value.grad.clear();
        params.push_back(&p.value);
    }
    auto build = [&](Graph& g) {
        TfForward fwd = build_tf_logprobs(g, agent, src, tgt, ctx);
        return g.nll(fwd.logprobs, fwd.gold, std::vector<double>(fwd.gold.size(), 1.0));
    };
    {
        Graph g;
        g.backward(build(g));
    }
    const auto report = oracles::finite_difference(params, [&] {
        Graph g;
        return g.value(build(g)).data[0];
    });
    CHECK(report.checked > 1000);
    CHECK(report.max_rel_err < 1e-4);

    // The same composed check through an L2R agent covers the absolute path.
    AgentSpec spec2 = spec;
    spec2.variant = AgentVariant::L2R;
    spec2.enc_layers = 1;
    AgentModel agent2 = init_agent(spec2);
    for (auto& p : agent2.params)
        for (auto& v : p.value.data) v *= 0.5;
    std::vector<Tensor*> params2;
    for (auto& p : agent2.params) {
        p.value.requires_grad = true;
        p.value.grad.clear();
        params2.push_back(&p.value);
    }
    auto build2 = [&](Graph& g) {
        TfForward fwd = build_tf_logprobs(g, agent2, src, tgt, ctx);
        return g.nll(fwd.logprobs, fwd.gold, std::vector<double>(fwd.gold.size(), 1.0));
    };
    {
        Graph g;
        g.backward(build2(g));
    }
    const auto report2 = oracles::finite_difference(params2, [&] {
        Graph g;
        return g.value(build2(g)).data[0];
    });
    CHECK(report2.max_rel_err < 1e-4);
}

TEST_CASE("forward passes are deterministic given seed and dropout stream") {
    AgentSpec spec;
    spec.seed = 9;
    spec.d_model = 8;
    spec.n_heads = 2;
    spec.ffn_dim = 12;
    spec.dropout = 0.3;
    spec.vocab_size = 10;
    AgentModel agent = init_agent(spec);
    const std::vector<int> src{4, 5}, tgt{6, 7};
    Graph g1, g2;
    const DropoutCtx ctx{true, 99};
    TfForward f1 = build_tf_logprobs(g1, agent, src, tgt, ctx);
    TfForward f2 = build_tf_logprobs(g2, agent, src, tgt, ctx);
    CHECK(g1.value(f1.logprobs).data == g2.value(f2.logprobs).data);
}
