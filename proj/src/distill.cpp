// SPDX-License-Identifier: Apache-2.0
#include "magent/distill.hpp"

#include <algorithm>
#include <stdexcept>

#include "magent/bleu.hpp"

namespace magent {

EnsembleDist ensemble(const std::vector<StepDistributions>& dists) {
    if (dists.empty()) throw std::invalid_argument("ensemble: need at least one agent");
    const Tensor& first = dists[0].probs;
    EnsembleDist out;
    out.n_agents = static_cast<int>(dists.size());
    out.probs = Tensor(first.shape);
    for (const auto& d : dists) check_same_shape(d.probs, first, "ensemble");
    const double inv = 1.0 / static_cast<double>(dists.size());
    for (int64_t e = 0; e < first.numel(); ++e) {
        double acc = 0.0;
        for (const auto& d : dists) acc += d.probs.data[static_cast<size_t>(e)];
        out.probs.data[static_cast<size_t>(e)] = acc * inv;
    }
    return out;
}

GateTarget gate(const std::vector<int>& ensemble_seq, const std::vector<int>& agent_seq,
                const std::vector<int>& reference, const EnsembleDist& q) {
    if (reference.empty()) throw std::invalid_argument("gate: empty reference");
    GateTarget t;
    t.ensemble_score = sentence_bleu(ensemble_seq, reference).value;
    t.agent_score = sentence_bleu(agent_seq, reference).value;
    const int rows = q.probs.dim(0);
    const int vocab = q.probs.dim(1);
    if (t.ensemble_score > t.agent_score) {
        t.branch = GateBranch::Ensemble;
        t.rows = q.probs;
        t.mask.assign(static_cast<size_t>(rows), 1.0);
    } else {
        t.branch = GateBranch::SelfIndicator;
        t.rows = Tensor({rows, vocab});
        t.mask.assign(static_cast<size_t>(rows), 0.0);
        const int n = std::min(rows, static_cast<int>(agent_seq.size()));
        for (int i = 0; i < n; ++i) {
            t.rows.at(i, agent_seq[static_cast<size_t>(i)]) = 1.0;
            t.mask[static_cast<size_t>(i)] = 1.0;
        }
    }
    return t;
}

Var kd_loss(Graph& g, Var agent_logprobs_reading, const GateTarget& target) {
    const Tensor& lp = g.value(agent_logprobs_reading);
    if (!lp.same_shape(target.rows))
        throw std::invalid_argument("kd_loss: logprobs/target shape mismatch " + lp.shape_str() + " vs " +
                                    target.rows.shape_str());
    Var s = g.input(target.rows);
    Var mask = g.input(Tensor({static_cast<int>(target.mask.size())}, target.mask));
    return g.cross_entropy(agent_logprobs_reading, s, mask);
}

Var agent_loss(Graph& g, Var nll, Var kd, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("agent_loss: lambda must be in [0,1]");
    if (lambda == 1.0) return nll;
    if (lambda == 0.0) return kd;
    return g.add(g.scale(nll, lambda), g.scale(kd, 1.0 - lambda));
}

LambdaSchedule lambda_schedule(const std::vector<double>& bleu) {
    if (bleu.empty()) throw std::invalid_argument("lambda_schedule: no scores");
    LambdaSchedule s;
    s.bleu = bleu;
    double sum = 0.0;
    for (double b : bleu) sum += b;
    s.bleu_avg = sum / static_cast<double>(bleu.size());
    for (double b : bleu)
        s.lambdas.push_back(0.5 + std::max(-0.5, std::min(0.5, (b - s.bleu_avg) / 10.0)));
    return s;
}

}  // namespace magent
