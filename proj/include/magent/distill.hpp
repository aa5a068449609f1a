// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "magent/autodiff.hpp"
#include "magent/model.hpp"

namespace magent {

// Arithmetic mean of the agents' aligned per-position distributions. Treated
// as a constant everywhere: no gradient ever flows through it.
struct EnsembleDist {
    Tensor probs;  // [T+1, V]
    int n_agents = 0;
};

EnsembleDist ensemble(const std::vector<StepDistributions>& dists);

enum class GateBranch { Ensemble, SelfIndicator };

// Per-sample distillation target: the ensemble rows when the ensemble's
// sequence beats the agent's own (strictly, by sentence BLEU against the
// reference), otherwise a one-hot reinforcement of the agent's own sequence.
struct GateTarget {
    GateBranch branch = GateBranch::SelfIndicator;
    Tensor rows;               // [T+1, V] in reading order
    std::vector<double> mask;  // length T+1
    double ensemble_score = 0.0;
    double agent_score = 0.0;
};

GateTarget gate(const std::vector<int>& ensemble_seq, const std::vector<int>& agent_seq,
                const std::vector<int>& reference, const EnsembleDist& q);

// Soft-target distillation loss on a tape: -sum_t mask_t sum_k S[t,k] log p[t,k].
// agent_logprobs rows are in reading order; gradient reaches only the agent.
Var kd_loss(Graph& g, Var agent_logprobs_reading, const GateTarget& target);

// Convex combination lambda * nll + (1 - lambda) * kd. Terms with zero weight
// are dropped so the degenerate cases collapse exactly.
Var agent_loss(Graph& g, Var nll, Var kd, double lambda);

struct LambdaSchedule {
    std::vector<double> lambdas;
    std::vector<double> bleu;
    double bleu_avg = 0.0;
};

// lambda_i = 0.5 + max(-0.5, min(0.5, (B_i - B_avg) / 10)), BLEU on the
// 0..100 scale. Computed once after pre-training and frozen.
LambdaSchedule lambda_schedule(const std::vector<double>& bleu);

}  // namespace magent
