// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "magent/data.hpp"
#include "magent/distill.hpp"
#include "magent/model.hpp"

namespace magent {

struct OptimizerConfig {
    double lr_factor = 1.0;
    int64_t warmup_steps = 400;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double weight_decay = 0.0;
};

// Inverse-square-root schedule with linear warmup, scaled by d_model.
double lr_at(const OptimizerConfig& opt, int d_model, int64_t step);

enum class GenerationMode { Forced, Free };

struct AgentConfig {
    std::string name;
    AgentSpec spec;
};

struct TrainConfig {
    std::vector<AgentConfig> agents;
    int batch_size = 16;
    OptimizerConfig optimizer;
    int64_t max_pretrain_steps = 1000;
    int64_t max_joint_steps = 3000;
    int64_t eval_interval = 200;
    int patience = 5;
    std::filesystem::path vocab_file;
    std::filesystem::path train_src, train_tgt;
    std::filesystem::path valid_src, valid_tgt;
    std::filesystem::path test_src, test_tgt;
    std::optional<double> lambda_override;
    GenerationMode generation_mode = GenerationMode::Forced;
    uint64_t seed = 7;
    std::filesystem::path run_dir = "run";

    void validate() const;
};

struct MetricsRow {
    int64_t step = 0;
    std::string agent;
    double nll = 0.0;
    double kd = 0.0;
    double gate_ensemble_rate = 0.0;
    double valid_bleu = 0.0;
};

// Tab-separated append-only log, one line per evaluation event.
class MetricsLog {
public:
    MetricsLog() = default;
    MetricsLog(std::filesystem::path file, bool truncate);
    void append(const MetricsRow& row);
    const std::vector<MetricsRow>& rows() const { return rows_; }
    static std::vector<MetricsRow> read(const std::filesystem::path& file);

private:
    std::filesystem::path file_;
    std::vector<MetricsRow> rows_;
};

// One optimisation step for a single agent on one batch: teacher-forced
// forward, loss normalised by the batch token count, Adam update. With
// lambda == 1 or a null joint context this is the pure NLL step used by
// pre-training.
struct JointContext {
    const std::vector<EnsembleDist>* q = nullptr;                 // per sample
    const std::vector<std::vector<int>>* ensemble_seq = nullptr;  // Y_t per sample
    // Free-running decodes per agent per sample; empty rows for agents whose
    // lambda is 1 (their distillation term is skipped).
    const std::vector<std::vector<std::vector<int>>>* self_seq = nullptr;
};

struct AgentBatchStats {
    double nll_sum = 0.0;
    double kd_sum = 0.0;
    int64_t tokens = 0;
    int gate_ensemble = 0;
    int gate_total = 0;
};

AgentBatchStats train_agent_batch(AgentModel& agent, int agent_idx, const Batch& batch, double lambda,
                                  const JointContext* joint, const OptimizerConfig& opt,
                                  uint64_t run_seed);

inline AgentBatchStats nll_step(AgentModel& agent, int agent_idx, const Batch& batch,
                                const OptimizerConfig& opt, uint64_t run_seed) {
    return train_agent_batch(agent, agent_idx, batch, 1.0, nullptr, opt, run_seed);
}

// Free-running greedy decode of the averaged ensemble distribution. All
// agents must decode in the same direction.
std::vector<int> ensemble_greedy_decode(const std::vector<const AgentModel*>& agents,
                                        const std::vector<int>& src, int max_len);

int decode_max_len(int src_len);

struct PretrainOutcome {
    std::vector<AgentModel> agents;     // restored to their best checkpoints
    std::vector<double> valid_bleu;     // B_i for the lambda schedule
};

class Trainer {
public:
    explicit Trainer(TrainConfig cfg);

    // Test hook replacing validation BLEU computation during pre-training.
    using EvalHook = std::function<double(const AgentModel&, int64_t step)>;
    void set_eval_hook(EvalHook hook) { eval_hook_ = std::move(hook); }

    PretrainOutcome pretrain(bool resume = false);

    // Interactive joint loop over pre-trained agents: ensemble, gate,
    // per-agent mixed losses, independent per-agent updates.
    void joint_train(std::vector<AgentModel>& agents, const LambdaSchedule& schedule);

    // Pure-NLL continuation with the joint-phase data order; the comparator
    // for the lambda collapse.
    void continued_nll_train(std::vector<AgentModel>& agents, int64_t steps);

    struct Report {
        std::vector<std::string> names;
        std::vector<double> bleu;
        double ensemble_bleu = -1.0;  // < 0 when not computed
    };
    Report evaluate(const std::vector<AgentModel>& agents, const std::string& split,
                    bool with_ensemble) const;

    double validation_bleu(const AgentModel& agent) const;

    const TrainConfig& config() const { return cfg_; }
    const Vocab& vocab() const { return vocab_; }
    const std::vector<SentencePair>& pairs(const std::string& split) const;
    std::filesystem::path agent_dir(const std::string& name) const;
    std::filesystem::path metrics_file() const { return cfg_.run_dir / "metrics.tsv"; }

private:
    TrainConfig cfg_;
    Vocab vocab_;
    std::vector<SentencePair> train_, valid_, test_;
    EvalHook eval_hook_;

    double eval_agent(const AgentModel& agent, int64_t step) const;
    bool homogeneous_direction() const;
};

}  // namespace magent
