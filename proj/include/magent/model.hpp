// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "magent/autodiff.hpp"
#include "magent/tensor.hpp"

namespace magent {

enum class AgentVariant { L2R, R2L, DeepEnc, RelPos };

AgentVariant parse_variant(const std::string& name);
std::string variant_name(AgentVariant v);

struct AgentSpec {
    AgentVariant variant = AgentVariant::L2R;
    uint64_t seed = 1;
    int d_model = 64;
    int n_heads = 4;
    int ffn_dim = 128;
    int enc_layers = 0;  // 0: variant default (2, DeepEnc 6)
    int dec_layers = 2;
    int rel_clip = 8;    // RelPos only
    double dropout = 0.1;
    int vocab_size = 64;

    void resolve_defaults();
    void validate() const;
    bool reversed() const { return variant == AgentVariant::R2L; }
    bool relative() const { return variant == AgentVariant::RelPos; }
    int head_dim() const { return d_model / n_heads; }

    std::string to_json() const;
    static AgentSpec from_json(const std::string& text);
};

struct Param {
    std::string name;
    Tensor value;           // requires_grad = true
    std::vector<double> m;  // Adam first moment
    std::vector<double> v;  // Adam second moment
};

// Parameter indices resolved once per model so the hot paths never touch
// name strings. Indices stay valid across copies of the AgentModel.
struct AttnWiring {
    int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1, rel = -1;
};
struct LnWiring {
    int gain = -1, bias = -1;
};
struct FfnWiring {
    int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
};
struct LayerWiring {
    LnWiring ln1;
    AttnWiring attn;   // encoder self / decoder self
    LnWiring ln2;
    AttnWiring cross;  // decoder only
    LnWiring ln3;      // decoder only
    FfnWiring ffn;
};
struct ModelWiring {
    int src_embed = -1, tgt_embed = -1, out_w = -1, out_b = -1;
    LnWiring enc_final, dec_final;
    std::vector<LayerWiring> enc, dec;
};

struct AgentModel {
    AgentSpec spec;
    std::vector<Param> params;
    int64_t step = 0;
    ModelWiring wiring;

    Tensor& p(const std::string& name);
    const Tensor& p(const std::string& name) const;
    Param& param(const std::string& name);
    bool has_param(const std::string& name) const;
    Tensor& t(int idx) { return params[static_cast<size_t>(idx)].value; }
    const Tensor& t(int idx) const { return params[static_cast<size_t>(idx)].value; }
    void zero_grads();
    int64_t param_count() const;

    void rebuild_index();

private:
    std::unordered_map<std::string, size_t> index_;
};

// Fresh agent with seeded scaled-uniform initialisation; two calls with an
// equal spec produce bitwise-identical parameters.
AgentModel init_agent(AgentSpec spec);

// Per-position next-token distributions, aligned to source-reading order
// (R2L rows are re-aligned internally). Row count is |tgt| + 1: every target
// token plus the end-of-sequence position.
struct StepDistributions {
    Tensor probs;              // [T+1, V]
    std::vector<double> mask;  // length T+1
};

struct DropoutCtx {
    bool train = false;
    uint64_t key = 0;  // derives per-site streams; unused in eval mode
};

// Teacher-forced forward on a tape, in the agent's native decoding order.
struct TfForward {
    Var logprobs;               // [T+1, V]
    std::vector<int> gold;      // native-order training targets (tgt' + EOS)
};
TfForward build_tf_logprobs(Graph& g, AgentModel& agent, const std::vector<int>& src,
                            const std::vector<int>& tgt, const DropoutCtx& ctx);

// Map between native row order and reading order. For L2R-family agents this
// is the identity; for R2L rows 0..T-1 reverse and the EOS row stays last.
int native_row_for_reading(const AgentSpec& spec, int reading_pos, int n_rows);

// Evaluation-mode teacher-forced distributions in reading order.
StepDistributions forward_teacher_forced(const AgentModel& agent, const std::vector<int>& src,
                                         const std::vector<int>& tgt);

// Same, but also hands back the encoder output ([|src|+1, d], source plus
// EOS row) so follow-up decodes of the same source can skip re-encoding.
struct EvalForward {
    StepDistributions dists;
    std::vector<double> enc_out;
};
EvalForward forward_teacher_forced_cached(const AgentModel& agent, const std::vector<int>& src,
                                          const std::vector<int>& tgt);

// Step-by-step decoder with cached keys/values; used by greedy decoding and
// ensemble decoding. Operates in the agent's native order and in eval mode.
class IncrementalDecoder {
public:
    IncrementalDecoder(const AgentModel& agent, const std::vector<int>& src);
    // Starts from a precomputed encoder output (as returned by
    // forward_teacher_forced_cached for the same source).
    IncrementalDecoder(const AgentModel& agent, std::vector<double> enc_out);
    ~IncrementalDecoder();
    IncrementalDecoder(IncrementalDecoder&&) noexcept;

    // Feeds one decoder-input token and returns the distribution over the
    // next output token. The first call must feed BOS.
    const std::vector<double>& step(int token);
    const std::vector<double>& last_probs() const;

private:
    struct State;
    std::unique_ptr<State> state_;
};

// Free-running argmax decode; returns payload tokens in reading order.
std::vector<int> greedy_decode(const AgentModel& agent, const std::vector<int>& src, int max_len);
std::vector<int> greedy_decode_cached(const AgentModel& agent, std::vector<double> enc_out, int max_len);

// Fraction of teacher-forced argmax predictions matching the gold tokens.
double token_accuracy(const AgentModel& agent, const std::vector<int>& src, const std::vector<int>& tgt);

}  // namespace magent
