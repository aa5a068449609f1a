// SPDX-License-Identifier: Apache-2.0
#include "magent/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include <json.hpp>

#include "magent/data.hpp"
#include "magent/kernels.hpp"
#include "magent/rng.hpp"

namespace magent {

AgentVariant parse_variant(const std::string& name) {
    if (name == "l2r") return AgentVariant::L2R;
    if (name == "r2l") return AgentVariant::R2L;
    if (name == "deep_enc") return AgentVariant::DeepEnc;
    if (name == "rel_pos") return AgentVariant::RelPos;
    throw std::invalid_argument("unknown agent variant: " + name);
}

std::string variant_name(AgentVariant v) {
    switch (v) {
        case AgentVariant::L2R: return "l2r";
        case AgentVariant::R2L: return "r2l";
        case AgentVariant::DeepEnc: return "deep_enc";
        case AgentVariant::RelPos: return "rel_pos";
    }
    return "?";
}

void AgentSpec::resolve_defaults() {
    if (enc_layers == 0) enc_layers = variant == AgentVariant::DeepEnc ? 6 : 2;
}

void AgentSpec::validate() const {
    if (d_model < 1 || n_heads < 1 || ffn_dim < 1 || enc_layers < 1 || dec_layers < 1 || vocab_size < 5)
        throw std::invalid_argument("agent spec: dimensions must be positive");
    if (d_model % n_heads != 0) throw std::invalid_argument("agent spec: d_model must divide by n_heads");
    if (variant == AgentVariant::DeepEnc && enc_layers <= 2)
        throw std::invalid_argument("agent spec: deep_enc needs more encoder layers than the default 2");
    if (variant == AgentVariant::RelPos && rel_clip < 1)
        throw std::invalid_argument("agent spec: rel_pos clip distance must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("agent spec: dropout must be in [0,1)");
}

std::string AgentSpec::to_json() const {
    nlohmann::json j;
    j["variant"] = variant_name(variant);
    j["seed"] = seed;
    j["d_model"] = d_model;
    j["n_heads"] = n_heads;
    j["ffn_dim"] = ffn_dim;
    j["enc_layers"] = enc_layers;
    j["dec_layers"] = dec_layers;
    j["rel_clip"] = rel_clip;
    j["dropout"] = dropout;
    j["vocab_size"] = vocab_size;
    return j.dump();
}

AgentSpec AgentSpec::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    AgentSpec s;
    s.variant = parse_variant(j.at("variant").get<std::string>());
    s.seed = j.at("seed").get<uint64_t>();
    s.d_model = j.value("d_model", 64);
    s.n_heads = j.value("n_heads", 4);
    s.ffn_dim = j.value("ffn_dim", 128);
    s.enc_layers = j.value("enc_layers", 0);
    s.dec_layers = j.value("dec_layers", 2);
    s.rel_clip = j.value("rel_clip", 8);
    s.dropout = j.value("dropout", 0.1);
    s.vocab_size = j.value("vocab_size", 64);
    s.resolve_defaults();
    s.validate();
    return s;
}

Tensor& AgentModel::p(const std::string& name) { return param(name).value; }
const Tensor& AgentModel::p(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params[it->second].value;
}

Param& AgentModel::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params[it->second];
}

bool AgentModel::has_param(const std::string& name) const { return index_.count(name) > 0; }

void AgentModel::zero_grads() {
    for (auto& pr : params) pr.value.zero_grad();
}

int64_t AgentModel::param_count() const {
    int64_t n = 0;
    for (const auto& pr : params) n += pr.value.numel();
    return n;
}

void AgentModel::rebuild_index() {
    index_.clear();
    for (size_t i = 0; i < params.size(); ++i) index_[params[i].name] = i;

    auto idx = [&](const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("missing parameter: " + name);
        return static_cast<int>(it->second);
    };
    auto wire_ln = [&](const std::string& prefix) {
        return LnWiring{idx(prefix + ".gain"), idx(prefix + ".bias")};
    };
    auto wire_attn = [&](const std::string& prefix, bool with_rel) {
        AttnWiring w;
        w.wq = idx(prefix + ".wq");
        w.bq = idx(prefix + ".bq");
        w.wk = idx(prefix + ".wk");
        w.bk = idx(prefix + ".bk");
        w.wv = idx(prefix + ".wv");
        w.bv = idx(prefix + ".bv");
        w.wo = idx(prefix + ".wo");
        w.bo = idx(prefix + ".bo");
        if (with_rel) w.rel = idx(prefix + ".rel");
        return w;
    };
    auto wire_ffn = [&](const std::string& prefix) {
        return FfnWiring{idx(prefix + ".w1"), idx(prefix + ".b1"), idx(prefix + ".w2"), idx(prefix + ".b2")};
    };

    wiring = ModelWiring{};
    wiring.src_embed = idx("src_embed");
    wiring.tgt_embed = idx("tgt_embed");
    wiring.out_w = idx("out.w");
    wiring.out_b = idx("out.b");
    wiring.enc_final = wire_ln("enc.final");
    wiring.dec_final = wire_ln("dec.final");
    for (int l = 0; l < spec.enc_layers; ++l) {
        const std::string p = "enc." + std::to_string(l);
        LayerWiring w;
        w.ln1 = wire_ln(p + ".ln1");
        w.attn = wire_attn(p + ".attn", spec.relative());
        w.ln2 = wire_ln(p + ".ln2");
        w.ffn = wire_ffn(p + ".ffn");
        wiring.enc.push_back(w);
    }
    for (int l = 0; l < spec.dec_layers; ++l) {
        const std::string p = "dec." + std::to_string(l);
        LayerWiring w;
        w.ln1 = wire_ln(p + ".ln1");
        w.attn = wire_attn(p + ".self", spec.relative());
        w.ln2 = wire_ln(p + ".ln2");
        w.cross = wire_attn(p + ".cross", false);
        w.ln3 = wire_ln(p + ".ln3");
        w.ffn = wire_ffn(p + ".ffn");
        wiring.dec.push_back(w);
    }
}

namespace {

enum class InitKind { Scaled, One, Zero };

struct ParamDef {
    std::string name;
    std::vector<int> shape;
    InitKind kind;
};

void push_attention(std::vector<ParamDef>& defs, const std::string& prefix, const AgentSpec& s,
                    bool with_rel) {
    const int d = s.d_model;
    for (const char* w : {"wq", "wk", "wv", "wo"})
        defs.push_back({prefix + "." + w, {d, d}, InitKind::Scaled});
    for (const char* b : {"bq", "bk", "bv", "bo"})
        defs.push_back({prefix + "." + b, {d}, InitKind::Zero});
    if (with_rel) defs.push_back({prefix + ".rel", {2 * s.rel_clip + 1, s.head_dim()}, InitKind::Scaled});
}

void push_ln(std::vector<ParamDef>& defs, const std::string& prefix, int d) {
    defs.push_back({prefix + ".gain", {d}, InitKind::One});
    defs.push_back({prefix + ".bias", {d}, InitKind::Zero});
}

void push_ffn(std::vector<ParamDef>& defs, const std::string& prefix, const AgentSpec& s) {
    defs.push_back({prefix + ".w1", {s.d_model, s.ffn_dim}, InitKind::Scaled});
    defs.push_back({prefix + ".b1", {s.ffn_dim}, InitKind::Zero});
    defs.push_back({prefix + ".w2", {s.ffn_dim, s.d_model}, InitKind::Scaled});
    defs.push_back({prefix + ".b2", {s.d_model}, InitKind::Zero});
}

std::vector<ParamDef> param_layout(const AgentSpec& s) {
    std::vector<ParamDef> defs;
    defs.push_back({"src_embed", {s.vocab_size, s.d_model}, InitKind::Scaled});
    defs.push_back({"tgt_embed", {s.vocab_size, s.d_model}, InitKind::Scaled});
    for (int l = 0; l < s.enc_layers; ++l) {
        const std::string p = "enc." + std::to_string(l);
        push_ln(defs, p + ".ln1", s.d_model);
        push_attention(defs, p + ".attn", s, s.relative());
        push_ln(defs, p + ".ln2", s.d_model);
        push_ffn(defs, p + ".ffn", s);
    }
    push_ln(defs, "enc.final", s.d_model);
    for (int l = 0; l < s.dec_layers; ++l) {
        const std::string p = "dec." + std::to_string(l);
        push_ln(defs, p + ".ln1", s.d_model);
        push_attention(defs, p + ".self", s, s.relative());
        push_ln(defs, p + ".ln2", s.d_model);
        push_attention(defs, p + ".cross", s, false);
        push_ln(defs, p + ".ln3", s.d_model);
        push_ffn(defs, p + ".ffn", s);
    }
    push_ln(defs, "dec.final", s.d_model);
    defs.push_back({"out.w", {s.d_model, s.vocab_size}, InitKind::Scaled});
    defs.push_back({"out.b", {s.vocab_size}, InitKind::Zero});
    return defs;
}

// Positions and token embeddings share the sqrt(d) scale: the encoding has
// to stay visible next to the up-scaled embeddings as the residual stream
// widens with depth.
Tensor posenc_table(int rows, int d) {
    Tensor t({rows, d});
    const double ps = std::sqrt(static_cast<double>(d));
    for (int pos = 0; pos < rows; ++pos)
        for (int i = 0; i < d; ++i) {
            const double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / d);
            t.at(pos, i) = ps * ((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    return t;
}

Tensor causal_mask(int heads, int rows) {
    Tensor t({heads, rows, rows});
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < rows; ++i)
            for (int j = i + 1; j < rows; ++j) t.at(h, i, j) = -1e9;
    return t;
}

inline int clip_rel(int delta, int clip) { return std::max(-clip, std::min(clip, delta)); }

int argmax_of(const std::vector<double>& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
}

// ---- teacher-forced graph construction ----

struct GraphCtx {
    Graph& g;
    AgentModel& a;
    DropoutCtx drop;
    int site = 0;

    Var dropped(Var x) {
        const int s = site++;
        if (!drop.train || a.spec.dropout == 0.0) return x;
        return g.dropout(x, a.spec.dropout, rng::derive(drop.key, 0xd70ULL, static_cast<uint64_t>(s)), true);
    }
    Var p(int idx) { return g.param(a.t(idx)); }
};

Var graph_ln(GraphCtx& c, const LnWiring& w, Var x) { return c.g.layer_norm(x, c.p(w.gain), c.p(w.bias)); }

Var graph_mha(GraphCtx& c, const AttnWiring& w, Var q_in, Var kv_in, int tq, bool causal) {
    const AgentSpec& s = c.a.spec;
    const int H = s.n_heads, dh = s.head_dim();
    Var qh = c.g.split_heads(c.g.linear(q_in, c.p(w.wq), c.p(w.bq)), H);
    Var kh = c.g.split_heads(c.g.linear(kv_in, c.p(w.wk), c.p(w.bk)), H);
    Var vh = c.g.split_heads(c.g.linear(kv_in, c.p(w.wv), c.p(w.bv)), H);
    Var scores = w.rel >= 0 ? c.g.rel_attention_logits(qh, kh, c.p(w.rel), s.rel_clip)
                            : c.g.scale(c.g.bmm_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (causal) scores = c.g.add(scores, c.g.input(causal_mask(H, tq)));
    Var ctx = c.g.bmm(c.g.softmax_rows(scores), vh);
    return c.g.linear(c.g.merge_heads(ctx), c.p(w.wo), c.p(w.bo));
}

Var graph_ffn(GraphCtx& c, const FfnWiring& w, Var x) {
    Var h = c.g.relu(c.g.linear(x, c.p(w.w1), c.p(w.b1)));
    return c.g.linear(h, c.p(w.w2), c.p(w.b2));
}

Var graph_embed(GraphCtx& c, int table, const std::vector<int>& ids) {
    const AgentSpec& s = c.a.spec;
    Var x = c.g.scale(c.g.embedding_lookup(c.p(table), ids), std::sqrt(static_cast<double>(s.d_model)));
    if (!s.relative()) x = c.g.add(x, c.g.input(posenc_table(static_cast<int>(ids.size()), s.d_model)));
    return c.dropped(x);
}

Var graph_encode(GraphCtx& c, const std::vector<int>& src_in) {
    const int S = static_cast<int>(src_in.size());
    Var x = graph_embed(c, c.a.wiring.src_embed, src_in);
    for (const LayerWiring& w : c.a.wiring.enc) {
        Var h = graph_ln(c, w.ln1, x);
        x = c.g.add(x, c.dropped(graph_mha(c, w.attn, h, h, S, false)));
        Var h2 = graph_ln(c, w.ln2, x);
        x = c.g.add(x, c.dropped(graph_ffn(c, w.ffn, h2)));
    }
    return graph_ln(c, c.a.wiring.enc_final, x);
}

Var graph_decode(GraphCtx& c, Var enc_out, const std::vector<int>& dec_in) {
    const int T = static_cast<int>(dec_in.size());
    Var y = graph_embed(c, c.a.wiring.tgt_embed, dec_in);
    for (const LayerWiring& w : c.a.wiring.dec) {
        Var h = graph_ln(c, w.ln1, y);
        y = c.g.add(y, c.dropped(graph_mha(c, w.attn, h, h, T, true)));
        Var h2 = graph_ln(c, w.ln2, y);
        y = c.g.add(y, c.dropped(graph_mha(c, w.cross, h2, enc_out, T, false)));
        Var h3 = graph_ln(c, w.ln3, y);
        y = c.g.add(y, c.dropped(graph_ffn(c, w.ffn, h3)));
    }
    y = graph_ln(c, c.a.wiring.dec_final, y);
    return c.g.log_softmax_rows(c.g.linear(y, c.p(c.a.wiring.out_w), c.p(c.a.wiring.out_b)));
}

}  // namespace

AgentModel init_agent(AgentSpec spec) {
    spec.resolve_defaults();
    spec.validate();
    AgentModel agent;
    agent.spec = spec;
    const auto defs = param_layout(spec);
    agent.params.reserve(defs.size());
    for (size_t i = 0; i < defs.size(); ++i) {
        const auto& def = defs[i];
        Param pr;
        pr.name = def.name;
        pr.value = Tensor(def.shape);
        pr.value.requires_grad = true;
        switch (def.kind) {
            case InitKind::Zero:
                break;
            case InitKind::One:
                std::fill(pr.value.data.begin(), pr.value.data.end(), 1.0);
                break;
            case InitKind::Scaled: {
                const double fan_in = def.shape[0];
                const double fan_out = def.shape.size() > 1 ? def.shape[1] : def.shape[0];
                const double bound = std::sqrt(6.0 / (fan_in + fan_out));
                rng::Stream stream(rng::derive(spec.seed, 0x696e6974ULL, static_cast<uint64_t>(i)));
                for (int64_t e = 0; e < pr.value.numel(); ++e)
                    pr.value.data[static_cast<size_t>(e)] =
                        stream.uniform(static_cast<uint64_t>(e), -bound, bound);
                break;
            }
        }
        pr.m.assign(pr.value.data.size(), 0.0);
        pr.v.assign(pr.value.data.size(), 0.0);
        agent.params.push_back(std::move(pr));
    }
    agent.rebuild_index();
    return agent;
}

TfForward build_tf_logprobs(Graph& g, AgentModel& agent, const std::vector<int>& src,
                            const std::vector<int>& tgt, const DropoutCtx& ctx) {
    if (src.empty()) throw std::invalid_argument("teacher-forced forward: empty source");
    std::vector<int> native = tgt;
    if (agent.spec.reversed()) std::reverse(native.begin(), native.end());

    std::vector<int> src_in = src;
    src_in.push_back(Vocab::kEos);
    std::vector<int> dec_in;
    dec_in.reserve(native.size() + 1);
    dec_in.push_back(Vocab::kBos);
    dec_in.insert(dec_in.end(), native.begin(), native.end());
    std::vector<int> gold = native;
    gold.push_back(Vocab::kEos);

    GraphCtx c{g, agent, ctx, 0};
    Var enc = graph_encode(c, src_in);
    Var logprobs = graph_decode(c, enc, dec_in);
    return {logprobs, std::move(gold)};
}

int native_row_for_reading(const AgentSpec& spec, int reading_pos, int n_rows) {
    if (!spec.reversed() || reading_pos == n_rows - 1) return reading_pos;
    return n_rows - 2 - reading_pos;
}

// ---- evaluation-mode forward with KV caches ----

namespace {

struct EvalScratch {
    std::vector<double> xhat, inv_std;
    void ensure(int rows, int cols) {
        xhat.resize(static_cast<size_t>(rows) * cols);
        inv_std.resize(static_cast<size_t>(rows));
    }
};

void eval_ln(const AgentModel& a, const LnWiring& w, const double* x, double* y, int rows, int cols,
             EvalScratch& s) {
    s.ensure(rows, cols);
    kernels::layer_norm_rows(x, a.t(w.gain).data.data(), a.t(w.bias).data.data(), y, s.xhat.data(),
                             s.inv_std.data(), rows, cols, 1e-5);
}

void eval_linear(const Tensor& W, const Tensor& B, const double* x, double* y, int rows) {
    kernels::gemm_nn(y, x, W.data.data(), rows, W.dim(0), W.dim(1), false);
    const int cols = W.dim(1);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) y[static_cast<int64_t>(i) * cols + j] += B.data[static_cast<size_t>(j)];
}

void split_heads(const double* x, int rows, int heads, int dh, std::vector<std::vector<double>>& out) {
    out.resize(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto& dst = out[static_cast<size_t>(h)];
        dst.resize(static_cast<size_t>(rows) * dh);
        for (int i = 0; i < rows; ++i)
            std::memcpy(dst.data() + static_cast<size_t>(i) * dh,
                        x + static_cast<int64_t>(i) * heads * dh + static_cast<int64_t>(h) * dh,
                        sizeof(double) * static_cast<size_t>(dh));
    }
}

void eval_embed_row(const AgentModel& a, int table, int token, int pos, double* out) {
    const AgentSpec& s = a.spec;
    const Tensor& tab = a.t(table);
    const double scale = std::sqrt(static_cast<double>(s.d_model));
    kernels::scale(out, tab.data.data() + static_cast<size_t>(token) * s.d_model, scale, s.d_model, false);
    if (!s.relative()) {
        const double ps = scale;
        for (int i = 0; i < s.d_model; ++i) {
            const double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / s.d_model);
            out[i] += ps * ((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    }
}

// Full-sequence encoder in eval mode; returns [S, d] final representation.
std::vector<double> eval_encode(const AgentModel& a, const std::vector<int>& src_in, EvalScratch& scr) {
    const AgentSpec& s = a.spec;
    const int S = static_cast<int>(src_in.size());
    const int d = s.d_model, H = s.n_heads, dh = s.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> x(static_cast<size_t>(S) * d);
    for (int t = 0; t < S; ++t)
        eval_embed_row(a, a.wiring.src_embed, src_in[static_cast<size_t>(t)], t,
                       x.data() + static_cast<size_t>(t) * d);

    std::vector<double> h(x.size()), q(x.size()), k(x.size()), v(x.size()), merged(x.size());
    std::vector<std::vector<double>> qh, kh, vh;
    std::vector<double> scores(static_cast<size_t>(S) * S), ctxh(static_cast<size_t>(S) * dh);
    std::vector<double> ffn_h(static_cast<size_t>(S) * s.ffn_dim), ffn_o(x.size());

    for (const LayerWiring& w : a.wiring.enc) {
        eval_ln(a, w.ln1, x.data(), h.data(), S, d, scr);
        eval_linear(a.t(w.attn.wq), a.t(w.attn.bq), h.data(), q.data(), S);
        eval_linear(a.t(w.attn.wk), a.t(w.attn.bk), h.data(), k.data(), S);
        eval_linear(a.t(w.attn.wv), a.t(w.attn.bv), h.data(), v.data(), S);
        split_heads(q.data(), S, H, dh, qh);
        split_heads(k.data(), S, H, dh, kh);
        split_heads(v.data(), S, H, dh, vh);
        const Tensor* rel = w.attn.rel >= 0 ? &a.t(w.attn.rel) : nullptr;
        for (int head = 0; head < H; ++head) {
            kernels::gemm_nt(scores.data(), qh[static_cast<size_t>(head)].data(),
                             kh[static_cast<size_t>(head)].data(), S, dh, S, false);
            if (rel) {
                const int nrel = 2 * s.rel_clip + 1;
                std::vector<double> qr(static_cast<size_t>(S) * nrel);
                kernels::gemm_nt(qr.data(), qh[static_cast<size_t>(head)].data(), rel->data.data(), S, dh,
                                 nrel, false);
                for (int i = 0; i < S; ++i)
                    for (int j = 0; j < S; ++j)
                        scores[static_cast<size_t>(i) * S + j] =
                            inv_sqrt_dh *
                            (scores[static_cast<size_t>(i) * S + j] +
                             qr[static_cast<size_t>(i) * nrel + clip_rel(j - i, s.rel_clip) + s.rel_clip]);
            } else {
                for (int64_t e = 0; e < static_cast<int64_t>(S) * S; ++e)
                    scores[static_cast<size_t>(e)] *= inv_sqrt_dh;
            }
            kernels::softmax_rows(scores.data(), scores.data(), S, S);
            kernels::gemm_nn(ctxh.data(), scores.data(), vh[static_cast<size_t>(head)].data(), S, S, dh, false);
            for (int i = 0; i < S; ++i)
                std::memcpy(merged.data() + static_cast<size_t>(i) * d + static_cast<size_t>(head) * dh,
                            ctxh.data() + static_cast<size_t>(i) * dh, sizeof(double) * static_cast<size_t>(dh));
        }
        eval_linear(a.t(w.attn.wo), a.t(w.attn.bo), merged.data(), q.data(), S);
        kernels::axpy(x.data(), 1.0, q.data(), static_cast<int64_t>(x.size()));
        eval_ln(a, w.ln2, x.data(), h.data(), S, d, scr);
        eval_linear(a.t(w.ffn.w1), a.t(w.ffn.b1), h.data(), ffn_h.data(), S);
        kernels::relu(ffn_h.data(), ffn_h.data(), static_cast<int64_t>(ffn_h.size()));
        eval_linear(a.t(w.ffn.w2), a.t(w.ffn.b2), ffn_h.data(), ffn_o.data(), S);
        kernels::axpy(x.data(), 1.0, ffn_o.data(), static_cast<int64_t>(x.size()));
    }
    std::vector<double> out(x.size());
    eval_ln(a, a.wiring.enc_final, x.data(), out.data(), S, d, scr);
    return out;
}

// Full-sequence decoder in eval mode, mirroring the tape path operation for
// operation; returns the native-order log-probability rows [T, V].
std::vector<double> eval_decode(const AgentModel& a, const std::vector<double>& enc_out,
                                const std::vector<int>& dec_in, EvalScratch& scr) {
    const AgentSpec& s = a.spec;
    const int T = static_cast<int>(dec_in.size());
    const int S = static_cast<int>(enc_out.size()) / s.d_model;
    const int d = s.d_model, H = s.n_heads, dh = s.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> y(static_cast<size_t>(T) * d);
    for (int t = 0; t < T; ++t)
        eval_embed_row(a, a.wiring.tgt_embed, dec_in[static_cast<size_t>(t)], t,
                       y.data() + static_cast<size_t>(t) * d);

    std::vector<double> h(y.size()), q(y.size()), o(y.size()), merged(y.size());
    std::vector<double> k(static_cast<size_t>(std::max(S, T)) * d), v(k.size());
    std::vector<std::vector<double>> qh, kh, vh;
    std::vector<double> scores(static_cast<size_t>(T) * std::max(S, T));
    std::vector<double> ctxh(static_cast<size_t>(T) * dh);
    std::vector<double> ffn_h(static_cast<size_t>(T) * s.ffn_dim);

    auto attend = [&](const AttnWiring& w, const double* kv_src, int tk, bool causal, bool relative) {
        eval_linear(a.t(w.wq), a.t(w.bq), h.data(), q.data(), T);
        eval_linear(a.t(w.wk), a.t(w.bk), kv_src, k.data(), tk);
        eval_linear(a.t(w.wv), a.t(w.bv), kv_src, v.data(), tk);
        split_heads(q.data(), T, H, dh, qh);
        split_heads(k.data(), tk, H, dh, kh);
        split_heads(v.data(), tk, H, dh, vh);
        const Tensor* rel = relative && w.rel >= 0 ? &a.t(w.rel) : nullptr;
        for (int head = 0; head < H; ++head) {
            kernels::gemm_nt(scores.data(), qh[static_cast<size_t>(head)].data(),
                             kh[static_cast<size_t>(head)].data(), T, dh, tk, false);
            if (rel) {
                const int nrel = 2 * s.rel_clip + 1;
                std::vector<double> qr(static_cast<size_t>(T) * nrel);
                kernels::gemm_nt(qr.data(), qh[static_cast<size_t>(head)].data(), rel->data.data(), T, dh,
                                 nrel, false);
                for (int i = 0; i < T; ++i)
                    for (int j = 0; j < tk; ++j)
                        scores[static_cast<size_t>(i) * tk + j] =
                            inv_sqrt_dh *
                            (scores[static_cast<size_t>(i) * tk + j] +
                             qr[static_cast<size_t>(i) * nrel + clip_rel(j - i, s.rel_clip) + s.rel_clip]);
            } else {
                for (int64_t e = 0; e < static_cast<int64_t>(T) * tk; ++e)
                    scores[static_cast<size_t>(e)] *= inv_sqrt_dh;
            }
            if (causal)
                for (int i = 0; i < T; ++i)
                    for (int j = i + 1; j < tk; ++j) scores[static_cast<size_t>(i) * tk + j] += -1e9;
            kernels::softmax_rows(scores.data(), scores.data(), T, tk);
            kernels::gemm_nn(ctxh.data(), scores.data(), vh[static_cast<size_t>(head)].data(), T, tk, dh,
                             false);
            for (int i = 0; i < T; ++i)
                std::memcpy(merged.data() + static_cast<size_t>(i) * d + static_cast<size_t>(head) * dh,
                            ctxh.data() + static_cast<size_t>(i) * dh, sizeof(double) * static_cast<size_t>(dh));
        }
        eval_linear(a.t(w.wo), a.t(w.bo), merged.data(), o.data(), T);
        kernels::axpy(y.data(), 1.0, o.data(), static_cast<int64_t>(y.size()));
    };

    for (const LayerWiring& w : a.wiring.dec) {
        eval_ln(a, w.ln1, y.data(), h.data(), T, d, scr);
        attend(w.attn, h.data(), T, true, s.relative());
        eval_ln(a, w.ln2, y.data(), h.data(), T, d, scr);
        attend(w.cross, enc_out.data(), S, false, false);
        eval_ln(a, w.ln3, y.data(), h.data(), T, d, scr);
        eval_linear(a.t(w.ffn.w1), a.t(w.ffn.b1), h.data(), ffn_h.data(), T);
        kernels::relu(ffn_h.data(), ffn_h.data(), static_cast<int64_t>(ffn_h.size()));
        eval_linear(a.t(w.ffn.w2), a.t(w.ffn.b2), ffn_h.data(), o.data(), T);
        kernels::axpy(y.data(), 1.0, o.data(), static_cast<int64_t>(y.size()));
    }
    eval_ln(a, a.wiring.dec_final, y.data(), h.data(), T, d, scr);
    std::vector<double> logits(static_cast<size_t>(T) * s.vocab_size);
    eval_linear(a.t(a.wiring.out_w), a.t(a.wiring.out_b), h.data(), logits.data(), T);
    kernels::log_softmax_rows(logits.data(), logits.data(), T, s.vocab_size);
    return logits;
}

}  // namespace

EvalForward forward_teacher_forced_cached(const AgentModel& agent, const std::vector<int>& src,
                                          const std::vector<int>& tgt) {
    if (src.empty()) throw std::invalid_argument("teacher-forced forward: empty source");
    std::vector<int> native = tgt;
    if (agent.spec.reversed()) std::reverse(native.begin(), native.end());
    std::vector<int> src_in = src;
    src_in.push_back(Vocab::kEos);
    std::vector<int> dec_in;
    dec_in.reserve(native.size() + 1);
    dec_in.push_back(Vocab::kBos);
    dec_in.insert(dec_in.end(), native.begin(), native.end());

    EvalScratch scr;
    EvalForward out;
    out.enc_out = eval_encode(agent, src_in, scr);
    const std::vector<double> logprobs = eval_decode(agent, out.enc_out, dec_in, scr);
    const int rows = static_cast<int>(dec_in.size());
    const int vocab = agent.spec.vocab_size;
    out.dists.probs = Tensor({rows, vocab});
    for (int t = 0; t < rows; ++t) {
        const int native_row = native_row_for_reading(agent.spec, t, rows);
        for (int k = 0; k < vocab; ++k)
            out.dists.probs.at(t, k) = std::exp(logprobs[static_cast<size_t>(native_row) * vocab + k]);
    }
    out.dists.mask.assign(static_cast<size_t>(rows), 1.0);
    return out;
}

StepDistributions forward_teacher_forced(const AgentModel& agent, const std::vector<int>& src,
                                         const std::vector<int>& tgt) {
    return forward_teacher_forced_cached(agent, src, tgt).dists;
}

struct IncrementalDecoder::State {
    const AgentModel& agent;
    int S = 0;
    int pos = 0;
    EvalScratch scr;
    std::vector<double> enc_out;  // [S, d]
    struct LayerCache {
        std::vector<std::vector<double>> k_self, v_self;    // per head, rows grow with pos
        std::vector<std::vector<double>> k_cross, v_cross;  // per head, [S, dh]
    };
    std::vector<LayerCache> layers;
    std::vector<double> probs;
    // per-step scratch, sized once in the constructor
    std::vector<double> x, h, q, k, v, merged, o, scores, ctxh, ffn_h, qr;

    explicit State(const AgentModel& a) : agent(a) {}
};

IncrementalDecoder::IncrementalDecoder(const AgentModel& agent, const std::vector<int>& src)
    : IncrementalDecoder(agent, [&] {
          EvalScratch scr;
          std::vector<int> src_in = src;
          src_in.push_back(Vocab::kEos);
          return eval_encode(agent, src_in, scr);
      }()) {}

IncrementalDecoder::IncrementalDecoder(const AgentModel& agent, std::vector<double> enc_out)
    : state_(std::make_unique<State>(agent)) {
    const AgentSpec& s = agent.spec;
    State& st = *state_;
    st.S = static_cast<int>(enc_out.size()) / s.d_model;
    st.enc_out = std::move(enc_out);

    st.layers.resize(agent.wiring.dec.size());
    std::vector<double> kc(static_cast<size_t>(st.S) * s.d_model), vc(kc.size());
    for (size_t l = 0; l < agent.wiring.dec.size(); ++l) {
        const LayerWiring& w = agent.wiring.dec[l];
        eval_linear(agent.t(w.cross.wk), agent.t(w.cross.bk), st.enc_out.data(), kc.data(), st.S);
        eval_linear(agent.t(w.cross.wv), agent.t(w.cross.bv), st.enc_out.data(), vc.data(), st.S);
        split_heads(kc.data(), st.S, s.n_heads, s.head_dim(), st.layers[l].k_cross);
        split_heads(vc.data(), st.S, s.n_heads, s.head_dim(), st.layers[l].v_cross);
        st.layers[l].k_self.assign(static_cast<size_t>(s.n_heads), {});
        st.layers[l].v_self.assign(static_cast<size_t>(s.n_heads), {});
    }
    const size_t d = static_cast<size_t>(s.d_model);
    st.x.resize(d);
    st.h.resize(d);
    st.q.resize(d);
    st.k.resize(d);
    st.v.resize(d);
    st.merged.resize(d);
    st.o.resize(d);
    st.ctxh.resize(static_cast<size_t>(s.head_dim()));
    st.ffn_h.resize(static_cast<size_t>(s.ffn_dim));
    st.qr.resize(static_cast<size_t>(2 * s.rel_clip + 1));
    st.probs.resize(static_cast<size_t>(s.vocab_size));
}

IncrementalDecoder::~IncrementalDecoder() = default;
IncrementalDecoder::IncrementalDecoder(IncrementalDecoder&&) noexcept = default;

const std::vector<double>& IncrementalDecoder::step(int token) {
    State& st = *state_;
    const AgentModel& a = st.agent;
    const AgentSpec& s = a.spec;
    const int d = s.d_model, H = s.n_heads, dh = s.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    const int t = st.pos;

    eval_embed_row(a, a.wiring.tgt_embed, token, t, st.x.data());

    for (size_t l = 0; l < a.wiring.dec.size(); ++l) {
        const LayerWiring& w = a.wiring.dec[l];
        auto& cache = st.layers[l];

        // Self attention over cached positions 0..t.
        eval_ln(a, w.ln1, st.x.data(), st.h.data(), 1, d, st.scr);
        eval_linear(a.t(w.attn.wq), a.t(w.attn.bq), st.h.data(), st.q.data(), 1);
        eval_linear(a.t(w.attn.wk), a.t(w.attn.bk), st.h.data(), st.k.data(), 1);
        eval_linear(a.t(w.attn.wv), a.t(w.attn.bv), st.h.data(), st.v.data(), 1);
        const Tensor* rel = w.attn.rel >= 0 ? &a.t(w.attn.rel) : nullptr;
        st.scores.resize(static_cast<size_t>(t) + 1);
        for (int head = 0; head < H; ++head) {
            auto& ks = cache.k_self[static_cast<size_t>(head)];
            auto& vs = cache.v_self[static_cast<size_t>(head)];
            ks.insert(ks.end(), st.k.begin() + static_cast<size_t>(head) * dh,
                      st.k.begin() + static_cast<size_t>(head + 1) * dh);
            vs.insert(vs.end(), st.v.begin() + static_cast<size_t>(head) * dh,
                      st.v.begin() + static_cast<size_t>(head + 1) * dh);
            const double* qhp = st.q.data() + static_cast<size_t>(head) * dh;
            kernels::gemm_nt(st.scores.data(), qhp, ks.data(), 1, dh, t + 1, false);
            if (rel) {
                const int nrel = 2 * s.rel_clip + 1;
                kernels::gemm_nt(st.qr.data(), qhp, rel->data.data(), 1, dh, nrel, false);
                for (int j = 0; j <= t; ++j)
                    st.scores[static_cast<size_t>(j)] =
                        inv_sqrt_dh * (st.scores[static_cast<size_t>(j)] +
                                       st.qr[static_cast<size_t>(clip_rel(j - t, s.rel_clip) + s.rel_clip)]);
            } else {
                for (int j = 0; j <= t; ++j) st.scores[static_cast<size_t>(j)] *= inv_sqrt_dh;
            }
            kernels::softmax_rows(st.scores.data(), st.scores.data(), 1, t + 1);
            kernels::gemm_nn(st.ctxh.data(), st.scores.data(), vs.data(), 1, t + 1, dh, false);
            std::memcpy(st.merged.data() + static_cast<size_t>(head) * dh, st.ctxh.data(),
                        sizeof(double) * static_cast<size_t>(dh));
        }
        eval_linear(a.t(w.attn.wo), a.t(w.attn.bo), st.merged.data(), st.o.data(), 1);
        kernels::axpy(st.x.data(), 1.0, st.o.data(), d);

        // Cross attention over the encoder output.
        eval_ln(a, w.ln2, st.x.data(), st.h.data(), 1, d, st.scr);
        eval_linear(a.t(w.cross.wq), a.t(w.cross.bq), st.h.data(), st.q.data(), 1);
        st.scores.resize(static_cast<size_t>(st.S));
        for (int head = 0; head < H; ++head) {
            const double* qhp = st.q.data() + static_cast<size_t>(head) * dh;
            kernels::gemm_nt(st.scores.data(), qhp, cache.k_cross[static_cast<size_t>(head)].data(), 1, dh,
                             st.S, false);
            for (int j = 0; j < st.S; ++j) st.scores[static_cast<size_t>(j)] *= inv_sqrt_dh;
            kernels::softmax_rows(st.scores.data(), st.scores.data(), 1, st.S);
            kernels::gemm_nn(st.ctxh.data(), st.scores.data(), cache.v_cross[static_cast<size_t>(head)].data(),
                             1, st.S, dh, false);
            std::memcpy(st.merged.data() + static_cast<size_t>(head) * dh, st.ctxh.data(),
                        sizeof(double) * static_cast<size_t>(dh));
        }
        eval_linear(a.t(w.cross.wo), a.t(w.cross.bo), st.merged.data(), st.o.data(), 1);
        kernels::axpy(st.x.data(), 1.0, st.o.data(), d);

        // Feed forward.
        eval_ln(a, w.ln3, st.x.data(), st.h.data(), 1, d, st.scr);
        eval_linear(a.t(w.ffn.w1), a.t(w.ffn.b1), st.h.data(), st.ffn_h.data(), 1);
        kernels::relu(st.ffn_h.data(), st.ffn_h.data(), s.ffn_dim);
        eval_linear(a.t(w.ffn.w2), a.t(w.ffn.b2), st.ffn_h.data(), st.o.data(), 1);
        kernels::axpy(st.x.data(), 1.0, st.o.data(), d);
    }

    eval_ln(a, a.wiring.dec_final, st.x.data(), st.h.data(), 1, d, st.scr);
    eval_linear(a.t(a.wiring.out_w), a.t(a.wiring.out_b), st.h.data(), st.probs.data(), 1);
    kernels::softmax_rows(st.probs.data(), st.probs.data(), 1, s.vocab_size);
    ++st.pos;
    return st.probs;
}

const std::vector<double>& IncrementalDecoder::last_probs() const { return state_->probs; }

namespace {

std::vector<int> greedy_loop(const AgentModel& agent, IncrementalDecoder& dec, int max_len) {
    std::vector<int> out;
    const std::vector<double>* probs = &dec.step(Vocab::kBos);
    while (true) {
        const int best = argmax_of(*probs);
        if (best == Vocab::kEos) break;
        out.push_back(best);
        if (static_cast<int>(out.size()) >= max_len) break;
        probs = &dec.step(best);
    }
    if (agent.spec.reversed()) std::reverse(out.begin(), out.end());
    return out;
}

}  // namespace

std::vector<int> greedy_decode(const AgentModel& agent, const std::vector<int>& src, int max_len) {
    if (max_len <= 0) return {};
    IncrementalDecoder dec(agent, src);
    return greedy_loop(agent, dec, max_len);
}

std::vector<int> greedy_decode_cached(const AgentModel& agent, std::vector<double> enc_out, int max_len) {
    if (max_len <= 0) return {};
    IncrementalDecoder dec(agent, std::move(enc_out));
    return greedy_loop(agent, dec, max_len);
}

double token_accuracy(const AgentModel& agent, const std::vector<int>& src, const std::vector<int>& tgt) {
    StepDistributions dist = forward_teacher_forced(agent, src, tgt);
    std::vector<int> gold = tgt;
    gold.push_back(Vocab::kEos);
    const int rows = dist.probs.dim(0);
    int correct = 0;
    for (int t = 0; t < rows; ++t) {
        int best = 0;
        for (int k = 1; k < dist.probs.dim(1); ++k)
            if (dist.probs.at(t, k) > dist.probs.at(t, best)) best = k;
        if (best == gold[static_cast<size_t>(t)]) ++correct;
    }
    return static_cast<double>(correct) / rows;
}

}  // namespace magent
