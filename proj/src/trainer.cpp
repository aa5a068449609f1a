// SPDX-License-Identifier: Apache-2.0
#include "magent/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "magent/bleu.hpp"
#include "magent/checkpoint.hpp"
#include "magent/kernels.hpp"
#include "magent/rng.hpp"

namespace fs = std::filesystem;

namespace magent {

double lr_at(const OptimizerConfig& opt, int d_model, int64_t step) {
    const double s = static_cast<double>(std::max<int64_t>(1, step));
    const double w = static_cast<double>(std::max<int64_t>(1, opt.warmup_steps));
    return opt.lr_factor * std::pow(static_cast<double>(d_model), -0.5) *
           std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

void TrainConfig::validate() const {
    if (agents.empty()) throw std::invalid_argument("config: at least one agent required");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (eval_interval < 1) throw std::invalid_argument("config: eval_interval must be >= 1");
    if (patience < 1) throw std::invalid_argument("config: patience must be >= 1");
    if (max_pretrain_steps < 0 || max_joint_steps < 0) throw std::invalid_argument("config: negative step budget");
    if (lambda_override && (*lambda_override < 0.0 || *lambda_override > 1.0))
        throw std::invalid_argument("config: lambda_override must be in [0,1]");
    for (size_t i = 0; i < agents.size(); ++i) {
        if (agents[i].name.empty() || agents[i].name.find_first_of(" \t/") != std::string::npos)
            throw std::invalid_argument("config: agent names must be nonempty and path-safe");
        for (size_t j = i + 1; j < agents.size(); ++j)
            if (agents[i].name == agents[j].name)
                throw std::invalid_argument("config: duplicate agent name " + agents[i].name);
    }
    if (generation_mode == GenerationMode::Free) {
        for (const auto& a : agents)
            if (a.spec.reversed() != agents[0].spec.reversed())
                throw std::invalid_argument("config: free generation mode requires a homogeneous decode direction");
    }
}

MetricsLog::MetricsLog(fs::path file, bool truncate) : file_(std::move(file)) {
    fs::create_directories(file_.parent_path().empty() ? "." : file_.parent_path());
    if (truncate) {
        std::ofstream out(file_, std::ios::trunc);
    } else if (fs::exists(file_)) {
        rows_ = read(file_);
    }
}

void MetricsLog::append(const MetricsRow& row) {
    rows_.push_back(row);
    if (file_.empty()) return;
    std::ofstream out(file_, std::ios::app);
    if (!out) throw std::runtime_error("cannot append metrics log: " + file_.string());
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld\t%s\t%.10g\t%.10g\t%.10g\t%.10g\n",
                  static_cast<long long>(row.step), row.agent.c_str(), row.nll, row.kd,
                  row.gate_ensemble_rate, row.valid_bleu);
    out << buf;
}

std::vector<MetricsRow> MetricsLog::read(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read metrics log: " + file.string());
    std::vector<MetricsRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        MetricsRow r;
        ss >> r.step >> r.agent >> r.nll >> r.kd >> r.gate_ensemble_rate >> r.valid_bleu;
        rows.push_back(std::move(r));
    }
    return rows;
}

int decode_max_len(int src_len) { return 2 * src_len + 4; }

namespace {

GateTarget to_native_order(const AgentSpec& spec, const GateTarget& reading) {
    if (!spec.reversed()) return reading;
    GateTarget t = reading;
    const int rows = reading.rows.dim(0);
    const int vocab = reading.rows.dim(1);
    for (int j = 0; j < rows; ++j) {
        const int r = native_row_for_reading(spec, j, rows);
        std::copy_n(reading.rows.data.begin() + static_cast<int64_t>(r) * vocab, vocab,
                    t.rows.data.begin() + static_cast<int64_t>(j) * vocab);
        t.mask[static_cast<size_t>(j)] = reading.mask[static_cast<size_t>(r)];
    }
    return t;
}

std::vector<int> argmax_sequence(const Tensor& probs) {
    std::vector<int> out;
    for (int t = 0; t < probs.dim(0); ++t) {
        int best = 0;
        for (int k = 1; k < probs.dim(1); ++k)
            if (probs.at(t, k) > probs.at(t, best)) best = k;
        if (best == Vocab::kEos) break;
        out.push_back(best);
    }
    return out;
}

// Runs f(i) for i in [0, n) in parallel, capturing the first exception.
template <typename F>
void parallel_indexed(int n, F&& f) {
    std::string error;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        try {
            f(i);
        } catch (const std::exception& e) {
#pragma omp critical
            if (error.empty()) error = e.what();
        }
    }
    if (!error.empty()) throw std::runtime_error(error);
}

struct AgentTrainState {
    int64_t best_step = 0;
    double best_bleu = -1.0;
    int evals_since_improve = 0;

    void save(const fs::path& file) const {
        nlohmann::json j;
        j["best_step"] = best_step;
        j["best_bleu"] = best_bleu;
        j["evals_since_improve"] = evals_since_improve;
        std::ofstream out(file);
        if (!out) throw std::runtime_error("cannot write trainer state: " + file.string());
        out << j.dump(2) << "\n";
    }
    static AgentTrainState load(const fs::path& file) {
        std::ifstream in(file);
        if (!in) throw std::runtime_error("cannot read trainer state: " + file.string());
        nlohmann::json j = nlohmann::json::parse(in);
        AgentTrainState s;
        s.best_step = j.at("best_step").get<int64_t>();
        s.best_bleu = j.at("best_bleu").get<double>();
        s.evals_since_improve = j.at("evals_since_improve").get<int>();
        return s;
    }
};

}  // namespace

AgentBatchStats train_agent_batch(AgentModel& agent, int agent_idx, const Batch& batch, double lambda,
                                  const JointContext* joint, const OptimizerConfig& opt,
                                  uint64_t run_seed) {
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("train: lambda must be in [0,1]");
    AgentBatchStats stats;
    for (int s = 0; s < batch.size; ++s) stats.tokens += batch.tgt_len[static_cast<size_t>(s)] + 1;
    const double inv_tokens = 1.0 / static_cast<double>(stats.tokens);
    const bool use_kd = lambda < 1.0 && joint != nullptr;

    agent.zero_grads();
    for (int s = 0; s < batch.size; ++s) {
        const std::vector<int> src = batch.src_row(s);
        const std::vector<int> tgt = batch.tgt_row(s);
        Graph g;
        DropoutCtx ctx{true, rng::derive(run_seed, 0x64726f70ULL, static_cast<uint64_t>(agent_idx),
                                         static_cast<uint64_t>(agent.step), static_cast<uint64_t>(s))};
        TfForward fwd = build_tf_logprobs(g, agent, src, tgt, ctx);
        const std::vector<double> ones(fwd.gold.size(), 1.0);
        Var nll = g.nll(fwd.logprobs, fwd.gold, ones);
        stats.nll_sum += g.value(nll).data[0];
        Var loss = nll;
        if (use_kd) {
            const EnsembleDist& q = (*joint->q)[static_cast<size_t>(s)];
            const std::vector<int> self_seq =
                joint->self_seq ? (*joint->self_seq)[static_cast<size_t>(agent_idx)][static_cast<size_t>(s)]
                                : greedy_decode(agent, src, decode_max_len(static_cast<int>(src.size())));
            GateTarget target = gate((*joint->ensemble_seq)[static_cast<size_t>(s)], self_seq, tgt, q);
            ++stats.gate_total;
            if (target.branch == GateBranch::Ensemble) ++stats.gate_ensemble;
            const GateTarget native = to_native_order(agent.spec, target);
            Var kd = kd_loss(g, fwd.logprobs, native);
            stats.kd_sum += g.value(kd).data[0];
            loss = agent_loss(g, nll, kd, lambda);
        }
        const double loss_value = g.value(loss).data[0];
        if (!std::isfinite(loss_value))
            throw std::runtime_error("training diverged: non-finite loss at step " +
                                     std::to_string(agent.step) + " (agent " + std::to_string(agent_idx) + ")");
        g.backward(g.scale(loss, inv_tokens));
    }

    const double lr = lr_at(opt, agent.spec.d_model, agent.step + 1);
    for (auto& p : agent.params) {
        p.value.ensure_grad();
        kernels::adam_step(p.value.data.data(), p.value.grad.data(), p.m.data(), p.v.data(),
                           p.value.numel(), agent.step + 1, lr, opt.beta1, opt.beta2, opt.eps,
                           opt.weight_decay);
    }
    ++agent.step;
    agent.zero_grads();
    return stats;
}

std::vector<int> ensemble_greedy_decode(const std::vector<const AgentModel*>& agents,
                                        const std::vector<int>& src, int max_len) {
    if (agents.empty()) throw std::invalid_argument("ensemble decode: no agents");
    const bool reversed = agents[0]->spec.reversed();
    const int vocab = agents[0]->spec.vocab_size;
    for (const AgentModel* a : agents) {
        if (a->spec.reversed() != reversed)
            throw std::invalid_argument("ensemble decode: agents must share a decode direction");
        if (a->spec.vocab_size != vocab) throw std::invalid_argument("ensemble decode: vocab mismatch");
    }
    std::vector<int> out;
    if (max_len <= 0) return out;
    std::vector<IncrementalDecoder> decs;
    decs.reserve(agents.size());
    for (const AgentModel* a : agents) decs.emplace_back(*a, src);

    std::vector<double> mean(static_cast<size_t>(vocab));
    const double inv = 1.0 / static_cast<double>(agents.size());
    int token = Vocab::kBos;
    while (true) {
        std::fill(mean.begin(), mean.end(), 0.0);
        for (auto& d : decs) {
            const std::vector<double>& p = d.step(token);
            for (int k = 0; k < vocab; ++k) mean[static_cast<size_t>(k)] += p[static_cast<size_t>(k)];
        }
        int best = 0;
        for (int k = 0; k < vocab; ++k) {
            mean[static_cast<size_t>(k)] *= inv;
            if (mean[static_cast<size_t>(k)] > mean[static_cast<size_t>(best)]) best = k;
        }
        if (best == Vocab::kEos) break;
        out.push_back(best);
        if (static_cast<int>(out.size()) >= max_len) break;
        token = best;
    }
    if (reversed) std::reverse(out.begin(), out.end());
    return out;
}

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    vocab_ = Vocab::load(cfg_.vocab_file);
    train_ = load_parallel(cfg_.train_src, cfg_.train_tgt, vocab_).pairs;
    valid_ = load_parallel(cfg_.valid_src, cfg_.valid_tgt, vocab_).pairs;
    test_ = load_parallel(cfg_.test_src, cfg_.test_tgt, vocab_).pairs;
    if (train_.empty() || valid_.empty() || test_.empty())
        throw std::runtime_error("trainer: empty corpus split");
    for (auto& a : cfg_.agents) {
        a.spec.vocab_size = vocab_.size();
        a.spec.resolve_defaults();
        a.spec.validate();
    }
}

const std::vector<SentencePair>& Trainer::pairs(const std::string& split) const {
    if (split == "train") return train_;
    if (split == "valid") return valid_;
    if (split == "test") return test_;
    throw std::invalid_argument("unknown split: " + split);
}

fs::path Trainer::agent_dir(const std::string& name) const { return cfg_.run_dir / name; }

bool Trainer::homogeneous_direction() const {
    for (const auto& a : cfg_.agents)
        if (a.spec.reversed() != cfg_.agents[0].spec.reversed()) return false;
    return true;
}

double Trainer::validation_bleu(const AgentModel& agent) const {
    std::vector<std::vector<int>> hyps(valid_.size()), refs(valid_.size());
    parallel_indexed(static_cast<int>(valid_.size()), [&](int i) {
        const auto& p = valid_[static_cast<size_t>(i)];
        hyps[static_cast<size_t>(i)] =
            greedy_decode(agent, p.src, decode_max_len(static_cast<int>(p.src.size())));
        refs[static_cast<size_t>(i)] = p.tgt;
    });
    return corpus_bleu(hyps, refs).value;
}

double Trainer::eval_agent(const AgentModel& agent, int64_t step) const {
    if (eval_hook_) return eval_hook_(agent, step);
    return validation_bleu(agent);
}

PretrainOutcome Trainer::pretrain(bool resume) {
    fs::create_directories(cfg_.run_dir);
    MetricsLog log(metrics_file(), /*truncate=*/!resume);
    BatchStream stream(train_, cfg_.batch_size, rng::derive(cfg_.seed, 0x707265ULL), true);
    PretrainOutcome out;

    for (size_t i = 0; i < cfg_.agents.size(); ++i) {
        const AgentConfig& ac = cfg_.agents[i];
        const fs::path dir = agent_dir(ac.name);
        fs::create_directories(dir);
        AgentModel agent;
        AgentTrainState state;
        if (resume && fs::exists(dir / "last.ckpt") && fs::exists(dir / "state.json")) {
            agent = load_checkpoint(dir / "last.ckpt");
            state = AgentTrainState::load(dir / "state.json");
        } else {
            agent = init_agent(ac.spec);
        }

        double nll_acc = 0.0;
        int64_t token_acc = 0;
        int64_t last_eval_step = agent.step;
        while (agent.step < cfg_.max_pretrain_steps) {
            const Batch batch = stream.at_step(agent.step);
            const AgentBatchStats st =
                nll_step(agent, static_cast<int>(i), batch, cfg_.optimizer, cfg_.seed);
            nll_acc += st.nll_sum;
            token_acc += st.tokens;
            const bool at_eval = agent.step % cfg_.eval_interval == 0 || agent.step == cfg_.max_pretrain_steps;
            if (!at_eval) continue;
            last_eval_step = agent.step;
            const double bleu = eval_agent(agent, agent.step);
            log.append({agent.step, ac.name, token_acc ? nll_acc / static_cast<double>(token_acc) : 0.0,
                        0.0, 0.0, bleu});
            nll_acc = 0.0;
            token_acc = 0;
            save_checkpoint(dir / ("step_" + std::to_string(agent.step) + ".ckpt"), agent);
            save_checkpoint(dir / "last.ckpt", agent);
            if (bleu > state.best_bleu) {
                state.best_bleu = bleu;
                state.best_step = agent.step;
                state.evals_since_improve = 0;
                save_checkpoint(dir / "best.ckpt", agent);
            } else {
                ++state.evals_since_improve;
            }
            state.save(dir / "state.json");
            if (state.evals_since_improve >= cfg_.patience) break;
        }
        if (state.best_bleu < 0.0 || last_eval_step != agent.step) {
            // Final off-interval evaluation so short runs still report a score.
            const double bleu = eval_agent(agent, agent.step);
            log.append({agent.step, ac.name, token_acc ? nll_acc / static_cast<double>(token_acc) : 0.0,
                        0.0, 0.0, bleu});
            save_checkpoint(dir / ("step_" + std::to_string(agent.step) + ".ckpt"), agent);
            save_checkpoint(dir / "last.ckpt", agent);
            if (bleu > state.best_bleu) {
                state.best_bleu = bleu;
                state.best_step = agent.step;
                state.evals_since_improve = 0;
                save_checkpoint(dir / "best.ckpt", agent);
            }
            state.save(dir / "state.json");
        }
        out.agents.push_back(load_checkpoint(dir / "best.ckpt"));
        out.valid_bleu.push_back(state.best_bleu);
    }
    return out;
}

void Trainer::joint_train(std::vector<AgentModel>& agents, const LambdaSchedule& schedule_in) {
    if (agents.size() != cfg_.agents.size())
        throw std::invalid_argument("joint_train: agent count does not match config");
    LambdaSchedule schedule = schedule_in;
    if (cfg_.lambda_override) schedule.lambdas.assign(agents.size(), *cfg_.lambda_override);
    if (schedule.lambdas.size() != agents.size())
        throw std::invalid_argument("joint_train: lambda count does not match agents");
    for (double l : schedule.lambdas)
        if (l < 0.0 || l > 1.0) throw std::invalid_argument("joint_train: lambda out of [0,1]");

    const int n_agents = static_cast<int>(agents.size());
    bool need_ensemble = false;
    for (double l : schedule.lambdas) need_ensemble |= l < 1.0;
    if (cfg_.generation_mode == GenerationMode::Free && !homogeneous_direction())
        throw std::invalid_argument("joint_train: free generation mode requires one decode direction");

    MetricsLog log(metrics_file(), /*truncate=*/false);
    BatchStream stream(train_, cfg_.batch_size, rng::derive(cfg_.seed, 0x6a6f696eULL), true);
    std::vector<AgentBatchStats> since(static_cast<size_t>(n_agents));
    std::vector<AgentTrainState> best(static_cast<size_t>(n_agents));

    for (int64_t j = 0; j < cfg_.max_joint_steps; ++j) {
        const Batch batch = stream.at_step(j);
        std::vector<EnsembleDist> q;
        std::vector<std::vector<int>> y_t;
        std::vector<std::vector<std::vector<int>>> self_seq;
        JointContext ctx;
        if (need_ensemble) {
            std::vector<std::vector<StepDistributions>> dists(
                static_cast<size_t>(batch.size), std::vector<StepDistributions>(static_cast<size_t>(n_agents)));
            self_seq.assign(static_cast<size_t>(n_agents),
                            std::vector<std::vector<int>>(static_cast<size_t>(batch.size)));
            // Teacher-forced eval rows for the ensemble; the encoder output is
            // reused by each agent's own free-running decode for the gate.
            parallel_indexed(batch.size * n_agents, [&](int idx) {
                const int s = idx / n_agents;
                const int a = idx % n_agents;
                const std::vector<int> src = batch.src_row(s);
                EvalForward fwd =
                    forward_teacher_forced_cached(agents[static_cast<size_t>(a)], src, batch.tgt_row(s));
                dists[static_cast<size_t>(s)][static_cast<size_t>(a)] = std::move(fwd.dists);
                if (schedule.lambdas[static_cast<size_t>(a)] < 1.0)
                    self_seq[static_cast<size_t>(a)][static_cast<size_t>(s)] =
                        greedy_decode_cached(agents[static_cast<size_t>(a)], std::move(fwd.enc_out),
                                             decode_max_len(static_cast<int>(src.size())));
            });
            q.resize(static_cast<size_t>(batch.size));
            y_t.resize(static_cast<size_t>(batch.size));
            parallel_indexed(batch.size, [&](int s) {
                q[static_cast<size_t>(s)] = ensemble(dists[static_cast<size_t>(s)]);
                if (cfg_.generation_mode == GenerationMode::Forced) {
                    y_t[static_cast<size_t>(s)] = argmax_sequence(q[static_cast<size_t>(s)].probs);
                } else {
                    std::vector<const AgentModel*> ptrs;
                    for (const auto& a : agents) ptrs.push_back(&a);
                    const std::vector<int> src = batch.src_row(s);
                    y_t[static_cast<size_t>(s)] =
                        ensemble_greedy_decode(ptrs, src, decode_max_len(static_cast<int>(src.size())));
                }
            });
            ctx.q = &q;
            ctx.ensemble_seq = &y_t;
            ctx.self_seq = &self_seq;
        }

        parallel_indexed(n_agents, [&](int i) {
            const AgentBatchStats st =
                train_agent_batch(agents[static_cast<size_t>(i)], i, batch, schedule.lambdas[static_cast<size_t>(i)],
                                  need_ensemble ? &ctx : nullptr, cfg_.optimizer, cfg_.seed);
            auto& acc = since[static_cast<size_t>(i)];
            acc.nll_sum += st.nll_sum;
            acc.kd_sum += st.kd_sum;
            acc.tokens += st.tokens;
            acc.gate_ensemble += st.gate_ensemble;
            acc.gate_total += st.gate_total;
        });

        if ((j + 1) % cfg_.eval_interval == 0 || j + 1 == cfg_.max_joint_steps) {
            for (int i = 0; i < n_agents; ++i) {
                AgentModel& agent = agents[static_cast<size_t>(i)];
                const auto& acc = since[static_cast<size_t>(i)];
                const double bleu = eval_agent(agent, agent.step);
                log.append({agent.step, cfg_.agents[static_cast<size_t>(i)].name,
                            acc.tokens ? acc.nll_sum / static_cast<double>(acc.tokens) : 0.0,
                            acc.tokens ? acc.kd_sum / static_cast<double>(acc.tokens) : 0.0,
                            acc.gate_total ? static_cast<double>(acc.gate_ensemble) / acc.gate_total : 0.0,
                            bleu});
                const fs::path dir = agent_dir(cfg_.agents[static_cast<size_t>(i)].name);
                fs::create_directories(dir);
                save_checkpoint(dir / ("step_" + std::to_string(agent.step) + ".ckpt"), agent);
                save_checkpoint(dir / "last.ckpt", agent);
                auto& b = best[static_cast<size_t>(i)];
                if (bleu > b.best_bleu) {
                    b.best_bleu = bleu;
                    b.best_step = agent.step;
                    save_checkpoint(dir / "best.ckpt", agent);
                }
                since[static_cast<size_t>(i)] = AgentBatchStats{};
            }
        }
    }
}

void Trainer::continued_nll_train(std::vector<AgentModel>& agents, int64_t steps) {
    BatchStream stream(train_, cfg_.batch_size, rng::derive(cfg_.seed, 0x6a6f696eULL), true);
    for (int64_t j = 0; j < steps; ++j) {
        const Batch batch = stream.at_step(j);
        parallel_indexed(static_cast<int>(agents.size()), [&](int i) {
            nll_step(agents[static_cast<size_t>(i)], i, batch, cfg_.optimizer, cfg_.seed);
        });
    }
}

Trainer::Report Trainer::evaluate(const std::vector<AgentModel>& agents, const std::string& split,
                                  bool with_ensemble) const {
    const auto& corpus = pairs(split);
    Report report;
    std::vector<std::vector<int>> refs(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) refs[i] = corpus[i].tgt;

    for (size_t a = 0; a < agents.size(); ++a) {
        std::vector<std::vector<int>> hyps(corpus.size());
        parallel_indexed(static_cast<int>(corpus.size()), [&](int i) {
            const auto& p = corpus[static_cast<size_t>(i)];
            hyps[static_cast<size_t>(i)] =
                greedy_decode(agents[a], p.src, decode_max_len(static_cast<int>(p.src.size())));
        });
        report.names.push_back(a < cfg_.agents.size() ? cfg_.agents[a].name
                                                      : "agent" + std::to_string(a));
        report.bleu.push_back(corpus_bleu(hyps, refs).value);
    }
    if (with_ensemble) {
        std::vector<const AgentModel*> ptrs;
        for (const auto& a : agents) ptrs.push_back(&a);
        std::vector<std::vector<int>> hyps(corpus.size());
        parallel_indexed(static_cast<int>(corpus.size()), [&](int i) {
            const auto& p = corpus[static_cast<size_t>(i)];
            hyps[static_cast<size_t>(i)] =
                ensemble_greedy_decode(ptrs, p.src, decode_max_len(static_cast<int>(p.src.size())));
        });
        report.ensemble_bleu = corpus_bleu(hyps, refs).value;
    }
    return report;
}

}  // namespace magent
