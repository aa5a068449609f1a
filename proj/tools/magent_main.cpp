// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: gen-data, pretrain, train-multi, evaluate, decode.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "magent/bleu.hpp"
#include "magent/checkpoint.hpp"
#include "magent/config.hpp"
#include "magent/data.hpp"
#include "magent/distill.hpp"
#include "magent/model.hpp"
#include "magent/trainer.hpp"

namespace fs = std::filesystem;
using namespace magent;

namespace {

fs::path resolve(const fs::path& workdir, const fs::path& p) {
    return p.is_absolute() ? p : workdir / p;
}

void apply_seed_env(TrainConfig& cfg) {
    if (const char* env = std::getenv("AGENTS_SEED")) cfg.seed = std::strtoull(env, nullptr, 10);
}

void write_command_manifest(const fs::path& path, const std::string& command, const nlohmann::json& args,
                            const std::vector<fs::path>& inputs) {
    nlohmann::json j;
    j["artifact"] = std::string("magent ") + kVersion;
    const std::time_t tt = std::time(nullptr);
    char ts[32];
    std::strftime(ts, sizeof(ts), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    j["created"] = ts;
    j["command"] = command;
    j["args"] = args;
    nlohmann::json digests = nlohmann::json::object();
    for (const auto& p : inputs) {
        char hex[20];
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a_file(p)));
        digests[p.string()] = hex;
    }
    j["inputs"] = digests;
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
    out << j.dump(2) << "\n";
}

int cmd_gen_data(const fs::path& workdir, const std::string& task, int pairs, uint64_t seed,
                 int vocab_size, int min_len, int max_len, double ambiguous_fraction,
                 const std::string& out_dir) {
    GenConfig cfg;
    cfg.task = parse_task(task);
    cfg.n_pairs = pairs;
    cfg.seed = seed;
    cfg.vocab_size = vocab_size;
    cfg.min_len = min_len;
    cfg.max_len = max_len;
    cfg.ambiguous_fraction = ambiguous_fraction;
    const fs::path dir = resolve(workdir, out_dir);
    const CorpusFiles files = gen_corpus(cfg, dir);
    nlohmann::json args = {{"task", task},       {"pairs", pairs},     {"seed", seed},
                           {"vocab_size", vocab_size}, {"min_len", min_len}, {"max_len", max_len},
                           {"ambiguous_fraction", ambiguous_fraction}, {"out", dir.string()}};
    write_command_manifest(dir / "manifest.json", "gen-data", args, {});
    std::cout << "wrote corpus (" << task << ", " << pairs << " pairs) to " << dir.string() << "\n";
    return 0;
}

std::vector<AgentModel> load_run_agents(const TrainConfig& cfg, const std::string& kind) {
    std::vector<AgentModel> agents;
    for (const auto& a : cfg.agents) {
        const fs::path ckpt = cfg.run_dir / a.name / (kind + ".ckpt");
        if (!fs::exists(ckpt))
            throw std::runtime_error("missing checkpoint " + ckpt.string() + " (run pretrain first)");
        agents.push_back(load_checkpoint(ckpt));
    }
    return agents;
}

int cmd_pretrain(const fs::path& workdir, const std::string& config_file, bool resume) {
    TrainConfig cfg = load_train_config(resolve(workdir, config_file), workdir);
    apply_seed_env(cfg);
    write_manifest(cfg.run_dir, cfg,
                   {cfg.vocab_file, cfg.train_src, cfg.train_tgt, cfg.valid_src, cfg.valid_tgt,
                    cfg.test_src, cfg.test_tgt});
    Trainer trainer(cfg);
    PretrainOutcome out = trainer.pretrain(resume);
    const LambdaSchedule schedule = lambda_schedule(out.valid_bleu);
    std::vector<std::string> names;
    for (const auto& a : cfg.agents) names.push_back(a.name);
    write_lambda_file(cfg.run_dir / "lambda.kv", names, schedule);
    std::cout << "pretrain complete; validation BLEU per agent:\n";
    for (size_t i = 0; i < names.size(); ++i)
        std::cout << "  " << names[i] << "\tB=" << out.valid_bleu[i] << "\tlambda="
                  << schedule.lambdas[i] << "\n";
    return 0;
}

int cmd_train_multi(const fs::path& workdir, const std::string& config_file,
                    std::optional<double> lambda_override, const std::string& lambda_file) {
    TrainConfig cfg = load_train_config(resolve(workdir, config_file), workdir);
    apply_seed_env(cfg);
    if (lambda_override) cfg.lambda_override = lambda_override;
    const fs::path lf = lambda_file.empty() ? cfg.run_dir / "lambda.kv" : resolve(workdir, lambda_file);
    LambdaSchedule schedule;
    if (fs::exists(lf)) {
        schedule = read_lambda_file(lf, nullptr);
    } else if (cfg.lambda_override) {
        schedule.lambdas.assign(cfg.agents.size(), *cfg.lambda_override);
        schedule.bleu.assign(cfg.agents.size(), 0.0);
    } else {
        throw std::runtime_error("missing lambda file " + lf.string() + " (run pretrain first)");
    }
    std::vector<AgentModel> agents = load_run_agents(cfg, "best");
    write_manifest(cfg.run_dir, cfg,
                   {cfg.vocab_file, cfg.train_src, cfg.train_tgt, cfg.valid_src, cfg.valid_tgt,
                    cfg.test_src, cfg.test_tgt});
    Trainer trainer(cfg);
    trainer.joint_train(agents, schedule);
    Trainer::Report report = trainer.evaluate(agents, "test", false);
    std::cout << "joint training complete; test BLEU per agent:\n";
    for (size_t i = 0; i < report.names.size(); ++i)
        std::cout << "  " << report.names[i] << "\t" << report.bleu[i] << "\n";
    return 0;
}

int cmd_evaluate(const fs::path& workdir, const std::string& config_file, const std::string& split,
                 bool with_ensemble, const std::string& baseline, const std::string& out_file,
                 const std::string& kind) {
    TrainConfig cfg = load_train_config(resolve(workdir, config_file), workdir);
    apply_seed_env(cfg);
    std::vector<AgentModel> agents = load_run_agents(cfg, kind);
    Trainer trainer(cfg);
    Trainer::Report report = trainer.evaluate(agents, split, with_ensemble);

    KvRecord r;
    r.set("command", "evaluate");
    r.set("split", split);
    r.set("checkpoint", kind);
    r.set("agents", std::to_string(report.names.size()));
    std::optional<KvRecord> base;
    if (!baseline.empty()) base = KvRecord::read(resolve(workdir, baseline));
    for (size_t i = 0; i < report.names.size(); ++i) {
        const std::string p = "agent." + std::to_string(i) + ".";
        r.set(p + "name", report.names[i]);
        r.set_double(p + "bleu", report.bleu[i]);
        if (base) {
            double base_bleu = 0.0;
            bool found = false;
            const int n = std::stoi(base->get("agents"));
            for (int k = 0; k < n; ++k) {
                const std::string bp = "agent." + std::to_string(k) + ".";
                if (base->get(bp + "name") == report.names[i]) {
                    base_bleu = base->get_double(bp + "bleu");
                    found = true;
                    break;
                }
            }
            if (!found) throw std::runtime_error("baseline report lacks agent " + report.names[i]);
            r.set_double(p + "delta", report.bleu[i] - base_bleu);
        }
    }
    if (with_ensemble) r.set_double("ensemble.bleu", report.ensemble_bleu);

    const fs::path out = resolve(workdir, out_file);
    fs::create_directories(out.parent_path().empty() ? "." : out.parent_path());
    r.write(out);
    std::cout << r.to_string();
    return 0;
}

int cmd_decode(const fs::path& workdir, const std::string& ckpt, const std::string& vocab_file,
               const std::string& src_file, const std::string& out_file, int max_len) {
    const AgentModel agent = load_checkpoint(resolve(workdir, ckpt));
    const Vocab vocab = Vocab::load(resolve(workdir, vocab_file));
    if (vocab.size() != agent.spec.vocab_size)
        throw std::runtime_error("vocab size does not match checkpoint");
    std::ifstream in(resolve(workdir, src_file));
    if (!in) throw std::runtime_error("cannot open source file: " + src_file);
    std::vector<std::vector<int>> sources;
    std::string line;
    while (std::getline(in, line)) sources.push_back(vocab.encode_line(line));

    std::vector<std::string> outputs(sources.size());
    std::string error;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < static_cast<int>(sources.size()); ++i) {
        try {
            const auto& src = sources[static_cast<size_t>(i)];
            if (src.empty()) {
                outputs[static_cast<size_t>(i)] = "";
                continue;
            }
            const int limit = max_len > 0 ? max_len : decode_max_len(static_cast<int>(src.size()));
            outputs[static_cast<size_t>(i)] = vocab.decode(greedy_decode(agent, src, limit));
        } catch (const std::exception& e) {
#pragma omp critical
            if (error.empty()) error = e.what();
        }
    }
    if (!error.empty()) throw std::runtime_error(error);

    const fs::path out_path = resolve(workdir, out_file);
    fs::create_directories(out_path.parent_path().empty() ? "." : out_path.parent_path());
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write output file: " + out_file);
    for (const auto& s : outputs) out << s << "\n";
    std::cout << "decoded " << sources.size() << " lines -> " << out_path.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-agent seq2seq training with BLEU-gated ensemble distillation"};
    app.require_subcommand(1);
    std::string workdir = ".";
    app.add_option("--workdir", workdir, "directory against which relative paths resolve");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic parallel corpus");
    std::string task = "ambiguous_rewrite", out_dir;
    int pairs = 5000, vocab_size = 64, min_len = 5, max_len = 20;
    uint64_t gen_seed = 7;
    double ambiguous_fraction = 0.1;
    gen->add_option("--task", task, "copy|reverse|cipher|ambiguous_rewrite");
    gen->add_option("--pairs", pairs, "number of sentence pairs");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--vocab-size", vocab_size, "vocabulary size incl. reserved tokens");
    gen->add_option("--min-len", min_len, "minimum sentence length");
    gen->add_option("--max-len", max_len, "maximum sentence length");
    gen->add_option("--ambiguous-fraction", ambiguous_fraction, "fraction of ambiguous tokens");
    gen->add_option("--out", out_dir, "output directory")->required();

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "pre-train each agent independently");
    std::string pre_config;
    bool resume = false;
    pre->add_option("--config", pre_config, "train config JSON")->required();
    pre->add_flag("--resume", resume, "continue from the last checkpoints");

    // train-multi
    auto* multi = app.add_subcommand("train-multi", "joint multi-agent training");
    std::string multi_config, lambda_file;
    double lambda_override = -1.0;
    multi->add_option("--config", multi_config, "train config JSON")->required();
    multi->add_option("--lambda-override", lambda_override, "use this lambda for every agent");
    multi->add_option("--lambda-file", lambda_file, "lambda schedule file (default <run>/lambda.kv)");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "corpus BLEU report for trained agents");
    std::string ev_config, split = "test", baseline, report_out = "report.kv", ckpt_kind = "best";
    bool with_ensemble = false;
    ev->add_option("--config", ev_config, "train config JSON")->required();
    ev->add_option("--split", split, "train|valid|test");
    ev->add_flag("--ensemble", with_ensemble, "also decode the averaged ensemble");
    ev->add_option("--baseline", baseline, "baseline report for per-agent deltas");
    ev->add_option("--out", report_out, "report output path");
    ev->add_option("--checkpoint-kind", ckpt_kind, "best|last");

    // decode
    auto* dec = app.add_subcommand("decode", "greedy-decode a source file");
    std::string dec_ckpt, dec_vocab, dec_src, dec_out;
    int dec_max_len = 0;
    dec->add_option("--checkpoint", dec_ckpt, "agent checkpoint")->required();
    dec->add_option("--vocab", dec_vocab, "vocabulary file")->required();
    dec->add_option("--src", dec_src, "source text file")->required();
    dec->add_option("--out", dec_out, "output text file")->required();
    dec->add_option("--max-len", dec_max_len, "decode length cap (default 2*src+4)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const fs::path wd(workdir);
        if (gen->parsed())
            return cmd_gen_data(wd, task, pairs, gen_seed, vocab_size, min_len, max_len,
                                ambiguous_fraction, out_dir);
        if (pre->parsed()) return cmd_pretrain(wd, pre_config, resume);
        if (multi->parsed())
            return cmd_train_multi(wd, multi_config,
                                   lambda_override >= 0.0 ? std::optional<double>(lambda_override)
                                                          : std::nullopt,
                                   lambda_file);
        if (ev->parsed())
            return cmd_evaluate(wd, ev_config, split, with_ensemble, baseline, report_out, ckpt_kind);
        if (dec->parsed()) return cmd_decode(wd, dec_ckpt, dec_vocab, dec_src, dec_out, dec_max_len);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
