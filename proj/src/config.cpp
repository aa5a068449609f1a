// SPDX-License-Identifier: Apache-2.0
#include "magent/config.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace magent {

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
}

AgentSpec spec_from_json(const json& j) {
    AgentSpec s;
    s.variant = parse_variant(j.at("variant").get<std::string>());
    s.seed = j.at("seed").get<uint64_t>();
    if (j.contains("d_model")) s.d_model = j["d_model"].get<int>();
    if (j.contains("n_heads")) s.n_heads = j["n_heads"].get<int>();
    if (j.contains("ffn_dim")) s.ffn_dim = j["ffn_dim"].get<int>();
    if (j.contains("enc_layers")) s.enc_layers = j["enc_layers"].get<int>();
    if (j.contains("dec_layers")) s.dec_layers = j["dec_layers"].get<int>();
    if (j.contains("rel_clip")) s.rel_clip = j["rel_clip"].get<int>();
    if (j.contains("dropout")) s.dropout = j["dropout"].get<double>();
    s.resolve_defaults();
    return s;
}

json spec_to_json(const AgentSpec& s) {
    json j;
    j["variant"] = variant_name(s.variant);
    j["seed"] = s.seed;
    j["d_model"] = s.d_model;
    j["n_heads"] = s.n_heads;
    j["ffn_dim"] = s.ffn_dim;
    j["enc_layers"] = s.enc_layers;
    j["dec_layers"] = s.dec_layers;
    j["rel_clip"] = s.rel_clip;
    j["dropout"] = s.dropout;
    return j;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

TrainConfig load_train_config(const fs::path& file, const fs::path& workdir) {
    std::ifstream in(file);
    if (!in) throw std::invalid_argument("cannot open config file: " + file.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config parse error in " + file.string() + ": " + e.what());
    }
    TrainConfig cfg;
    try {
        cfg.seed = j.value("seed", static_cast<uint64_t>(7));
        cfg.run_dir = resolve(workdir, j.value("run_dir", std::string("run")));

        const json& data = j.at("data");
        cfg.vocab_file = resolve(workdir, data.at("vocab").get<std::string>());
        cfg.train_src = resolve(workdir, data.at("train_src").get<std::string>());
        cfg.train_tgt = resolve(workdir, data.at("train_tgt").get<std::string>());
        cfg.valid_src = resolve(workdir, data.at("valid_src").get<std::string>());
        cfg.valid_tgt = resolve(workdir, data.at("valid_tgt").get<std::string>());
        cfg.test_src = resolve(workdir, data.at("test_src").get<std::string>());
        cfg.test_tgt = resolve(workdir, data.at("test_tgt").get<std::string>());

        for (const json& a : j.at("agents")) {
            AgentConfig ac;
            ac.spec = spec_from_json(a);
            ac.name = a.value("name", variant_name(ac.spec.variant) + "_" + std::to_string(cfg.agents.size()));
            cfg.agents.push_back(std::move(ac));
        }

        if (j.contains("optimizer")) {
            const json& o = j["optimizer"];
            cfg.optimizer.lr_factor = o.value("lr_factor", cfg.optimizer.lr_factor);
            cfg.optimizer.warmup_steps = o.value("warmup_steps", cfg.optimizer.warmup_steps);
            cfg.optimizer.beta1 = o.value("beta1", cfg.optimizer.beta1);
            cfg.optimizer.beta2 = o.value("beta2", cfg.optimizer.beta2);
            cfg.optimizer.eps = o.value("eps", cfg.optimizer.eps);
            cfg.optimizer.weight_decay = o.value("weight_decay", cfg.optimizer.weight_decay);
        }
        if (j.contains("schedule")) {
            const json& s = j["schedule"];
            cfg.batch_size = s.value("batch_size", cfg.batch_size);
            cfg.max_pretrain_steps = s.value("max_pretrain_steps", cfg.max_pretrain_steps);
            cfg.max_joint_steps = s.value("max_joint_steps", cfg.max_joint_steps);
            cfg.eval_interval = s.value("eval_interval", cfg.eval_interval);
            cfg.patience = s.value("patience", cfg.patience);
            if (s.contains("generation_mode")) {
                const std::string m = s["generation_mode"].get<std::string>();
                if (m == "forced")
                    cfg.generation_mode = GenerationMode::Forced;
                else if (m == "free")
                    cfg.generation_mode = GenerationMode::Free;
                else
                    throw std::invalid_argument("generation_mode must be forced or free");
            }
            if (s.contains("lambda_override") && !s["lambda_override"].is_null())
                cfg.lambda_override = s["lambda_override"].get<double>();
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument("config error in " + file.string() + ": " + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string train_config_json(const TrainConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["run_dir"] = cfg.run_dir.string();
    j["data"] = {{"vocab", cfg.vocab_file.string()},   {"train_src", cfg.train_src.string()},
                 {"train_tgt", cfg.train_tgt.string()}, {"valid_src", cfg.valid_src.string()},
                 {"valid_tgt", cfg.valid_tgt.string()}, {"test_src", cfg.test_src.string()},
                 {"test_tgt", cfg.test_tgt.string()}};
    j["agents"] = json::array();
    for (const auto& a : cfg.agents) {
        json aj = spec_to_json(a.spec);
        aj["name"] = a.name;
        j["agents"].push_back(aj);
    }
    j["optimizer"] = {{"lr_factor", cfg.optimizer.lr_factor}, {"warmup_steps", cfg.optimizer.warmup_steps},
                      {"beta1", cfg.optimizer.beta1},         {"beta2", cfg.optimizer.beta2},
                      {"eps", cfg.optimizer.eps},             {"weight_decay", cfg.optimizer.weight_decay}};
    j["schedule"] = {{"batch_size", cfg.batch_size},
                     {"max_pretrain_steps", cfg.max_pretrain_steps},
                     {"max_joint_steps", cfg.max_joint_steps},
                     {"eval_interval", cfg.eval_interval},
                     {"patience", cfg.patience},
                     {"generation_mode", cfg.generation_mode == GenerationMode::Free ? "free" : "forced"}};
    if (cfg.lambda_override)
        j["schedule"]["lambda_override"] = *cfg.lambda_override;
    else
        j["schedule"]["lambda_override"] = nullptr;
    return j.dump(2);
}

uint64_t fnv1a_file(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot digest file: " + file.string());
    uint64_t h = 0xCBF29CE484222325ULL;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ULL;
        }
        if (!in) break;
    }
    return h;
}

void write_manifest(const fs::path& run_dir, const TrainConfig& cfg, const std::vector<fs::path>& inputs) {
    fs::create_directories(run_dir);
    json j;
    j["artifact"] = std::string("magent ") + kVersion;
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char ts[32];
    std::strftime(ts, sizeof(ts), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    j["created"] = ts;
    j["config"] = json::parse(train_config_json(cfg));
    json digests = json::object();
    for (const auto& p : inputs) {
        char hex[20];
        std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a_file(p)));
        digests[p.string()] = hex;
    }
    j["inputs"] = digests;
    std::ofstream out(run_dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + run_dir.string());
    out << j.dump(2) << "\n";
}

void KvRecord::set(const std::string& key, const std::string& value) {
    for (auto& e : entries_)
        if (e.first == key) {
            e.second = value;
            return;
        }
    entries_.emplace_back(key, value);
}

void KvRecord::set_double(const std::string& key, double value) { set(key, format_double(value)); }

const std::string& KvRecord::get(const std::string& key) const {
    for (const auto& e : entries_)
        if (e.first == key) return e.second;
    throw std::out_of_range("missing key: " + key);
}

double KvRecord::get_double(const std::string& key) const { return std::stod(get(key)); }

bool KvRecord::has(const std::string& key) const {
    for (const auto& e : entries_)
        if (e.first == key) return true;
    return false;
}

std::string KvRecord::to_string() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
    return out;
}

void KvRecord::write(const fs::path& file) const {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << to_string();
}

KvRecord KvRecord::read(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot read " + file.string());
    KvRecord r;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw std::runtime_error("malformed record line: " + line);
        r.entries_.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return r;
}

void write_lambda_file(const fs::path& file, const std::vector<std::string>& names,
                       const LambdaSchedule& schedule) {
    KvRecord r;
    r.set("agents", std::to_string(schedule.lambdas.size()));
    r.set_double("b_avg", schedule.bleu_avg);
    for (size_t i = 0; i < schedule.lambdas.size(); ++i) {
        const std::string p = "agent." + std::to_string(i) + ".";
        r.set(p + "name", names[i]);
        r.set_double(p + "bleu", schedule.bleu[i]);
        r.set_double(p + "lambda", schedule.lambdas[i]);
    }
    r.write(file);
}

LambdaSchedule read_lambda_file(const fs::path& file, std::vector<std::string>* names) {
    const KvRecord r = KvRecord::read(file);
    LambdaSchedule s;
    const int n = std::stoi(r.get("agents"));
    s.bleu_avg = r.get_double("b_avg");
    for (int i = 0; i < n; ++i) {
        const std::string p = "agent." + std::to_string(i) + ".";
        if (names) names->push_back(r.get(p + "name"));
        s.bleu.push_back(r.get_double(p + "bleu"));
        s.lambdas.push_back(r.get_double(p + "lambda"));
    }
    return s;
}

}  // namespace magent
