// SPDX-License-Identifier: Apache-2.0
#include "magent/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace magent {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'G', 'T'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_tensor(std::ostream& out, const std::string& name, const std::vector<int>& shape,
                  const std::vector<double>& data) {
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<uint32_t>(shape.size()));
    for (int d : shape) write_u32(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
}

struct RawTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;
};

RawTensor read_tensor(std::istream& in) {
    RawTensor t;
    const uint32_t name_len = read_u32(in);
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    const uint32_t rank = read_u32(in);
    t.shape.resize(rank);
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        t.shape[i] = static_cast<int>(read_u32(in));
        n *= t.shape[i];
    }
    t.data.resize(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor table");
    return t;
}

}  // namespace

void save_checkpoint(const fs::path& path, const AgentModel& agent) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    const std::string spec = agent.spec.to_json();
    write_u32(out, static_cast<uint32_t>(spec.size()));
    out.write(spec.data(), static_cast<std::streamsize>(spec.size()));
    write_u64(out, static_cast<uint64_t>(agent.step));
    write_u32(out, static_cast<uint32_t>(agent.params.size() * 3));
    for (const auto& p : agent.params) {
        for (double v : p.value.data)
            if (!std::isfinite(v)) throw std::runtime_error("checkpoint: non-finite parameter " + p.name);
        write_tensor(out, p.name, p.value.shape, p.value.data);
        write_tensor(out, "opt.m." + p.name, p.value.shape, p.m);
        write_tensor(out, "opt.v." + p.name, p.value.shape, p.v);
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

AgentModel load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("not a checkpoint file: " + path.string());
    const uint32_t version = read_u32(in);
    if (version != kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const uint32_t spec_len = read_u32(in);
    std::string spec_json(spec_len, '\0');
    in.read(spec_json.data(), spec_len);
    const uint64_t step = read_u64(in);
    const uint32_t count = read_u32(in);
    if (!in) throw std::runtime_error("checkpoint: truncated header");

    AgentModel agent = init_agent(AgentSpec::from_json(spec_json));
    agent.step = static_cast<int64_t>(step);
    uint32_t loaded = 0;
    for (uint32_t i = 0; i < count; ++i) {
        RawTensor t = read_tensor(in);
        std::vector<double>* dst = nullptr;
        std::string base = t.name;
        if (base.rfind("opt.m.", 0) == 0) {
            dst = &agent.param(base.substr(6)).m;
            base = base.substr(6);
        } else if (base.rfind("opt.v.", 0) == 0) {
            dst = &agent.param(base.substr(6)).v;
            base = base.substr(6);
        } else {
            dst = &agent.param(base).value.data;
        }
        if (agent.p(base).shape != t.shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + t.name);
        *dst = std::move(t.data);
        ++loaded;
    }
    if (loaded != agent.params.size() * 3)
        throw std::runtime_error("checkpoint: tensor count mismatch in " + path.string());
    return agent;
}

}  // namespace magent
