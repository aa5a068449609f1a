// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "magent/trainer.hpp"

namespace magent {

inline constexpr const char* kVersion = "0.1.0";

// Loads a JSON train config. Relative paths inside the file resolve against
// `workdir`.
TrainConfig load_train_config(const std::filesystem::path& file, const std::filesystem::path& workdir);
std::string train_config_json(const TrainConfig& cfg);

uint64_t fnv1a_file(const std::filesystem::path& file);

// Run manifest: resolved config, artifact version, timestamps and input
// digests. Written before training starts.
void write_manifest(const std::filesystem::path& run_dir, const TrainConfig& cfg,
                    const std::vector<std::filesystem::path>& inputs);

// Line-oriented key=value records (reports, lambda files).
class KvRecord {
public:
    void set(const std::string& key, const std::string& value);
    void set_double(const std::string& key, double value);
    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool has(const std::string& key) const;
    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    void write(const std::filesystem::path& file) const;
    std::string to_string() const;
    static KvRecord read(const std::filesystem::path& file);

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

void write_lambda_file(const std::filesystem::path& file, const std::vector<std::string>& names,
                       const LambdaSchedule& schedule);
LambdaSchedule read_lambda_file(const std::filesystem::path& file, std::vector<std::string>* names);

}  // namespace magent
