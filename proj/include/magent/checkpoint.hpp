// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "magent/model.hpp"

namespace magent {

// Binary agent checkpoint. Layout:
//   magic "MAGT" | u32 format version | u32 spec length | spec JSON
//   | u64 step | u32 tensor count
//   | per tensor: u32 name length | name | u32 rank | u32 dims[] | f64 data (LE)
// Parameter values plus Adam moments (opt.m.*, opt.v.*) round-trip bit-exact.
void save_checkpoint(const std::filesystem::path& path, const AgentModel& agent);
AgentModel load_checkpoint(const std::filesystem::path& path);

}  // namespace magent
