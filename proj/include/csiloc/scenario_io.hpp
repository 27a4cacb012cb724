#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "csiloc/channel_sim.hpp"

namespace csiloc {

// Throws ConfigError unless j is an object whose keys all appear in allowed.
void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where);

// Scenario files are JSON objects; see docs/scenario_schema.md. Unknown keys
// are rejected with a ConfigError naming the key.
ScenarioConfig scenario_from_json(const nlohmann::json& j);
nlohmann::json scenario_to_json(const ScenarioConfig& cfg);

// Digest of the canonical (sorted-key, compact) JSON form.
std::uint64_t scenario_digest(const ScenarioConfig& cfg);

ScenarioConfig load_scenario_file(const std::filesystem::path& path);

// Shipped presets: scen1, scen1_obstacle, scen2, scen3 (plus "tiny" for tests).
ScenarioConfig preset_scenario(const std::string& name);
bool is_preset(const std::string& name);

// Preset name or path to a scenario file.
ScenarioConfig resolve_scenario(const std::string& ref, const std::filesystem::path& base_dir = {});

// Binary dataset container.
//   header: magic "CSILDS01", u32 version, u64 config digest, u32 config length,
//           config JSON bytes, i32 samples_per_rp, i32 sample_offset,
//           u32 n_ap, n_ap x (i32 n_rx, i32 n_tx, i32 K, i32 bandwidth_mhz),
//           u64 record count
//   record: i32 ap, i32 rp, i32 sample, f64 x, f64 y,
//           n_rx*n_tx*K interleaved (re, im) f64
// All values little-endian.
void write_dataset(const Dataset& ds, const std::filesystem::path& path);

// Throws DigestMismatch when the embedded config does not hash to the
// stored digest, or (if expected_digest != 0) differs from the caller's.
Dataset read_dataset(const std::filesystem::path& path, std::uint64_t expected_digest = 0);

}  // namespace csiloc
