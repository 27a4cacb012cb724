#include "csiloc/scenario_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace csiloc {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

namespace {

Vec2 vec2_from(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2) throw ConfigError(where + ": expected [x, y]");
  return {j[0].get<Scalar>(), j[1].get<Scalar>()};
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ScenarioConfig scenario_from_json(const json& j) {
  static const std::set<std::string> keys = {
      "name", "room_extent", "aps", "rp_spacing", "n_rx", "rx_antenna_spacing", "center_freq_hz", "height_offset",
      "paths_per_link", "los_present", "noise_std", "phase_error", "reflection_gain", "attenuation_jitter",
      "obstacle", "seed", "realization"};
  reject_unknown(j, keys, "scenario");
  ScenarioConfig c;
  try {
    read_opt(j, "name", c.name);
    if (j.contains("room_extent")) c.room_extent = vec2_from(j["room_extent"], "room_extent");
    if (!j.contains("aps")) throw ConfigError("scenario: missing 'aps'");
    for (const auto& a : j["aps"]) {
      reject_unknown(a, {"position", "n_tx", "bandwidth_mhz", "antenna_spacing"}, "ap");
      ApConfig ap;
      if (!a.contains("position")) throw ConfigError("ap: missing 'position'");
      ap.position = vec2_from(a["position"], "ap.position");
      read_opt(a, "n_tx", ap.n_tx);
      read_opt(a, "bandwidth_mhz", ap.bandwidth_mhz);
      read_opt(a, "antenna_spacing", ap.antenna_spacing);
      c.aps.push_back(ap);
    }
    read_opt(j, "rp_spacing", c.rp_spacing);
    read_opt(j, "n_rx", c.n_rx);
    read_opt(j, "rx_antenna_spacing", c.rx_antenna_spacing);
    read_opt(j, "center_freq_hz", c.center_freq_hz);
    read_opt(j, "height_offset", c.height_offset);
    read_opt(j, "paths_per_link", c.paths_per_link);
    read_opt(j, "los_present", c.los_present);
    read_opt(j, "noise_std", c.noise_std);
    if (j.contains("phase_error")) {
      const auto& p = j["phase_error"];
      reject_unknown(p, {"cfo_slope", "sto_offset"}, "phase_error");
      read_opt(p, "cfo_slope", c.phase_error.cfo_slope);
      read_opt(p, "sto_offset", c.phase_error.sto_offset);
    }
    read_opt(j, "reflection_gain", c.reflection_gain);
    read_opt(j, "attenuation_jitter", c.attenuation_jitter);
    if (j.contains("obstacle")) {
      const auto& o = j["obstacle"];
      reject_unknown(o, {"rp_fraction", "extra_jitter"}, "obstacle");
      read_opt(o, "rp_fraction", c.obstacle.rp_fraction);
      read_opt(o, "extra_jitter", c.obstacle.extra_jitter);
    }
    read_opt(j, "seed", c.seed);
    read_opt(j, "realization", c.realization);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
  c.validate();
  return c;
}

json scenario_to_json(const ScenarioConfig& c) {
  json aps = json::array();
  for (const auto& a : c.aps)
    aps.push_back({{"position", {a.position.x(), a.position.y()}},
                   {"n_tx", a.n_tx},
                   {"bandwidth_mhz", a.bandwidth_mhz},
                   {"antenna_spacing", a.antenna_spacing}});
  return {{"name", c.name},
          {"room_extent", {c.room_extent.x(), c.room_extent.y()}},
          {"aps", aps},
          {"rp_spacing", c.rp_spacing},
          {"n_rx", c.n_rx},
          {"rx_antenna_spacing", c.rx_antenna_spacing},
          {"center_freq_hz", c.center_freq_hz},
          {"height_offset", c.height_offset},
          {"paths_per_link", c.paths_per_link},
          {"los_present", c.los_present},
          {"noise_std", c.noise_std},
          {"phase_error", {{"cfo_slope", c.phase_error.cfo_slope}, {"sto_offset", c.phase_error.sto_offset}}},
          {"reflection_gain", c.reflection_gain},
          {"attenuation_jitter", c.attenuation_jitter},
          {"obstacle", {{"rp_fraction", c.obstacle.rp_fraction}, {"extra_jitter", c.obstacle.extra_jitter}}},
          {"seed", c.seed},
          {"realization", c.realization}};
}

std::uint64_t scenario_digest(const ScenarioConfig& cfg) { return fnv1a(scenario_to_json(cfg).dump()); }

ScenarioConfig load_scenario_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scenario file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return scenario_from_json(j);
}

namespace {

ApConfig ap_at(Scalar x, Scalar y, int n_tx = 1, int bw = 20) {
  ApConfig a;
  a.position = {x, y};
  a.n_tx = n_tx;
  a.bandwidth_mhz = bw;
  return a;
}

}  // namespace

bool is_preset(const std::string& name) {
  return name == "scen1" || name == "scen1_obstacle" || name == "scen2" || name == "scen3" || name == "tiny";
}

// Rooms follow the three measured environments (8x9 classroom, 8x7 meeting
// room, 8x9.5 laboratory), four APs each, 0.5 m RP grid, 5.25 GHz. The
// meeting room shares the classroom's corner AP layout; the laboratory uses
// mid-wall APs and a denser scatterer field.
ScenarioConfig preset_scenario(const std::string& name) {
  ScenarioConfig c;
  c.name = name;
  c.phase_error = {0.05, 0.7};
  if (name == "scen1" || name == "scen1_obstacle") {
    c.room_extent = {8.0, 9.0};
    c.aps = {ap_at(0.4, 0.4), ap_at(7.6, 0.4), ap_at(7.6, 8.6), ap_at(0.4, 8.6)};
    c.paths_per_link = 5;
    c.noise_std = 0.01;
    c.seed = 101;
    if (name == "scen1_obstacle") c.obstacle = {0.3, 0.3};
  } else if (name == "scen2") {
    c.room_extent = {8.0, 7.0};
    c.aps = {ap_at(0.4, 0.4), ap_at(7.6, 0.4), ap_at(7.6, 6.6), ap_at(0.4, 6.6)};
    c.paths_per_link = 5;
    c.noise_std = 0.01;
    c.seed = 202;
  } else if (name == "scen3") {
    c.room_extent = {8.0, 9.5};
    c.aps = {ap_at(4.0, 0.3), ap_at(7.7, 4.75), ap_at(4.0, 9.2), ap_at(0.3, 4.75)};
    c.paths_per_link = 8;
    c.reflection_gain = 0.8;
    c.noise_std = 0.015;
    c.seed = 303;
  } else if (name == "tiny") {
    c.room_extent = {2.0, 2.0};
    c.aps = {ap_at(0.2, 0.2), ap_at(1.8, 0.2), ap_at(1.0, 1.8)};
    c.rp_spacing = 1.0;
    c.paths_per_link = 3;
    c.seed = 7;
  } else {
    throw ConfigError("unknown scenario preset '" + name + "'");
  }
  c.validate();
  return c;
}

ScenarioConfig resolve_scenario(const std::string& ref, const std::filesystem::path& base_dir) {
  if (is_preset(ref)) return preset_scenario(ref);
  std::filesystem::path p(ref);
  if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
  if (!std::filesystem::exists(p)) throw ConfigError("scenario '" + ref + "' is neither a preset nor an existing file");
  return load_scenario_file(p);
}

// ---------------------------------------------------------------------------
// Binary container

namespace {

constexpr char kMagic[8] = {'C', 'S', 'I', 'L', 'D', 'S', '0', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("dataset: truncated file");
  return v;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset " + path.string());
  const std::string cfg = scenario_to_json(ds.config).dump();
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, fnv1a(cfg));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put<std::int32_t>(out, ds.samples_per_rp);
  put<std::int32_t>(out, ds.sample_offset);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.config.aps.size()));
  for (const auto& ap : ds.config.aps) {
    put<std::int32_t>(out, ds.config.n_rx);
    put<std::int32_t>(out, ap.n_tx);
    put<std::int32_t>(out, subcarrier_count(ap.bandwidth_mhz));
    put<std::int32_t>(out, ap.bandwidth_mhz);
  }
  put<std::uint64_t>(out, ds.records.size());
  for (const auto& r : ds.records) {
    put<std::int32_t>(out, r.ap_index);
    put<std::int32_t>(out, r.rp_index);
    put<std::int32_t>(out, r.sample_index);
    put<double>(out, r.true_location.x());
    put<double>(out, r.true_location.y());
    out.write(reinterpret_cast<const char*>(r.csi.data()), static_cast<std::streamsize>(r.csi.size() * sizeof(Complex)));
  }
  if (!out) throw DataError("write failed for dataset " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path, std::uint64_t expected_digest) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError(path.string() + ": bad magic");
  if (get<std::uint32_t>(in) != kVersion) throw DataError(path.string() + ": unsupported version");
  const auto digest = get<std::uint64_t>(in);
  const auto len = get<std::uint32_t>(in);
  std::string cfg(len, '\0');
  in.read(cfg.data(), len);
  if (!in) throw DataError(path.string() + ": truncated header");
  if (fnv1a(cfg) != digest) throw DigestMismatch(path.string() + ": embedded config does not match its digest");
  if (expected_digest != 0 && digest != expected_digest)
    throw DigestMismatch(path.string() + ": config digest " + hex_digest(digest) + " != expected " +
                         hex_digest(expected_digest) + " (stale dataset?)");
  Dataset ds;
  try {
    ds.config = scenario_from_json(json::parse(cfg));
  } catch (const ConfigError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  ds.samples_per_rp = get<std::int32_t>(in);
  ds.sample_offset = get<std::int32_t>(in);
  const auto n_ap = get<std::uint32_t>(in);
  if (n_ap != ds.config.aps.size()) throw DataError(path.string() + ": dimension table does not match config");
  struct Dims {
    int n_rx, n_tx, k, bw;
  };
  std::vector<Dims> dims(n_ap);
  for (auto& d : dims) {
    d.n_rx = get<std::int32_t>(in);
    d.n_tx = get<std::int32_t>(in);
    d.k = get<std::int32_t>(in);
    d.bw = get<std::int32_t>(in);
  }
  const auto count = get<std::uint64_t>(in);
  ds.records.resize(count);
  for (auto& r : ds.records) {
    r.ap_index = get<std::int32_t>(in);
    r.rp_index = get<std::int32_t>(in);
    r.sample_index = get<std::int32_t>(in);
    r.true_location.x() = get<double>(in);
    r.true_location.y() = get<double>(in);
    if (r.ap_index < 0 || r.ap_index >= static_cast<int>(n_ap)) throw DataError(path.string() + ": bad AP index");
    const auto& d = dims[r.ap_index];
    r.n_rx = d.n_rx;
    r.n_tx = d.n_tx;
    r.subcarriers = d.k;
    r.bandwidth_mhz = d.bw;
    r.csi.resize(static_cast<Index>(d.n_rx) * d.n_tx * d.k);
    in.read(reinterpret_cast<char*>(r.csi.data()), static_cast<std::streamsize>(r.csi.size() * sizeof(Complex)));
    if (!in) throw DataError(path.string() + ": truncated record");
  }
  return ds;
}

}  // namespace csiloc
