#pragma once

#include "btr/config.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

// Run directories: <root>/<config-hash>-<seed>/ holding manifest.json,
// metrics.csv, ckpt_<frame>.bin and plots/. The root comes from BTR_RUN_ROOT
// (default "runs").

namespace btr {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kRunRootEnv = "BTR_RUN_ROOT";

inline std::string run_root() {
  const char* v = std::getenv(kRunRootEnv);
  return v && *v ? std::string(v) : std::string("runs");
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string run_name(const AgentConfig& cfg) {
  return hex64(config_hash(cfg)) + "-" + std::to_string(cfg.master_seed);
}

inline std::filesystem::path run_dir(const AgentConfig& cfg, const std::string& root = run_root()) {
  return std::filesystem::path(root) / run_name(cfg);
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Config snapshot as a JSON object with typed values.
inline nlohmann::json config_json(const AgentConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : config_detail::fields())
    std::visit([&](auto member) { j[std::string(f.name)] = cfg.*member; }, f.ptr);
  return j;
}

inline nlohmann::json make_manifest(const AgentConfig& cfg, const std::string& timestamp) {
  nlohmann::json m;
  m["version"] = kVersion;
  m["master_seed"] = cfg.master_seed;
  m["config_hash"] = hex64(config_hash(cfg));
  m["started"] = timestamp;
  m["environment"] = cfg.env_layout;
  m["config"] = config_json(cfg);
  m["config_text"] = serialize_config(cfg);
  m["files"] = {"manifest.json", "metrics.csv", "ckpt_<frame>.bin", "plots/"};
  return m;
}

/// Writes manifest.json unless one already exists (resumed runs keep the
/// original).
inline void write_manifest(const std::filesystem::path& dir, const AgentConfig& cfg) {
  std::filesystem::create_directories(dir / "plots");
  const auto path = dir / "manifest.json";
  if (std::filesystem::exists(path)) return;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << make_manifest(cfg, utc_timestamp()).dump(2) << '\n';
}

}  // namespace btr
