// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace mcbm {

/// Resolved settings for one run. `settings` holds the JSON config merged
/// with command-line overrides; relative paths inside it resolve against
/// `base_dir`.
struct RunConfig {
  std::filesystem::path manifest;
  std::filesystem::path out;
  std::filesystem::path base_dir;
  uint64_t seed = 0;
  nlohmann::json settings = nlohmann::json::object();

  /// settings[section][key] or `fallback`.
  template <typename T>
  T get(const std::string& section, const std::string& key, T fallback) const {
    if (!settings.contains(section) || !settings[section].is_object()) return fallback;
    const auto& s = settings[section];
    if (!s.contains(key) || s[key].is_null()) return fallback;
    return s[key].get<T>();
  }
  std::filesystem::path resolve(const std::string& path) const;
};

/// Loads `config_path` (if any), applies `overrides` (same shape) and fills
/// manifest/out/seed from the explicit values when given, else from the
/// config's top-level keys.
RunConfig make_run_config(const std::optional<std::filesystem::path>& manifest,
                          const std::optional<std::filesystem::path>& out,
                          const std::optional<std::filesystem::path>& config_path,
                          const std::optional<uint64_t>& seed, const nlohmann::json& overrides);

/// Stage names in pipeline order (leakage last; pipeline itself excluded).
const std::vector<std::string>& pipeline_stages();
bool is_stage(const std::string& name);

/// Runs one stage (or "pipeline"). Writes artifacts under cfg.out and a
/// report under cfg.out/reports. Throws ValidationError, ServiceError or
/// NumericError.
void run_stage(const std::string& stage, const RunConfig& cfg);

/// Exclusive per-directory lock; throws ValidationError if already held.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& out_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Maps an exception to the CLI exit code: 2 validation, 3 service, 1 other.
int exit_code_for(const std::exception& e);

}  // namespace mcbm
