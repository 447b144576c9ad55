#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbapm/serialize.hpp"
#include "cbapm/version.hpp"

namespace cbapm {

/*
 Stage manifests: every pipeline stage records its config hash, seed and
 the checksums of the files it read and wrote. Downstream stages verify
 upstream outputs before consuming them, so a mutated artifact fails
 loudly instead of silently skewing results.
*/

inline std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

inline std::string checksum_file(const std::filesystem::path& path) {
  return to_hex(fnv1a64(read_file(path)));
}

struct Manifest {
  std::string stage;
  std::string version = kVersion;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;   // path, checksum
  std::vector<std::pair<std::string, std::string>> outputs;  // path, checksum

  void add_input(const std::filesystem::path& p) { inputs.emplace_back(p.string(), checksum_file(p)); }
  void add_output(const std::filesystem::path& p) { outputs.emplace_back(p.string(), checksum_file(p)); }
};

inline void write_manifest(const Manifest& m, const std::filesystem::path& dir) {
  nlohmann::json j;
  j["stage"] = m.stage;
  j["version"] = m.version;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  auto files = [](const std::vector<std::pair<std::string, std::string>>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [path, sum] : v) arr.push_back({{"path", path}, {"fnv64", sum}});
    return arr;
  };
  j["inputs"] = files(m.inputs);
  j["outputs"] = files(m.outputs);
  write_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

struct VerifyIssue {
  std::string path;
  std::string expected;
  std::string actual;  // empty when the file is missing
};

// Recomputes the checksums of every file listed in a stage manifest.
inline std::vector<VerifyIssue> verify_manifest(const std::filesystem::path& manifest_path) {
  nlohmann::json j = nlohmann::json::parse(read_file(manifest_path));
  std::vector<VerifyIssue> issues;
  for (const char* key : {"inputs", "outputs"}) {
    for (const auto& entry : j.at(key)) {
      std::string path = entry.at("path").get<std::string>();
      std::string expected = entry.at("fnv64").get<std::string>();
      if (!std::filesystem::exists(path)) {
        issues.push_back({path, expected, ""});
        continue;
      }
      std::string actual = checksum_file(path);
      if (actual != expected) issues.push_back({path, expected, actual});
    }
  }
  return issues;
}

} // namespace cbapm
