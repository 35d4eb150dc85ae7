#pragma once

// Run manifests: config snapshot, seed, SHA-256 of every output file,
// wall-clock and library versions. Output hashes exclude the manifest itself.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>

#include <Eigen/Core>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "dctnn/error.hpp"

namespace dctnn {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr const char* kManifestName = "manifest.json";

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw NumericalError("sha256: digest init failed");
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", md[i]);
    hex += byte;
  }
  return hex;
}

// Relative path -> hash for every regular file under `dir` except manifests.
inline std::map<std::string, std::string> hash_tree(const std::filesystem::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == kManifestName) continue;
    out[std::filesystem::relative(e.path(), dir).generic_string()] = sha256_file(e.path());
  }
  return out;
}

struct RunManifest {
  std::string subcommand;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::map<std::string, std::string> artifacts;
  double wall_clock_seconds = 0.0;
  std::string started_at;  // UTC, ISO 8601
};

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"subcommand", m.subcommand},
          {"seed", m.seed},
          {"config", m.config},
          {"artifacts", m.artifacts},
          {"wall_clock_seconds", m.wall_clock_seconds},
          {"started_at", m.started_at},
          {"versions",
           {{"dctnn", kVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                          "." + std::to_string(EIGEN_MINOR_VERSION)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}}};
}

// Hashes the outputs under `dir` and writes dir/manifest.json.
inline void write_manifest(const std::filesystem::path& dir, RunManifest m) {
  m.artifacts = hash_tree(dir);
  std::ofstream out(dir / kManifestName);
  if (!out) throw DataError("cannot write " + (dir / kManifestName).string());
  out << to_json(m).dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestName);
  if (!in) throw DataError("no manifest in " + dir.string());
  return nlohmann::json::parse(in);
}

}  // namespace dctnn
