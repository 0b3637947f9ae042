// SPDX-License-Identifier: Apache-2.0
//
// Run manifests: what a CLI run read, wrote and with which settings, as JSON.
// Re-running the recorded argument list against the same inputs reproduces
// every output byte for byte.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace scope {

inline constexpr const char* kToolVersion = "0.1.0";

struct RunManifest {
  std::string tool = "scope";
  std::string version = kToolVersion;
  std::string command;
  std::vector<std::string> args;  // argument list after the program name, with the output directory as given
  std::string out_dir;
  std::string model_id;
  std::string contract_id;
  std::string method;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;   // path -> content digest
  std::map<std::string, std::string> outputs;  // file name in out_dir -> content digest
  std::string created;                         // UTC, ISO 8601

  bool operator==(const RunManifest&) const = default;
};

std::string manifest_to_json(const RunManifest& manifest);
// Throws std::invalid_argument on malformed or incomplete JSON.
RunManifest manifest_from_json(std::string_view text);

// FNV-1a digest of a file's bytes, as 16 hex digits. Throws IoError.
std::string file_digest(const std::filesystem::path& path);
std::string utc_timestamp();

}  // namespace scope
