// SPDX-License-Identifier: Apache-2.0

#include "scope/manifest.hpp"

#include <ctime>
#include <json.hpp>

#include "scope/fileutil.hpp"
#include "scope/hash.hpp"

namespace scope {

std::string manifest_to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["tool"] = m.tool;
  j["version"] = m.version;
  j["command"] = m.command;
  j["args"] = m.args;
  j["out_dir"] = m.out_dir;
  j["model_id"] = m.model_id;
  j["contract_id"] = m.contract_id;
  j["method"] = m.method;
  j["seeds"] = m.seeds;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["created"] = m.created;
  return j.dump(2) + "\n";
}

RunManifest manifest_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    RunManifest m;
    m.tool = j.at("tool").get<std::string>();
    m.version = j.at("version").get<std::string>();
    m.command = j.at("command").get<std::string>();
    m.args = j.at("args").get<std::vector<std::string>>();
    m.out_dir = j.at("out_dir").get<std::string>();
    m.model_id = j.at("model_id").get<std::string>();
    m.contract_id = j.at("contract_id").get<std::string>();
    m.method = j.at("method").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.created = j.at("created").get<std::string>();
    if (m.tool != "scope") throw std::invalid_argument("not a scope manifest");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad manifest: ") + e.what());
  }
}

std::string file_digest(const std::filesystem::path& path) { return hex64(fnv1a(read_file(path))); }

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace scope
