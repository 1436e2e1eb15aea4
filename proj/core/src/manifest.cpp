#include "steervec/manifest.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>

#include "json.hpp"

namespace steervec {

std::string RunManifest::to_json_string() const {
  nlohmann::json j;
  j["command"] = command;
  j["flags"] = flags;
  j["seed"] = seed;
  j["inputs"] = input_hashes;
  j["outputs"] = outputs;
  j["toolkit_version"] = toolkit_version;
  j["timestamp"] = timestamp;
  return j.dump(2);
}

void RunManifest::add_input(const std::filesystem::path& path) {
  input_hashes[path.string()] = file_digest(path).hex();
}

void RunManifest::write_alongside(const std::filesystem::path& primary_output) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  timestamp = buf;
  if (std::find(outputs.begin(), outputs.end(), primary_output.string()) == outputs.end())
    outputs.push_back(primary_output.string());
  atomic_write_file(primary_output.string() + ".manifest.json", to_json_string() + "\n");
}

}  // namespace steervec
