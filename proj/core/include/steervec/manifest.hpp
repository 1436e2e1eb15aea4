#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "steervec/common.hpp"

namespace steervec {

// One manifest per artifact-producing command, written alongside the primary
// output. Timestamps live only here so artifact diffs stay clean.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> flags;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> input_hashes;  // path -> digest hex
  std::vector<std::string> outputs;
  std::string toolkit_version{kVersion};
  std::string timestamp;  // filled at write time, UTC ISO-8601

  std::string to_json_string() const;
  void add_input(const std::filesystem::path& path);
  // writes <primary>.manifest.json
  void write_alongside(const std::filesystem::path& primary_output);
};

}  // namespace steervec
