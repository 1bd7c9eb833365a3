#pragma once

// Text run configuration: `key = value` lines, `#` comments. Every
// TrainConfig, ModelConfig (backbone, localizer) and PhantomSpec field has a
// key; unknown keys are rejected.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "tanet/dataio.hpp"
#include "tanet/model.hpp"
#include "tanet/trainer.hpp"

namespace tanet::cli {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  TrainConfig train;
  ModelConfig model;
  PhantomSpec phantom;
  /// Samples generated by `synth` when --count is not given.
  int count = 250;

  /// Applies one `key=value` assignment.
  void set(const std::string& key, const std::string& value);
  /// Throws ConfigError if any section is invalid; phantom and model frame
  /// sizes must agree.
  void validate() const;
  /// Every key, one per line, in a fixed order.
  std::string serialize() const;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  static const std::vector<std::string>& keys();
};

/// Splits "key=value" (whitespace around either side ignored).
std::pair<std::string, std::string> split_assignment(const std::string& text);

}  // namespace tanet::cli
