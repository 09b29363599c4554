#pragma once

// Plain-text experiment configuration: one `key = value` per line, '#'
// comments, unknown or repeated keys rejected. The canonical dump (every key,
// sorted, defaults included) is what gets hashed and echoed into outputs.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rifl/attacks.hpp"
#include "rifl/csv.hpp"
#include "rifl/defense.hpp"
#include "rifl/flow.hpp"

namespace rifl {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  std::string dataset = "synthetic-textures:160:0";
  std::size_t train_count = 128;  // the rest of the dataset is held out
  std::string output_dir = "rifl-out";
  std::uint64_t seed = 0;

  FlowConfig arch;
  TrainConfig train = default_train();
  AttackConfig attack;

  std::vector<int> universality_epsilons{0, 5};
  int universality_repeats = 20;
  std::size_t theory_trials = 10000;

  static TrainConfig default_train();

  static ExperimentConfig parse(const std::string& text, const std::string& origin = "config");
  static ExperimentConfig load(const std::string& path);

  /// Sets one key from its text form; throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
  std::string canonical() const;  // "key=value\n" lines
  std::uint64_t hash() const;     // FNV-1a 64 of canonical()

  /// Propagates `seed` into the training and attack configs and validates both.
  void finalize();

  /// Adds "seed", "config_hash" and every entry as CSV comment lines.
  void annotate(CsvTable& table) const;
};

std::string hex64(std::uint64_t v);

}  // namespace rifl
