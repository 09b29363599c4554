#include "rifl/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "rifl/byteio.hpp"
#include "rifl/dataset.hpp"

namespace rifl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

std::string fmt(double v) { return fmt6(v); }

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  if (out.empty()) throw ConfigError("config: '" + key + "' expects a comma-separated list");
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define RIFL_NUM(key, member, type)                                                          \
  {                                                                                           \
    key, {                                                                                    \
      [](ExperimentConfig& c, const std::string& v) { c.member = parse_number<type>(key, v); }, \
          [](const ExperimentConfig& c) { return std::to_string(c.member); }                  \
    }                                                                                         \
  }
#define RIFL_REAL(key, member)                                                                  \
  {                                                                                             \
    key, {                                                                                      \
      [](ExperimentConfig& c, const std::string& v) { c.member = parse_number<double>(key, v); }, \
          [](const ExperimentConfig& c) { return fmt(c.member); }                               \
    }                                                                                           \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"dataset", {[](ExperimentConfig& c, const std::string& v) { c.dataset = v; },
                   [](const ExperimentConfig& c) { return c.dataset; }}},
      {"output_dir", {[](ExperimentConfig& c, const std::string& v) { c.output_dir = v; },
                      [](const ExperimentConfig& c) { return c.output_dir; }}},
      RIFL_NUM("train_count", train_count, std::size_t),
      RIFL_NUM("seed", seed, std::uint64_t),
      RIFL_NUM("arch.couplings_per_stage", arch.couplings_per_stage, std::size_t),
      RIFL_NUM("arch.hidden", arch.hidden, std::size_t),
      RIFL_NUM("arch.factor_hidden", arch.factor_hidden, std::size_t),
      {"train.mode", {[](ExperimentConfig& c, const std::string& v) { c.train.mode = parse_train_mode(v); },
                      [](const ExperimentConfig& c) { return to_string(c.train.mode); }}},
      RIFL_REAL("train.rho1", train.rho1),
      RIFL_REAL("train.rho2", train.rho2),
      RIFL_NUM("train.adv_iters", train.adv_iters, int),
      RIFL_NUM("train.adv_epsilon", train.adv_epsilon, int),
      RIFL_REAL("train.mixing_rate", train.mixing_rate),
      RIFL_REAL("train.learning_rate", train.learning_rate),
      RIFL_REAL("train.lr_decay", train.lr_decay),
      RIFL_NUM("train.epochs", train.epochs, int),
      RIFL_NUM("train.batch_size", train.batch_size, std::size_t),
      {"attack.mode", {[](ExperimentConfig& c, const std::string& v) { c.attack.mode = parse_attack_mode(v); },
                       [](const ExperimentConfig& c) { return to_string(c.attack.mode); }}},
      RIFL_NUM("attack.epsilon", attack.epsilon, int),
      RIFL_NUM("attack.alpha", attack.alpha, int),
      RIFL_NUM("attack.iters", attack.iters, int),
      RIFL_REAL("attack.bound", attack.bound),
      {"universality.epsilons",
       {[](ExperimentConfig& c, const std::string& v) { c.universality_epsilons = parse_int_list("universality.epsilons", v); },
        [](const ExperimentConfig& c) { return join(c.universality_epsilons); }}},
      RIFL_NUM("universality.repeats", universality_repeats, int),
      RIFL_NUM("theory.trials", theory_trials, std::size_t),
  };
  return table;
}

#undef RIFL_NUM
#undef RIFL_REAL

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

TrainConfig ExperimentConfig::default_train() {
  TrainConfig t;
  t.epochs = 30;
  t.batch_size = 8;
  return t;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("config: unknown key '" + key + "'");
  try {
    it->second.set(*this, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: '" + key + "': " + e.what());
  }
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::string& origin) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> seen;
  for (int n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string where = origin + ":" + std::to_string(n) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) throw ConfigError(where + "duplicate key '" + key + "'");
    seen.push_back(key);
    try {
      c.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  const auto bytes = read_file(path);
  return parse(std::string(bytes.begin(), bytes.end()), path);
}

std::vector<std::pair<std::string, std::string>> ExperimentConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, f] : fields()) out.emplace_back(k, f.get(*this));
  return out;
}

std::string ExperimentConfig::canonical() const {
  std::string s;
  for (const auto& [k, v] : entries()) s += k + "=" + v + "\n";
  return s;
}

std::uint64_t ExperimentConfig::hash() const {
  const std::string s = canonical();
  return fnv1a64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

void ExperimentConfig::finalize() {
  train.seed = seed;
  attack.seed = seed;
  if (train_count == 0) throw ConfigError("config: train_count must be >= 1");
  if (universality_repeats < 1) throw ConfigError("config: universality.repeats must be >= 1");
  if (theory_trials < 1) throw ConfigError("config: theory.trials must be >= 1");
  try {
    train.validate();
    attack.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

void ExperimentConfig::annotate(CsvTable& table) const {
  table.comment("seed=" + std::to_string(seed));
  table.comment("config_hash=" + hex64(hash()));
  for (const auto& [k, v] : entries())
    if (k != "seed") table.comment(k + "=" + v);
}

}  // namespace rifl
