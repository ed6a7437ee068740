#include "dynseg/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace dynseg {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& value) {
  N out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as a number");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + value + "'");
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
};

template <typename N>
Field number_field(N RunConfig::*member) {
  return {[member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<N>) return format_double(c.*member);
            else return std::to_string(c.*member);
          },
          [member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<N>(k, v); }};
}

template <typename N>
Field data_field(N DataConfig::*member) {
  return {[member](const RunConfig& c) { return std::to_string(c.data.*member); },
          [member](RunConfig& c, const std::string& k, const std::string& v) {
            c.data.*member = parse_number<N>(k, v);
          }};
}

template <typename N>
Field model_field(N seg::UNetConfig::*member) {
  return {[member](const RunConfig& c) { return std::to_string(c.model.*member); },
          [member](RunConfig& c, const std::string& k, const std::string& v) {
            c.model.*member = parse_number<N>(k, v);
          }};
}

Field epoch_field(std::size_t phase) {
  return {[phase](const RunConfig& c) { return std::to_string(c.epochs[phase]); },
          [phase](RunConfig& c, const std::string& k, const std::string& v) { c.epochs[phase] = parse_number<int>(k, v); }};
}

// Ordered so that to_text() groups related keys.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("data.dir", Field{[](const RunConfig& c) { return c.data.dir; },
                                     [](RunConfig& c, const std::string&, const std::string& v) { c.data.dir = v; }});
    t.emplace_back("data.cases", data_field(&DataConfig::cases));
    t.emplace_back("data.height", data_field(&DataConfig::height));
    t.emplace_back("data.width", data_field(&DataConfig::width));
    t.emplace_back("data.depth", data_field(&DataConfig::depth));
    t.emplace_back("data.seed", data_field(&DataConfig::seed));
    t.emplace_back("data.folds", data_field(&DataConfig::folds));
    t.emplace_back("data.fold",
                   Field{[](const RunConfig& c) { return c.data.fold < 0 ? std::string("all") : std::to_string(c.data.fold); },
                         [](RunConfig& c, const std::string& k, const std::string& v) {
                           c.data.fold = v == "all" ? -1 : parse_number<int>(k, v);
                         }});
    t.emplace_back("model.base_channels", model_field(&seg::UNetConfig::base_channels));
    t.emplace_back("model.depth", model_field(&seg::UNetConfig::depth));
    t.emplace_back("policy_space",
                   Field{[](const RunConfig& c) { return c.policy_space.to_string(); },
                         [](RunConfig& c, const std::string& k, const std::string& v) {
                           try {
                             c.policy_space = policy::PolicySpace::parse(v);
                           } catch (const std::invalid_argument& e) {
                             throw ConfigError("config key '" + k + "': " + e.what());
                           }
                         }});
    t.emplace_back("quant.candidates",
                   Field{[](const RunConfig& c) { return c.candidates.to_string(); },
                         [](RunConfig& c, const std::string& k, const std::string& v) {
                           try {
                             c.candidates = quant::BitCandidateSet::parse(v);
                           } catch (const std::invalid_argument& e) {
                             throw ConfigError("config key '" + k + "': " + e.what());
                           }
                         }});
    t.emplace_back("quant.cost_model",
                   Field{[](const RunConfig& c) { return flops::to_string(c.cost_model); },
                         [](RunConfig& c, const std::string& k, const std::string& v) {
                           try {
                             c.cost_model = flops::parse_cost_model(v);
                           } catch (const std::invalid_argument& e) {
                             throw ConfigError("config key '" + k + "': " + e.what());
                           }
                         }});
    t.emplace_back("components",
                   Field{[](const RunConfig& c) { return c.components.to_string(); },
                         [](RunConfig& c, const std::string&, const std::string& v) {
                           c.components = Components::parse(v);
                         }});
    t.emplace_back("lambda", number_field(&RunConfig::lambda));
    t.emplace_back("epochs.p1", epoch_field(0));
    t.emplace_back("epochs.p2", epoch_field(1));
    t.emplace_back("epochs.p3", epoch_field(2));
    t.emplace_back("base_lr", number_field(&RunConfig::base_lr));
    t.emplace_back("warmup_fraction", number_field(&RunConfig::warmup_fraction));
    t.emplace_back("batch_size", number_field(&RunConfig::batch_size));
    t.emplace_back("gumbel.tau_start", number_field(&RunConfig::tau_start));
    t.emplace_back("gumbel.tau_end", number_field(&RunConfig::tau_end));
    t.emplace_back("seed", number_field(&RunConfig::seed));
    t.emplace_back("train.augment",
                   Field{[](const RunConfig& c) { return std::string(c.augment ? "true" : "false"); },
                         [](RunConfig& c, const std::string& k, const std::string& v) { c.augment = parse_bool(k, v); }});
    t.emplace_back("train.max_slices", number_field(&RunConfig::max_train_slices));
    t.emplace_back("train.policy_warmup", number_field(&RunConfig::policy_warmup));
    t.emplace_back("train.policy_lr_scale", number_field(&RunConfig::policy_lr_scale));
    t.emplace_back("out_dir", Field{[](const RunConfig& c) { return c.out_dir; },
                                    [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }});
    return t;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  std::string valid;
  for (const auto& [k, _] : fields()) valid += (valid.empty() ? "" : ", ") + k;
  throw ConfigError("unknown config key '" + key + "' (valid keys: " + valid + ")");
}

}  // namespace

std::string Components::to_string() const {
  if (spatial && quantize) return "S+Q";
  if (spatial) return "S";
  if (quantize) return "Q";
  return "baseline";
}

Components Components::parse(const std::string& text) {
  if (text == "S+Q") return {true, true};
  if (text == "S") return {true, false};
  if (text == "Q") return {false, true};
  if (text == "baseline") return {false, false};
  throw ConfigError("components must be one of baseline, S, Q, S+Q (got '" + text + "')");
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> ks = [] {
    std::vector<std::string> out;
    for (const auto& [k, _] : fields()) out.push_back(k);
    return out;
  }();
  return ks;
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void RunConfig::validate() const {
  if (data.cases < 2) throw ConfigError("data.cases must be at least 2");
  if (data.folds < 2 || data.folds > data.cases) {
    throw ConfigError("data.folds must lie in [2, data.cases]");
  }
  if (data.fold < -1 || data.fold >= data.folds) {
    throw ConfigError("data.fold must be 'all' or in [0, " + std::to_string(data.folds - 1) + "]");
  }
  try {
    model.validate();
    model.validate_input(data.height, data.width);
    policy_space.validate_for(data.height, data.width);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  for (Index p : policy_space.crop_sizes()) {
    if (p % model.divisor() != 0) {
      throw ConfigError("policy_space crop " + std::to_string(p) + " is not divisible by " +
                        std::to_string(model.divisor()));
    }
  }
  if (data.depth < 8) throw ConfigError("data.depth must be at least 8");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    if (epochs[i] < 1) throw ConfigError("epochs.p" + std::to_string(i + 1) + " must be at least 1");
  }
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(tau_start > 0.0 && tau_end > 0.0)) throw ConfigError("gumbel temperatures must be positive");
  if (max_train_slices < 0) throw ConfigError("train.max_slices must be >= 0");
  if (!(policy_lr_scale > 0.0)) throw ConfigError("train.policy_lr_scale must be positive");
  if (policy_warmup < 0 || policy_warmup >= epochs[0]) {
    throw ConfigError("train.policy_warmup must lie in [0, epochs.p1)");
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& [k, f] : fields()) os << k << " = " << f.get(*this) << '\n';
  return os.str();
}

RunConfig RunConfig::parse_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path.string());
}

}  // namespace dynseg
