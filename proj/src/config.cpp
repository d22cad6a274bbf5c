#include "puir/config.hpp"

#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

namespace puir::config {

using nlohmann::json;

namespace {

class Cursor {
 public:
  Cursor(const std::string& s, int line) : s_(s), line_(line) {}

  bool done() {
    skip_ws();
    return i_ >= s_.size();
  }
  char peek() {
    skip_ws();
    return i_ < s_.size() ? s_[i_] : '\0';
  }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++i_;
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("TOML line " + std::to_string(line_) + ": " + what);
  }

  std::string key() {
    skip_ws();
    const std::size_t start = i_;
    while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '_' ||
                              s_[i_] == '-' || s_[i_] == '.')) {
      ++i_;
    }
    if (i_ == start) fail("expected a key");
    return s_.substr(start, i_ - start);
  }

  json value() {
    const char c = peek();
    if (c == '"') return basic_string();
    if (c == '\'') return literal_string();
    if (c == '[') return array();
    return scalar();
  }

 private:
  void skip_ws() {
    while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t')) ++i_;
  }

  json basic_string() {
    ++i_;
    std::string out;
    while (i_ < s_.size() && s_[i_] != '"') {
      char c = s_[i_++];
      if (c == '\\') {
        if (i_ >= s_.size()) fail("unterminated escape");
        const char e = s_[i_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      out += c;
    }
    if (i_ >= s_.size()) fail("unterminated string");
    ++i_;
    return out;
  }

  json literal_string() {
    ++i_;
    const std::size_t end = s_.find('\'', i_);
    if (end == std::string::npos) fail("unterminated string");
    std::string out = s_.substr(i_, end - i_);
    i_ = end + 1;
    return out;
  }

  json array() {
    ++i_;
    json arr = json::array();
    if (peek() == ']') {
      ++i_;
      return arr;
    }
    for (;;) {
      if (peek() == '[') fail("nested arrays are not supported");
      arr.push_back(value());
      const char c = peek();
      ++i_;
      if (c == ']') break;
      if (c != ',') fail("expected ',' or ']' in array");
      if (peek() == ']') {
        ++i_;
        break;
      }
    }
    return arr;
  }

  json scalar() {
    skip_ws();
    const std::size_t start = i_;
    while (i_ < s_.size() && s_[i_] != ',' && s_[i_] != ']' && s_[i_] != ' ' && s_[i_] != '\t') ++i_;
    std::string tok = s_.substr(start, i_ - start);
    if (tok.empty()) fail("expected a value");
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string digits;
    for (char c : tok) {
      if (c != '_') digits += c;
    }
    if (digits == "inf" || digits == "+inf") return std::numeric_limits<double>::infinity();
    if (digits == "-inf") return -std::numeric_limits<double>::infinity();
    if (digits == "nan" || digits == "+nan" || digits == "-nan") return std::numeric_limits<double>::quiet_NaN();
    const bool is_float = digits.find_first_of(".eE") != std::string::npos;
    char* end = nullptr;
    if (is_float) {
      const double v = std::strtod(digits.c_str(), &end);
      if (*end != '\0') fail("invalid number '" + tok + "'");
      return v;
    }
    errno = 0;
    const long long v = std::strtoll(digits.c_str(), &end, 10);
    if (*end != '\0' || errno == ERANGE) fail("invalid value '" + tok + "'");
    return v;
  }

  const std::string& s_;
  std::size_t i_ = 0;
  int line_;
};

std::string strip_comment(const std::string& line) {
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quote) {
      if (c == '\\' && quote == '"') ++i;
      else if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#') {
      return line.substr(0, i);
    }
  }
  return line;
}

[[noreturn]] void type_error(const std::string& key, const char* expected, const json& v) {
  throw ConfigError("config key '" + key + "': expected " + expected + ", got " + v.dump());
}

double as_double(const std::string& key, const json& v) {
  if (!v.is_number()) type_error(key, "a number", v);
  return v.get<double>();
}

long long as_int(const std::string& key, const json& v) {
  if (!v.is_number_integer()) type_error(key, "an integer", v);
  return v.get<long long>();
}

int as_int32(const std::string& key, const json& v) {
  const long long x = as_int(key, v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) type_error(key, "a 32-bit integer", v);
  return static_cast<int>(x);
}

std::uint64_t as_seed(const std::string& key, const json& v) {
  const long long x = as_int(key, v);
  if (x < 0) type_error(key, "a non-negative integer", v);
  return static_cast<std::uint64_t>(x);
}

bool as_bool(const std::string& key, const json& v) {
  if (!v.is_boolean()) type_error(key, "true or false", v);
  return v.get<bool>();
}

std::string as_string(const std::string& key, const json& v) {
  if (!v.is_string()) type_error(key, "a string", v);
  return v.get<std::string>();
}

const json& as_array(const std::string& key, const json& v) {
  if (!v.is_array()) type_error(key, "an array", v);
  return v;
}

}  // namespace

std::map<std::string, json> parse_toml(const std::string& text) {
  std::map<std::string, json> out;
  std::istringstream in(text);
  std::string raw;
  std::string prefix;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = strip_comment(raw);
    Cursor cur(line, line_no);
    if (cur.done()) continue;
    if (cur.peek() == '[') {
      cur.expect('[');
      prefix = cur.key() + ".";
      cur.expect(']');
      if (!cur.done()) cur.fail("trailing characters after table header");
      continue;
    }
    const std::string key = prefix + cur.key();
    cur.expect('=');
    json v = cur.value();
    if (!cur.done()) cur.fail("trailing characters after value");
    if (!out.emplace(key, std::move(v)).second) cur.fail("duplicate key '" + key + "'");
  }
  return out;
}

std::pair<std::string, json> parse_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not of the form key=value");
  const std::string key = kv.substr(0, eq);
  const std::string value = kv.substr(eq + 1);
  try {
    const auto parsed = parse_toml("v = " + value);
    return {key, parsed.at("v")};
  } catch (const ConfigError&) {
    return {key, value};
  }
}

void ExperimentConfig::set(const std::string& key, const json& v) {
  auto& g = data.gen;
  auto& w = train.weights;
  auto& m = train.model;
  if (key == "name" || key == "experiment") {
    name = as_string(key, v);
  } else if (key == "output_dir") {
    output_dir = as_string(key, v);
  } else if (key == "data_dir" || key == "data.dir") {
    data_dir = as_string(key, v);
  } else if (key == "seeds") {
    seeds.clear();
    for (const auto& s : as_array(key, v)) seeds.push_back(as_seed(key, s));
  } else if (key == "seed") {
    seeds = {as_seed(key, v)};
  } else if (key == "data.n_train") {
    data.n_train = as_int32(key, v);
  } else if (key == "data.n_test") {
    data.n_test = as_int32(key, v);
  } else if (key == "data.seed") {
    data.seed = as_seed(key, v);
  } else if (key == "data.size") {
    const int n = as_int32(key, v);
    g.shape = {n, n, n};
  } else if (key == "data.orientation_ramp") {
    g.orientation_ramp = as_double(key, v);
  } else if (key == "data.landmark_amplitude") {
    g.landmark_amplitude = as_double(key, v);
  } else if (key == "data.lobe_radius_frac") {
    g.lobe_radius_frac = as_double(key, v);
  } else if (key == "data.lesion_probability") {
    g.lesion_probability = as_double(key, v);
  } else if (key == "data.edge_sharpness") {
    g.edge_sharpness = as_double(key, v);
  } else if (key == "data.body_amplitude") {
    g.body_amplitude = as_double(key, v);
  } else if (key == "model.widths") {
    m.widths.clear();
    for (const auto& x : as_array(key, v)) m.widths.push_back(as_int32(key, x));
  } else if (key == "model.slots") {
    m.slots = as_int32(key, v);
  } else if (key == "model.proj_dim") {
    m.proj_dim = as_int32(key, v);
  } else if (key == "model.use_prior") {
    m.use_prior = as_bool(key, v);
  } else if (key == "train.epochs") {
    train.epochs = as_int32(key, v);
  } else if (key == "train.lr") {
    train.lr = as_double(key, v);
  } else if (key == "train.batch_size") {
    train.batch_size = as_int32(key, v);
  } else if (key == "train.optimizer") {
    train.optimizer = as_string(key, v);
  } else if (key == "train.checkpoint_every") {
    train.checkpoint_every = as_int32(key, v);
  } else if (key == "train.max_train") {
    train.max_train = as_int32(key, v);
  } else if (key == "train.w_contr") {
    w.contr = as_double(key, v);
  } else if (key == "train.w_decom") {
    w.decom = as_double(key, v);
  } else if (key == "train.w_equ") {
    w.equ = as_double(key, v);
  } else if (key == "train.w_inv") {
    w.inv = as_double(key, v);
  } else if (key == "train.temperature") {
    w.temperature = as_double(key, v);
  } else if (key == "train.exact_mean") {
    train.exact_mean = as_bool(key, v);
  } else if (key == "train.inv_stop_grad") {
    train.inv_stop_grad = as_bool(key, v);
  } else if (key == "train.shuffle_modalities") {
    train.shuffle_modalities = as_bool(key, v);
  } else if (key == "train.augment") {
    if (!as_bool(key, v)) train.augment = phantom::AugmentConfig::all_off();
    else train.augment = phantom::AugmentConfig{};
  } else if (key == "finetune.epochs") {
    finetune.epochs = as_int32(key, v);
  } else if (key == "finetune.lr") {
    finetune.lr = as_double(key, v);
  } else if (key == "finetune.w_inv") {
    finetune.w_inv = as_double(key, v);
  } else if (key == "finetune.missingness") {
    finetune.missingness = as_string(key, v);
  } else if (key == "ablation.cells") {
    ablation_cells.clear();
    for (const auto& c : as_array(key, v)) ablation_cells.push_back(as_string(key, c));
  } else if (key == "ablation.finetune_seg") {
    ablation_finetune_seg = as_bool(key, v);
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("config: experiment name is empty");
  for (char c : name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
      throw ConfigError("config: experiment name '" + name + "' may only contain letters, digits, '_' and '-'");
    }
  }
  if (seeds.empty()) throw ConfigError("config: seed list is empty");
  if (data.n_train < 1 || data.n_test < 1) throw ConfigError("config: data.n_train and data.n_test must be >= 1");
  if (finetune.epochs < 0) throw ConfigError("config: finetune.epochs must be >= 0");
  if (!(finetune.lr > 0.0)) throw ConfigError("config: finetune.lr must be > 0");
  if (!(finetune.w_inv >= 0.0)) throw ConfigError("config: finetune.w_inv must be >= 0");
  try {
    data.gen.validate();
    pretrain_config(seeds.front(), output_dir).validate();
    finetune_config(trainer::Task::kFinetuneSeg, seeds.front(), output_dir);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

json ExperimentConfig::to_json() const {
  return {{"name", name},
          {"output_dir", output_dir.string()},
          {"data_dir", data_dir.string()},
          {"data",
           {{"n_train", data.n_train},
            {"n_test", data.n_test},
            {"seed", data.seed},
            {"generation", io::generation_config_to_json(data.gen)}}},
          {"train", train.to_json()},
          {"finetune",
           {{"epochs", finetune.epochs},
            {"lr", finetune.lr},
            {"w_inv", finetune.w_inv},
            {"missingness", finetune.missingness}}},
          {"seeds", seeds},
          {"ablation", {{"cells", ablation_cells}, {"finetune_seg", ablation_finetune_seg}}}};
}

trainer::TrainConfig ExperimentConfig::pretrain_config(std::uint64_t seed, const fs::path& out_dir) const {
  trainer::TrainConfig c = train;
  c.task = trainer::Task::kPretrain;
  c.manifest = manifest_path();
  c.seed = seed;
  c.out_dir = out_dir;
  return c;
}

trainer::TrainConfig ExperimentConfig::finetune_config(trainer::Task task, std::uint64_t seed,
                                                       const fs::path& out_dir) const {
  trainer::TrainConfig c = pretrain_config(seed, out_dir);
  c.task = task;
  c.epochs = finetune.epochs;
  c.lr = finetune.lr;
  c.weights.inv = finetune.w_inv;
  c.missingness = finetune.missingness;
  if (c.missingness != "uniform" && c.missingness != "full") {
    throw ConfigError("config: finetune.missingness must be 'uniform' or 'full'");
  }
  return c;
}

ExperimentConfig experiment_from_toml(const std::string& text) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : parse_toml(text)) cfg.set(k, v);
  return cfg;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return experiment_from_toml(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_seed_override(ExperimentConfig& cfg) {
  const char* env = std::getenv("PUIR_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0' || errno == ERANGE || env[0] == '-') {
    throw ConfigError(std::string("PUIR_SEED='") + env + "' is not a non-negative integer");
  }
  cfg.seeds = {static_cast<std::uint64_t>(v)};
}

}  // namespace puir::config
