#include "rlqfs/cli/config.hpp"

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "rlqfs/errors.hpp"

namespace rlqfs::cli {
namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

[[noreturn]] void toml_error(std::size_t line, const std::string& msg) {
  throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

bool bare_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  }
  return true;
}

// Parses a basic string starting at s[0] == '"'; returns the value and sets
// `end` past the closing quote.
std::string parse_string(std::string_view s, std::size_t line, std::size_t& end) {
  std::string out;
  for (std::size_t i = 1; i < s.size(); ++i) {
    const char c = s[i];
    if (c == '"') {
      end = i + 1;
      return out;
    }
    if (c != '\\') {
      out.push_back(c);
      continue;
    }
    if (++i == s.size()) break;
    switch (s[i]) {
      case 'n': out.push_back('\n'); break;
      case 't': out.push_back('\t'); break;
      case '"': out.push_back('"'); break;
      case '\\': out.push_back('\\'); break;
      default: toml_error(line, std::string("unsupported escape \\") + s[i]);
    }
  }
  toml_error(line, "unterminated string");
}

TomlValue parse_value(std::string_view raw, std::size_t line) {
  TomlValue v;
  v.line = line;
  if (raw.empty()) toml_error(line, "missing value");
  std::string rest;
  if (raw.front() == '"') {
    std::size_t end = 0;
    v.text = parse_string(raw, line, end);
    rest = trim(raw.substr(end));
    if (!rest.empty() && rest.front() != '#') toml_error(line, "unexpected text after string");
    return v;
  }
  const auto hash = raw.find('#');
  const std::string tok = trim(raw.substr(0, hash));
  if (tok == "true" || tok == "false") {
    v.kind = TomlValue::Kind::Bool;
    v.text = tok;
    return v;
  }
  std::string digits;
  for (char c : tok) {
    if (c != '_') digits.push_back(c);
  }
  if (digits.empty()) toml_error(line, "missing value");
  long long iv = 0;
  auto [p, ec] = std::from_chars(digits.data() + (digits[0] == '+'), digits.data() + digits.size(), iv);
  if (ec == std::errc{} && p == digits.data() + digits.size()) {
    v.kind = TomlValue::Kind::Integer;
    v.text = std::to_string(iv);
    return v;
  }
  double dv = 0;
  auto [q, ec2] = std::from_chars(digits.data() + (digits[0] == '+'), digits.data() + digits.size(), dv);
  if (ec2 == std::errc{} && q == digits.data() + digits.size()) {
    v.kind = TomlValue::Kind::Real;
    v.text = digits[0] == '+' ? digits.substr(1) : digits;
    return v;
  }
  toml_error(line, "cannot parse value '" + tok + "' (strings need double quotes)");
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

double to_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

Preset to_preset(const std::string& key, const std::string& v) {
  const auto l = lower(v);
  if (l == "desk") return Preset::Desk;
  if (l == "paper") return Preset::Paper;
  throw ConfigError(key + ": unknown preset '" + v + "' (expected desk or paper)");
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& v)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto size_field = [&t](const std::string& k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) { member(c) = to_size(key, v); };
    };
    auto real_field = [&t](const std::string& k, auto member) {
      t[k] = [member](RunConfig& c, const std::string& key, const std::string& v) { member(c) = to_real(key, v); };
    };
    auto str_field = [&t](const std::string& k, auto member) {
      t[k] = [member](RunConfig& c, const std::string&, const std::string& v) { member(c) = v; };
    };
    size_field("model.d_model", [](RunConfig& c) -> std::size_t& { return c.model.d_model; });
    size_field("model.n_heads", [](RunConfig& c) -> std::size_t& { return c.model.n_heads; });
    size_field("model.n_enc_layers", [](RunConfig& c) -> std::size_t& { return c.model.n_enc_layers; });
    size_field("model.n_dec_layers", [](RunConfig& c) -> std::size_t& { return c.model.n_dec_layers; });
    size_field("model.ffn_dim", [](RunConfig& c) -> std::size_t& { return c.model.ffn_dim; });
    size_field("model.max_positions", [](RunConfig& c) -> std::size_t& { return c.model.max_positions; });
    real_field("model.dropout_p", [](RunConfig& c) -> double& { return c.model.dropout_p; });
    real_field("model.init_std", [](RunConfig& c) -> double& { return c.model.init_std; });

    size_field("gen.beam_size", [](RunConfig& c) -> std::size_t& { return c.gen.beam_size; });
    size_field("gen.min_tokens", [](RunConfig& c) -> std::size_t& { return c.gen.min_tokens; });
    size_field("gen.max_tokens", [](RunConfig& c) -> std::size_t& { return c.gen.max_tokens; });
    real_field("gen.gumbel_temperature", [](RunConfig& c) -> double& { return c.gen.gumbel_temperature; });
    real_field("gen.sampling_mix_prob", [](RunConfig& c) -> double& { return c.gen.sampling_mix_prob; });
    real_field("gen.length_penalty", [](RunConfig& c) -> double& { return c.gen.length_penalty; });
    real_field("gen.sample_temperature", [](RunConfig& c) -> double& { return c.gen.sample_temperature; });

    t["train.preset"] = [](RunConfig& c, const std::string& key, const std::string& v) { c.preset = to_preset(key, v); };
    t["train.seed"] = [](RunConfig& c, const std::string& key, const std::string& v) { c.seed = to_u64(key, v); };
    real_field("train.eta", [](RunConfig& c) -> double& { return c.loss.eta; });
    str_field("train.reward", [](RunConfig& c) -> std::string& { return c.reward; });
    t["train.rouge_variant"] = [](RunConfig& c, const std::string& key, const std::string& v) {
      const auto l = lower(v);
      if (l == "recall") c.loss.reward_spec.rouge_variant = rewards::RougeVariant::Recall;
      else if (l == "precision") c.loss.reward_spec.rouge_variant = rewards::RougeVariant::Precision;
      else if (l == "f") c.loss.reward_spec.rouge_variant = rewards::RougeVariant::F;
      else throw ConfigError(key + ": expected recall, precision or f");
    };
    t["train.bleu_smoothing"] = [](RunConfig& c, const std::string& key, const std::string& v) {
      const auto l = lower(v);
      if (l == "epsilon") c.loss.reward_spec.bleu_smoothing = rewards::BleuSmoothing::Epsilon;
      else if (l == "add_one") c.loss.reward_spec.bleu_smoothing = rewards::BleuSmoothing::AddOne;
      else throw ConfigError(key + ": expected epsilon or add_one");
    };
    real_field("train.clip_norm", [](RunConfig& c) -> double& { return c.loss.clip_norm; });
    t["train.optimizer"] = [](RunConfig& c, const std::string& key, const std::string& v) {
      const auto l = lower(v);
      if (l == "adam") c.optimizer.kind = nd::OptimizerKind::Adam;
      else if (l == "sgd") c.optimizer.kind = nd::OptimizerKind::SGD;
      else throw ConfigError(key + ": expected adam or sgd");
    };
    real_field("train.learning_rate", [](RunConfig& c) -> double& { return c.optimizer.learning_rate; });
    real_field("train.adam_beta1", [](RunConfig& c) -> double& { return c.optimizer.adam_beta1; });
    real_field("train.adam_beta2", [](RunConfig& c) -> double& { return c.optimizer.adam_beta2; });
    real_field("train.adam_eps", [](RunConfig& c) -> double& { return c.optimizer.adam_eps; });
    size_field("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.loop.batch_size; });
    size_field("train.epochs", [](RunConfig& c) -> std::size_t& { return c.loop.epochs; });
    size_field("train.max_steps", [](RunConfig& c) -> std::size_t& { return c.loop.max_steps; });
    size_field("train.mix_ramp_steps", [](RunConfig& c) -> std::size_t& { return c.loop.mix_ramp_steps; });
    size_field("train.max_summary_tokens", [](RunConfig& c) -> std::size_t& { return c.max_summary_tokens; });
    size_field("train.min_freq", [](RunConfig& c) -> std::size_t& { return c.min_freq; });
    size_field("train.checkpoint_every", [](RunConfig& c) -> std::size_t& { return c.checkpoint_every; });
    str_field("train.init_checkpoint", [](RunConfig& c) -> std::string& { return c.init_checkpoint; });
    str_field("train.resume", [](RunConfig& c) -> std::string& { return c.resume; });
    str_field("train.embedder_checkpoint", [](RunConfig& c) -> std::string& { return c.embedder_checkpoint; });
    str_field("train.embedder_vocab", [](RunConfig& c) -> std::string& { return c.embedder_vocab; });
    real_field("train.mlm_weight", [](RunConfig& c) -> double& { return c.mlm_weight; });

    str_field("data.train", [](RunConfig& c) -> std::string& { return c.train_path; });
    str_field("data.eval", [](RunConfig& c) -> std::string& { return c.eval_path; });
    str_field("data.vocab", [](RunConfig& c) -> std::string& { return c.vocab_path; });
    t["data.output_dir"] = [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; };
    return t;
  }();
  return table;
}

std::string canonical_key(const std::string& key) {
  if (key == "preset") return "train.preset";
  if (key == "seed") return "train.seed";
  return key;
}

void require_file(const std::string& key, const std::string& path) {
  if (path.empty()) return;
  if (!std::filesystem::is_regular_file(path)) throw ConfigError(key + ": file not found: " + path);
}

template <typename T>
void check_pin(const RunConfig& cfg, const std::string& key, const T& actual, const T& pinned) {
  for (const auto& k : cfg.explicit_keys) {
    if (k == key && !(actual == pinned)) {
      std::ostringstream os;
      os << key << ": pinned to " << pinned << " by the paper preset";
      throw ConfigError(os.str());
    }
  }
}

}  // namespace

std::map<std::string, TomlValue> parse_toml(const std::string& text) {
  std::map<std::string, TomlValue> out;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s.front() == '#') continue;
    if (s.front() == '[') {
      const auto close = s.find(']');
      if (close == std::string::npos) toml_error(line, "unterminated table header");
      const std::string after = trim(std::string_view(s).substr(close + 1));
      if (!after.empty() && after.front() != '#') toml_error(line, "unexpected text after table header");
      section = trim(std::string_view(s).substr(1, close - 1));
      if (!bare_key(section)) toml_error(line, "unsupported table name '" + section + "'");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) toml_error(line, "expected key = value");
    const std::string key = trim(std::string_view(s).substr(0, eq));
    if (!bare_key(key)) toml_error(line, "unsupported key '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (out.count(full)) toml_error(line, "duplicate key '" + full + "'");
    out[full] = parse_value(trim(std::string_view(s).substr(eq + 1)), line);
  }
  return out;
}

RunConfig preset_config(Preset p) {
  RunConfig c;
  c.preset = p;
  if (p == Preset::Paper) {
    c.loss.eta = 0.1;
    c.gen = decode::GenConfig::paper();
    c.optimizer.kind = nd::OptimizerKind::Adam;
    c.optimizer.learning_rate = 2e-5;
    c.loop.batch_size = 128;
    c.loop.epochs = 5;
  }
  return c;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto k = canonical_key(key);
  const auto& t = setters();
  auto it = t.find(k);
  if (it == t.end()) throw ConfigError(key + ": unknown setting");
  it->second(cfg, k, value);
  cfg.explicit_keys.push_back(k);
}

const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, _] : setters()) k.push_back(name);
    return k;
  }();
  return keys;
}

void validate(const RunConfig& cfg, Purpose purpose) {
  auto m = cfg.model;
  if (m.vocab_size == 0) m.vocab_size = corpus::kNumSpecial;
  m.validate();
  cfg.gen.validate();
  cfg.loss.validate();
  if (!(cfg.optimizer.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (cfg.loop.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (purpose == Purpose::TrainEmbedder && cfg.loop.batch_size < 2) {
    throw ConfigError("train.batch_size must be >= 2: in-batch negatives need a second pair");
  }
  if (cfg.loop.epochs == 0 && cfg.loop.max_steps == 0) {
    throw ConfigError("train.epochs: set epochs or max_steps to a positive value");
  }
  if (cfg.max_summary_tokens == 0) throw ConfigError("train.max_summary_tokens must be >= 1");
  if (cfg.min_freq == 0) throw ConfigError("train.min_freq must be >= 1");
  if (!(cfg.mlm_weight >= 0.0)) throw ConfigError("train.mlm_weight must be >= 0");
  if (cfg.preset == Preset::Paper) {
    const auto paper = decode::GenConfig::paper();
    check_pin(cfg, "train.eta", cfg.loss.eta, 0.1);
    check_pin(cfg, "gen.beam_size", cfg.gen.beam_size, paper.beam_size);
    check_pin(cfg, "gen.min_tokens", cfg.gen.min_tokens, paper.min_tokens);
    check_pin(cfg, "gen.max_tokens", cfg.gen.max_tokens, paper.max_tokens);
    check_pin(cfg, "train.optimizer", cfg.optimizer.kind == nd::OptimizerKind::Adam ? std::string("adam") : "sgd",
              std::string("adam"));
    check_pin(cfg, "train.batch_size", cfg.loop.batch_size, std::size_t{128});
    check_pin(cfg, "train.epochs", cfg.loop.epochs, std::size_t{5});
  }
  if (cfg.train_path.empty()) throw ConfigError("data.train: required");
  require_file("data.train", cfg.train_path);
  require_file("data.eval", cfg.eval_path);
  require_file("data.vocab", cfg.vocab_path);
  require_file("train.init_checkpoint", cfg.init_checkpoint);
  require_file("train.resume", cfg.resume);
  if (!cfg.init_checkpoint.empty() && !cfg.resume.empty()) {
    throw ConfigError("train.resume: cannot be combined with train.init_checkpoint");
  }
  if ((!cfg.init_checkpoint.empty() || !cfg.resume.empty()) && cfg.vocab_path.empty()) {
    throw ConfigError("data.vocab: required when starting from a checkpoint");
  }
  if (purpose == Purpose::TrainQfs && cfg.loss.uses_reward() && cfg.loss.reward_spec.needs_embedder()) {
    if (cfg.embedder_checkpoint.empty()) throw ConfigError("train.embedder_checkpoint: required by reward " + cfg.reward);
    if (cfg.embedder_vocab.empty()) throw ConfigError("train.embedder_vocab: required by reward " + cfg.reward);
  }
  require_file("train.embedder_checkpoint", cfg.embedder_checkpoint);
  require_file("train.embedder_vocab", cfg.embedder_vocab);
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                          Purpose purpose) {
  std::map<std::string, TomlValue> values;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("config: cannot read " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    values = parse_toml(ss.str());
  }
  std::vector<std::pair<std::string, std::string>> sets;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set " + o + ": expected key=value");
    sets.emplace_back(canonical_key(trim(o.substr(0, eq))), trim(o.substr(eq + 1)));
  }

  Preset preset = Preset::Desk;
  for (const auto& [k, v] : values) {
    if (canonical_key(k) == "train.preset") preset = to_preset(k, v.text);
  }
  for (const auto& [k, v] : sets) {
    if (k == "train.preset") preset = to_preset(k, v);
  }
  RunConfig cfg = preset_config(preset);
  for (const auto& [k, v] : values) {
    try {
      apply_setting(cfg, k, v.text);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()) + " (config line " + std::to_string(v.line) + ")");
    }
  }
  for (const auto& [k, v] : sets) apply_setting(cfg, k, v);
  if (const char* env = std::getenv("RLQFS_SEED")) {
    cfg.seed = to_u64("RLQFS_SEED", env);
    cfg.explicit_keys.push_back("train.seed");
  }
  if (cfg.loss.uses_reward() || !cfg.reward.empty()) {
    const auto variant = cfg.loss.reward_spec.rouge_variant;
    const auto smoothing = cfg.loss.reward_spec.bleu_smoothing;
    try {
      cfg.loss.reward_spec = rewards::parse_reward_spec(cfg.reward);
    } catch (const Error& e) {
      throw ConfigError(std::string("train.reward: ") + e.what());
    }
    cfg.loss.reward_spec.rouge_variant = variant;
    cfg.loss.reward_spec.bleu_smoothing = smoothing;
  }
  validate(cfg, purpose);
  return cfg;
}

}  // namespace rlqfs::cli
