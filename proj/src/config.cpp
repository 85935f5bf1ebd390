#include "mmim/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace mmim {

namespace {

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

size_t parse_size(const std::string& v) {
  size_t pos = 0;
  const long long x = std::stoll(v, &pos);
  if (pos != v.size() || x < 0) throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  return static_cast<size_t>(x);
}

int parse_int(const std::string& v) {
  size_t pos = 0;
  const int x = std::stoi(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
  return x;
}

uint64_t parse_u64(const std::string& v) {
  size_t pos = 0;
  const unsigned long long x = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected an unsigned integer, got '" + v + "'");
  return x;
}

double parse_double(const std::string& v) {
  size_t pos = 0;
  const double x = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("expected a number, got '" + v + "'");
  return x;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("expected true/false, got '" + v + "'");
}

#define KEY_SIZE(field) \
  Key{#field, [](RunConfig& c, const std::string& v) { c.field = parse_size(v); }, \
      [](const RunConfig& c) { return std::to_string(c.field); }}
#define KEY_INT(field) \
  Key{#field, [](RunConfig& c, const std::string& v) { c.field = parse_int(v); }, \
      [](const RunConfig& c) { return std::to_string(c.field); }}
#define KEY_U64(field) \
  Key{#field, [](RunConfig& c, const std::string& v) { c.field = parse_u64(v); }, \
      [](const RunConfig& c) { return std::to_string(c.field); }}
#define KEY_DOUBLE(field) \
  Key{#field, [](RunConfig& c, const std::string& v) { c.field = parse_double(v); }, \
      [](const RunConfig& c) { return fmt_double(c.field); }}
#define KEY_BOOL(field) \
  Key{#field, [](RunConfig& c, const std::string& v) { c.field = parse_bool(v); }, \
      [](const RunConfig& c) { return c.field ? "true" : "false"; }}
#define KEY_STRING(field) \
  Key{#field, [](RunConfig& c, const std::string& v) { c.field = v; }, \
      [](const RunConfig& c) { return c.field; }}

const std::vector<Key>& key_table() {
  static const std::vector<Key> keys = {
      KEY_INT(config_version),
      KEY_SIZE(image_size),
      KEY_SIZE(patch),
      KEY_SIZE(depth),
      KEY_SIZE(width),
      KEY_SIZE(heads),
      KEY_DOUBLE(mlp_ratio),
      KEY_SIZE(decoder_depth),
      KEY_SIZE(decoder_width),
      KEY_SIZE(decoder_heads),
      KEY_SIZE(channels),
      KEY_DOUBLE(ln_eps),
      KEY_STRING(decoder_mode),
      KEY_STRING(modalities),
      KEY_DOUBLE(mask_ratio_oct),
      KEY_DOUBLE(mask_ratio_ir),
      KEY_BOOL(fixed_count_masking),
      KEY_BOOL(normalized_targets),
      KEY_BOOL(recon_show_original_visible),
      KEY_STRING(dtype),
      KEY_STRING(optimizer),
      KEY_DOUBLE(peak_lr),
      KEY_SIZE(warmup_steps),
      KEY_SIZE(steps),
      KEY_DOUBLE(min_lr),
      KEY_DOUBLE(weight_decay),
      KEY_DOUBLE(beta1),
      KEY_DOUBLE(beta2),
      KEY_DOUBLE(adam_eps),
      KEY_DOUBLE(momentum),
      KEY_DOUBLE(stage_decay),
      KEY_DOUBLE(ema_decay),
      KEY_DOUBLE(clip_norm),
      KEY_SIZE(batch_size),
      KEY_SIZE(checkpoint_every),
      KEY_DOUBLE(split_train),
      KEY_DOUBLE(split_val),
      KEY_DOUBLE(split_test),
      KEY_SIZE(eval_seeds),
      KEY_SIZE(head_steps),
      KEY_DOUBLE(head_lr),
      KEY_SIZE(head_batch_size),
      KEY_INT(num_classes),
      KEY_DOUBLE(multilabel_threshold),
      KEY_U64(seed),
  };
  return keys;
}

#undef KEY_SIZE
#undef KEY_INT
#undef KEY_U64
#undef KEY_DOUBLE
#undef KEY_BOOL
#undef KEY_STRING

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::validate() const {
  if (config_version != 1) {
    throw std::invalid_argument("config: unsupported config_version " + std::to_string(config_version));
  }
  mim_config().vit.validate();
  optim_config().validate();
  if (image_size % patch != 0) {
    throw std::invalid_argument("config: image_size " + std::to_string(image_size) +
                                " not divisible by patch " + std::to_string(patch));
  }
  if (mask_ratio_oct < 0.0 || mask_ratio_oct > 1.0 || mask_ratio_ir < 0.0 || mask_ratio_ir > 1.0) {
    throw std::invalid_argument("config: mask ratios must lie in [0,1]");
  }
  if (dtype != "f64" && dtype != "f32") throw std::invalid_argument("config: dtype must be f64 or f32");
  if (modalities != "oct" && modalities != "ir" && modalities != "oct,ir") {
    throw std::invalid_argument("config: modalities must be oct, ir or oct,ir");
  }
  const DecoderMode mode = decoder_mode_from_string(decoder_mode);
  const bool paired = modalities == "oct,ir";
  if (mode == DecoderMode::unimodal && paired) {
    throw std::invalid_argument("config: decoder_mode unimodal cannot train on oct,ir pairs");
  }
  if (mode != DecoderMode::unimodal && !paired) {
    throw std::invalid_argument("config: decoder_mode " + decoder_mode + " needs modalities oct,ir");
  }
  if (std::abs(split_train + split_val + split_test - 1.0) > 1e-9) {
    throw std::invalid_argument("config: split fractions must sum to 1");
  }
  if (batch_size == 0 || head_batch_size == 0) throw std::invalid_argument("config: batch sizes must be positive");
  if (eval_seeds == 0) throw std::invalid_argument("config: eval_seeds must be positive");
  if (num_classes < 2) throw std::invalid_argument("config: num_classes must be at least 2");
  if (steps == 0 || head_steps == 0) throw std::invalid_argument("config: step counts must be positive");
}

MimConfig RunConfig::mim_config() const {
  MimConfig m;
  m.vit.depth = depth;
  m.vit.heads = heads;
  m.vit.width = width;
  m.vit.mlp_ratio = mlp_ratio;
  m.vit.patch = patch;
  m.vit.channels = channels;
  m.vit.decoder_depth = decoder_depth;
  m.vit.decoder_width = decoder_width;
  m.vit.decoder_heads = decoder_heads;
  m.vit.ln_eps = ln_eps;
  m.mode = decoder_mode_from_string(decoder_mode);
  m.fixed_count_masking = fixed_count_masking;
  m.normalized_targets = normalized_targets;
  m.recon_show_original_visible = recon_show_original_visible;
  return m;
}

OptimConfig RunConfig::optim_config() const {
  OptimConfig o;
  o.algorithm = opt_algo_from_string(optimizer);
  o.peak_lr = peak_lr;
  o.warmup_steps = warmup_steps;
  o.total_steps = steps;
  o.min_lr = min_lr;
  o.weight_decay = weight_decay;
  o.beta1 = beta1;
  o.beta2 = beta2;
  o.eps = adam_eps;
  o.momentum = momentum;
  o.stage_decay = stage_decay;
  o.ema_decay = ema_decay;
  o.clip_norm = clip_norm;
  return o;
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    bool found = false;
    for (const auto& k : key_table()) {
      if (k.name == key) {
        try {
          k.set(cfg, value);
        } catch (const std::exception& e) {
          throw std::invalid_argument("config key '" + key + "': " + e.what());
        }
        found = true;
        break;
      }
    }
    if (!found) throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : key_table()) os << k.name << " = " << k.get(cfg) << "\n";
  return os.str();
}

}  // namespace mmim
