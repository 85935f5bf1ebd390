#pragma once

#include <cstdint>
#include <string>

#include "mmim/mim.hpp"
#include "mmim/optim.hpp"

namespace mmim {

/// Whole-run configuration. Serialized as `key = value` lines; unknown keys
/// are rejected, missing keys keep these defaults. Paper-scale settings
/// (batch 1024, hundreds of epochs, 224x224 inputs) are reachable through
/// the same keys; the defaults are sized for quick local runs.
struct RunConfig {
  int config_version = 1;

  // model
  size_t image_size = 32;
  size_t patch = 8;
  size_t depth = 2;
  size_t width = 64;
  size_t heads = 4;
  double mlp_ratio = 4.0;
  size_t decoder_depth = 2;
  size_t decoder_width = 128;
  size_t decoder_heads = 4;
  size_t channels = 1;
  double ln_eps = 1e-6;
  std::string decoder_mode = "unimodal";  // unimodal | joint | separate
  std::string modalities = "oct";         // oct | ir | oct,ir
  double mask_ratio_oct = 0.85;
  double mask_ratio_ir = 0.65;
  bool fixed_count_masking = false;
  bool normalized_targets = false;
  bool recon_show_original_visible = true;
  std::string dtype = "f64";  // f64 | f32

  // optimization
  std::string optimizer = "adamw";
  double peak_lr = 1e-4;
  size_t warmup_steps = 10;
  size_t steps = 200;
  double min_lr = 0.0;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double momentum = 0.0;
  double stage_decay = 1.0;
  double ema_decay = 0.0;
  double clip_norm = 0.0;
  size_t batch_size = 8;
  size_t checkpoint_every = 0;  // 0 = final checkpoint only

  // data splitting
  double split_train = 0.8;
  double split_val = 0.1;
  double split_test = 0.1;

  // downstream adaptation
  size_t eval_seeds = 3;
  size_t head_steps = 200;
  double head_lr = 1e-2;
  size_t head_batch_size = 16;
  int num_classes = 2;
  double multilabel_threshold = 0.0;

  uint64_t seed = 0;

  void validate() const;
  MimConfig mim_config() const;
  OptimConfig optim_config() const;
};

/// Parses `key = value` text ('#' comments). Throws on unknown keys or
/// unparsable values.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::string& path);

/// Canonical serialization: fixed key order, full double precision.
/// parse(serialize(c)) == c.
std::string serialize_config(const RunConfig& cfg);

}  // namespace mmim
