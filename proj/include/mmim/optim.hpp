#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmim/params.hpp"

namespace mmim {

enum class OptAlgo { adamw, sgd };

std::string to_string(OptAlgo a);
OptAlgo opt_algo_from_string(const std::string& s);

struct OptimConfig {
  OptAlgo algorithm = OptAlgo::adamw;
  double peak_lr = 1e-4;
  size_t warmup_steps = 0;
  size_t total_steps = 1;
  double min_lr = 0.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.0;     // sgd only
  double stage_decay = 1.0;  // per-depth lr multiplier factor; 1 disables
  double ema_decay = 0.0;    // 0 disables
  double clip_norm = 0.0;    // global grad-norm clip; 0 disables

  void validate() const;
};

/// Linear warmup to peak_lr over warmup_steps, then cosine decay to min_lr
/// at total_steps. Steps past total_steps clamp to min_lr.
double lr_at(size_t step, const OptimConfig& cfg);

/// multiplier[i] = factor^(max_depth - depth_index[i]); the head (largest
/// index) gets exactly 1.
std::vector<double> stage_decay_multipliers(const std::vector<int>& depth_indices, double factor);

/// ema <- decay * ema + (1 - decay) * params, elementwise.
void ema_update(std::vector<double>& ema, const std::vector<double>& params, double decay);

struct AdamState {
  std::vector<double> m, v;
  uint64_t t = 0;
};

/// One bias-corrected AdamW update; decoupled decay uses the pre-step
/// weights and is skipped when apply_weight_decay is false.
void adamw_step(std::vector<double>& w, const std::vector<double>& g, AdamState& state, double lr,
                const OptimConfig& cfg, bool apply_weight_decay = true);

struct SgdState {
  std::vector<double> momentum;
};

void sgd_step(std::vector<double>& w, const std::vector<double>& g, SgdState& state, double lr,
              const OptimConfig& cfg, bool apply_weight_decay = true);

/// Drives a fixed set of parameters. Owns the moment buffers, the step
/// counter and the optional EMA shadow weights; all iteration follows the
/// parameter store order so updates are deterministic.
class Optimizer {
 public:
  Optimizer(ParamStore& params, OptimConfig cfg);

  void zero_grad();
  /// Applies one update using lr_at(completed steps + 1).
  void step();

  double current_lr() const { return last_lr_; }
  uint64_t step_count() const { return step_count_; }
  void set_step_count(uint64_t t);
  const OptimConfig& config() const { return cfg_; }
  bool has_ema() const { return cfg_.ema_decay > 0.0; }

  /// Copies EMA weights into the parameters (returns saved originals) and
  /// back; used to evaluate with averaged weights.
  std::vector<std::vector<double>> swap_in_ema();
  void swap_out_ema(std::vector<std::vector<double>>&& saved);

  /// Named state buffers for checkpointing, deterministic order.
  std::vector<std::pair<std::string, std::vector<double>*>> state_buffers();

 private:
  ParamStore& params_;
  OptimConfig cfg_;
  std::vector<AdamState> adam_;
  std::vector<SgdState> sgd_;
  std::vector<std::vector<double>> ema_;
  std::vector<double> stage_mult_;
  uint64_t step_count_ = 0;
  double last_lr_ = 0.0;
};

}  // namespace mmim
