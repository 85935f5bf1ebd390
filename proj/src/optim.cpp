#include "mmim/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mmim {

std::string to_string(OptAlgo a) { return a == OptAlgo::adamw ? "adamw" : "sgd"; }

OptAlgo opt_algo_from_string(const std::string& s) {
  if (s == "adamw") return OptAlgo::adamw;
  if (s == "sgd") return OptAlgo::sgd;
  throw std::invalid_argument("unknown optimizer: " + s);
}

void OptimConfig::validate() const {
  if (peak_lr <= 0.0) throw std::invalid_argument("optim config: peak_lr must be positive");
  if (warmup_steps > total_steps) throw std::invalid_argument("optim config: warmup_steps > total_steps");
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("optim config: betas must lie in (0,1)");
  }
  if (eps <= 0.0) throw std::invalid_argument("optim config: eps must be positive");
  if (min_lr < 0.0 || min_lr > peak_lr) throw std::invalid_argument("optim config: min_lr out of range");
  if (weight_decay < 0.0) throw std::invalid_argument("optim config: weight_decay must be >= 0");
  if (stage_decay <= 0.0 || stage_decay > 1.0) {
    throw std::invalid_argument("optim config: stage_decay must lie in (0,1]");
  }
  if (ema_decay < 0.0 || ema_decay >= 1.0) throw std::invalid_argument("optim config: ema_decay must be in [0,1)");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("optim config: momentum must be in [0,1)");
  if (clip_norm < 0.0) throw std::invalid_argument("optim config: clip_norm must be >= 0");
}

double lr_at(size_t step, const OptimConfig& cfg) {
  if (step > cfg.total_steps) return cfg.min_lr;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const size_t span = cfg.total_steps - cfg.warmup_steps;
  const double progress =
      span == 0 ? 1.0 : static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

std::vector<double> stage_decay_multipliers(const std::vector<int>& depth_indices, double factor) {
  if (factor <= 0.0 || factor > 1.0) {
    throw std::invalid_argument("stage_decay_multipliers: factor must lie in (0,1]");
  }
  int max_depth = 0;
  for (int d : depth_indices) max_depth = std::max(max_depth, d);
  std::vector<double> out(depth_indices.size());
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = std::pow(factor, static_cast<double>(max_depth - depth_indices[i]));
  }
  return out;
}

void ema_update(std::vector<double>& ema, const std::vector<double>& params, double decay) {
  if (ema.size() != params.size()) {
    throw std::invalid_argument("ema_update: size mismatch " + std::to_string(ema.size()) + " vs " +
                                std::to_string(params.size()));
  }
  for (size_t i = 0; i < ema.size(); ++i) ema[i] = decay * ema[i] + (1.0 - decay) * params[i];
}

void adamw_step(std::vector<double>& w, const std::vector<double>& g, AdamState& state, double lr,
                const OptimConfig& cfg, bool apply_weight_decay) {
  if (state.m.empty()) state.m.assign(w.size(), 0.0);
  if (state.v.empty()) state.v.assign(w.size(), 0.0);
  if (g.size() != w.size() || state.m.size() != w.size()) {
    throw std::invalid_argument("adamw_step: buffer size mismatch");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const double wd = apply_weight_decay ? cfg.weight_decay : 0.0;
  for (size_t i = 0; i < w.size(); ++i) {
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * w[i]);
  }
}

void sgd_step(std::vector<double>& w, const std::vector<double>& g, SgdState& state, double lr,
              const OptimConfig& cfg, bool apply_weight_decay) {
  if (g.size() != w.size()) throw std::invalid_argument("sgd_step: buffer size mismatch");
  const double wd = apply_weight_decay ? cfg.weight_decay : 0.0;
  if (cfg.momentum > 0.0) {
    if (state.momentum.empty()) state.momentum.assign(w.size(), 0.0);
    for (size_t i = 0; i < w.size(); ++i) {
      const double eff = g[i] + wd * w[i];
      state.momentum[i] = cfg.momentum * state.momentum[i] + eff;
      w[i] -= lr * state.momentum[i];
    }
  } else {
    for (size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + wd * w[i]);
  }
}

Optimizer::Optimizer(ParamStore& params, OptimConfig cfg) : params_(params), cfg_(cfg) {
  cfg_.validate();
  const auto& items = params_.items();
  if (cfg_.algorithm == OptAlgo::adamw) {
    adam_.resize(items.size());
  } else {
    sgd_.resize(items.size());
  }
  if (cfg_.ema_decay > 0.0) {
    ema_.reserve(items.size());
    for (const auto& p : items) ema_.push_back(p.tensor.vec());
  }
  std::vector<int> depths;
  depths.reserve(items.size());
  for (const auto& p : items) depths.push_back(p.depth_index);
  stage_mult_ = stage_decay_multipliers(depths, cfg_.stage_decay);
}

void Optimizer::zero_grad() { params_.zero_grads(); }

void Optimizer::step() {
  auto& items = params_.items();
  for (auto& p : items) {
    for (double v : p.tensor.grad()) {
      if (!std::isfinite(v)) throw std::runtime_error("optimizer: non-finite gradient in " + p.name);
    }
  }
  double clip_scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (auto& p : items) {
      for (double v : p.tensor.grad()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;
  }
  step_count_ += 1;
  last_lr_ = lr_at(step_count_, cfg_);
  for (size_t i = 0; i < items.size(); ++i) {
    auto& p = items[i];
    std::vector<double> g = p.tensor.grad();
    if (clip_scale != 1.0) {
      for (double& v : g) v *= clip_scale;
    }
    const double lr = last_lr_ * stage_mult_[i];
    if (cfg_.algorithm == OptAlgo::adamw) {
      adamw_step(p.tensor.vec(), g, adam_[i], lr, cfg_, p.weight_decay);
    } else {
      sgd_step(p.tensor.vec(), g, sgd_[i], lr, cfg_, p.weight_decay);
    }
    if (!ema_.empty()) ema_update(ema_[i], p.tensor.vec(), cfg_.ema_decay);
  }
}

void Optimizer::set_step_count(uint64_t t) {
  step_count_ = t;
  for (auto& s : adam_) s.t = t;
}

std::vector<std::vector<double>> Optimizer::swap_in_ema() {
  if (ema_.empty()) throw std::logic_error("swap_in_ema: ema not enabled");
  std::vector<std::vector<double>> saved;
  auto& items = params_.items();
  saved.reserve(items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    saved.push_back(items[i].tensor.vec());
    items[i].tensor.vec() = ema_[i];
  }
  return saved;
}

void Optimizer::swap_out_ema(std::vector<std::vector<double>>&& saved) {
  auto& items = params_.items();
  if (saved.size() != items.size()) throw std::invalid_argument("swap_out_ema: buffer count mismatch");
  for (size_t i = 0; i < items.size(); ++i) items[i].tensor.vec() = std::move(saved[i]);
}

std::vector<std::pair<std::string, std::vector<double>*>> Optimizer::state_buffers() {
  std::vector<std::pair<std::string, std::vector<double>*>> out;
  auto& items = params_.items();
  for (size_t i = 0; i < items.size(); ++i) {
    if (cfg_.algorithm == OptAlgo::adamw) {
      if (adam_[i].m.empty()) adam_[i].m.assign(items[i].tensor.size(), 0.0);
      if (adam_[i].v.empty()) adam_[i].v.assign(items[i].tensor.size(), 0.0);
      out.emplace_back("opt." + items[i].name + ".m", &adam_[i].m);
      out.emplace_back("opt." + items[i].name + ".v", &adam_[i].v);
    } else if (cfg_.momentum > 0.0) {
      if (sgd_[i].momentum.empty()) sgd_[i].momentum.assign(items[i].tensor.size(), 0.0);
      out.emplace_back("opt." + items[i].name + ".momentum", &sgd_[i].momentum);
    }
  }
  for (size_t i = 0; i < ema_.size(); ++i) {
    out.emplace_back("ema." + items[i].name, &ema_[i]);
  }
  return out;
}

}  // namespace mmim
