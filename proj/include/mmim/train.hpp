#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmim/checkpoint.hpp"
#include "mmim/config.hpp"
#include "mmim/eval.hpp"

namespace mmim {

/// Exclusive ownership of a run directory via a .lock file; throws if
/// another writer holds it.
class RunLock {
 public:
  explicit RunLock(const std::string& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string lock_path_;
};

/// --out flag if given, else $MMIM_RUN_DIR, else "run".
std::string resolve_run_dir(const std::string& cli_value);

struct PretrainResult {
  std::vector<double> losses;  // one entry per step (batch mean)
  std::string checkpoint_path;
  uint64_t first_step = 0;
  uint64_t last_step = 0;
};

/// Masked-image-modelling pretraining over a manifest. Writes a loss log
/// (step, lr, loss[, per-modality]) and checkpoints under run_dir.
/// resume_path continues a saved run; stop_after_step, when nonzero, halts
/// early after that step (the final checkpoint still lands).
PretrainResult run_pretrain(const RunConfig& cfg, const std::string& manifest_path, const std::string& run_dir,
                            const std::string& resume_path = "", uint64_t stop_after_step = 0);

/// Linear probing / finetuning of a pretrained checkpoint on a labelled
/// manifest (stratified patient-level split). Writes metrics.tsv and one
/// adapted checkpoint per seed.
EvalReport run_adapt(const RunConfig& cfg, AdaptMode mode, const std::string& checkpoint_path,
                     const std::string& manifest_path, const std::string& run_dir);

/// Metrics for an adapted checkpoint (with its trained head) over every
/// labelled record of a manifest.
EvalReport run_eval(const std::string& checkpoint_path, const std::string& manifest_path,
                    const std::string& run_dir);

struct ReconstructOptions {
  double rho_oct = 0.85;
  double rho_ir = 0.65;
  uint64_t seed = 0;
  size_t count = 4;                 // manifest samples to render
  std::vector<std::string> images;  // explicit inputs instead of a manifest
};

/// Renders original | masked | reconstruction panels for inputs drawn from
/// a manifest (or explicit image paths). Multimodal checkpoints emit one
/// panel per modality. Returns the written paths.
std::vector<std::string> run_reconstruct(const std::string& checkpoint_path, const std::string& manifest_path,
                                         const ReconstructOptions& opts, const std::string& out_dir);

}  // namespace mmim
