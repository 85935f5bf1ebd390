#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmim/data.hpp"
#include "mmim/metrics.hpp"
#include "mmim/mim.hpp"
#include "mmim/optim.hpp"

namespace mmim {

/// Arithmetic mean over the token axis.
Tensor pool_features(const TokenSequence& seq);

/// concat(pool(m1), pool(m2)), modality 1 first.
Tensor fuse_multimodal(const TokenSequence& desc1, const TokenSequence& desc2);

struct LinearHead {
  Linear fc;
  static LinearHead make(ParamStore& params, size_t in_dim, size_t num_classes, Rng& rng, int depth_index);
};

enum class AdaptMode { linear_probe, finetune };
enum class TaskInputs { oct_only, ir_only, fused };

std::string to_string(AdaptMode m);
std::string to_string(TaskInputs t);
AdaptMode adapt_mode_from_string(const std::string& s);
TaskInputs task_inputs_from_string(const std::string& s);

/// One labelled downstream sample; fused tasks need both images, unimodal
/// tasks exactly the matching one.
struct LabeledSample {
  std::optional<Image> oct;
  std::optional<Image> ir;
  int label = 0;
};

/// Builds samples from manifest records: unimodal tasks take every labelled
/// record of that modality, fused tasks one sample per (patient, eye, visit)
/// pair. Images are loaded from disk.
std::vector<LabeledSample> collect_samples(const std::vector<ManifestRecord>& records, TaskInputs inputs);

struct EvalConfig {
  AdaptMode mode = AdaptMode::linear_probe;
  TaskInputs inputs = TaskInputs::oct_only;
  int num_classes = 2;
  size_t steps = 200;
  size_t batch_size = 8;
  OptimConfig optim;
  std::vector<uint64_t> seeds = {0, 1, 2};
};

struct MetricStats {
  double mean = 0.0;
  double stddev = 0.0;
  size_t n_seeds = 0;
};

struct EvalReport {
  std::map<std::string, MetricStats> metrics;
  std::vector<std::map<std::string, double>> per_seed;
  std::string backbone_digest_before;
  std::string backbone_digest_after;  // after the last seed's run
};

/// Filter selecting backbone parameters (everything but adaptation heads
/// and pretraining decoders).
bool is_backbone_param(const std::string& name);

/// Trains a fresh linear head per seed (probing freezes the backbone,
/// digest-checked; finetuning updates everything) and evaluates on the test
/// samples. Parameters are restored to their incoming state between seeds;
/// after return the model carries the last seed's trained state.
/// on_seed_complete, when given, runs before that restore.
EvalReport run_adaptation(
    MimModel& model, const std::vector<LabeledSample>& train, const std::vector<LabeledSample>& test,
    const EvalConfig& cfg,
    const std::function<void(uint64_t seed, MimModel& model, ParamStore& head)>& on_seed_complete = nullptr);

/// One record per metric: name, mean, std, n_seeds. Tab-separated.
std::string format_report(const EvalReport& report);

}  // namespace mmim
