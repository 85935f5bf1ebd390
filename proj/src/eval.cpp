#include "mmim/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mmim/digest.hpp"

namespace mmim {

Tensor pool_features(const TokenSequence& seq) {
  if (seq.length() == 0) throw std::invalid_argument("pool_features: empty sequence");
  return mean_axis0(seq.tokens);
}

Tensor fuse_multimodal(const TokenSequence& desc1, const TokenSequence& desc2) {
  if (desc1.length() == 0 || desc2.length() == 0) {
    throw std::invalid_argument("fuse_multimodal: both sequences must be non-empty");
  }
  return concat_rows(pool_features(desc1), pool_features(desc2));
}

LinearHead LinearHead::make(ParamStore& params, size_t in_dim, size_t num_classes, Rng& rng,
                            int depth_index) {
  LinearHead h;
  h.fc = Linear::make(params, "head", in_dim, num_classes, rng, depth_index);
  return h;
}

std::string to_string(AdaptMode m) { return m == AdaptMode::linear_probe ? "linear_probe" : "finetune"; }

std::string to_string(TaskInputs t) {
  switch (t) {
    case TaskInputs::oct_only: return "oct";
    case TaskInputs::ir_only: return "ir";
    case TaskInputs::fused: return "oct,ir";
  }
  return "oct";
}

AdaptMode adapt_mode_from_string(const std::string& s) {
  if (s == "linear_probe" || s == "probe") return AdaptMode::linear_probe;
  if (s == "finetune") return AdaptMode::finetune;
  throw std::invalid_argument("unknown adaptation mode: " + s);
}

TaskInputs task_inputs_from_string(const std::string& s) {
  if (s == "oct") return TaskInputs::oct_only;
  if (s == "ir") return TaskInputs::ir_only;
  if (s == "oct,ir" || s == "ir,oct") return TaskInputs::fused;
  throw std::invalid_argument("unknown modality selection: " + s);
}

std::vector<LabeledSample> collect_samples(const std::vector<ManifestRecord>& records, TaskInputs inputs) {
  std::vector<LabeledSample> samples;
  if (inputs == TaskInputs::fused) {
    PairReport pairs = build_pairs(records);
    for (const auto& [oct_rec, ir_rec] : pairs.pairs) {
      if (!oct_rec.has_label()) continue;
      LabeledSample s;
      s.oct = load_image(oct_rec.image_path);
      s.ir = load_image(ir_rec.image_path);
      s.label = oct_rec.class_label();
      samples.push_back(std::move(s));
    }
  } else {
    const Modality want = inputs == TaskInputs::oct_only ? Modality::oct : Modality::ir;
    for (const auto& rec : records) {
      if (rec.modality != want || !rec.has_label()) continue;
      LabeledSample s;
      if (want == Modality::oct) {
        s.oct = load_image(rec.image_path);
      } else {
        s.ir = load_image(rec.image_path);
      }
      s.label = rec.class_label();
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

bool is_backbone_param(const std::string& name) {
  return name.rfind("head", 0) != 0 && !MimModel::is_decoder_param(name);
}

namespace {

// Pooled (or fused) feature vector for one sample. A fused head evaluated
// with a missing modality gets zeros for the absent half.
Tensor sample_features(const MimModel& model, const LabeledSample& s, TaskInputs inputs) {
  const Image* oct = s.oct ? &*s.oct : nullptr;
  const Image* ir = s.ir ? &*s.ir : nullptr;
  switch (inputs) {
    case TaskInputs::oct_only: {
      if (!oct) throw std::invalid_argument("sample has no oct image");
      EncodedFeatures f = encode_features(model, oct, nullptr);
      return pool_features(*f.m1);
    }
    case TaskInputs::ir_only: {
      if (!ir) throw std::invalid_argument("sample has no ir image");
      EncodedFeatures f = model.config.mode == DecoderMode::unimodal ? encode_features(model, ir, nullptr)
                                                                     : encode_features(model, nullptr, ir);
      return pool_features(f.m2 ? *f.m2 : *f.m1);
    }
    case TaskInputs::fused: {
      if (!oct && !ir) throw std::invalid_argument("sample has no images");
      const size_t D = model.width();
      if (oct && ir) {
        EncodedFeatures f = encode_features(model, oct, ir);
        return fuse_multimodal(*f.m1, *f.m2);
      }
      EncodedFeatures f = encode_features(model, oct, ir);
      Tensor zeros = Tensor::zeros({D});
      return oct ? concat_rows(pool_features(*f.m1), zeros) : concat_rows(zeros, pool_features(*f.m2));
    }
  }
  throw std::logic_error("unreachable");
}

struct SeedEval {
  std::map<std::string, double> metrics;
};

std::vector<size_t> batch_indices(size_t n, size_t batch, size_t step, uint64_t seed) {
  // Stateless: the permutation is a pure function of (seed, epoch).
  const size_t per_epoch = (n + batch - 1) / batch;
  const size_t epoch = step / per_epoch;
  const size_t offset = (step % per_epoch) * batch;
  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), size_t{0});
  Rng rng(mix_seed(seed, 0xba7c4, epoch));
  rng.shuffle(perm);
  std::vector<size_t> out;
  for (size_t i = offset; i < std::min(offset + batch, n); ++i) out.push_back(perm[i]);
  return out;
}

SeedEval evaluate_predictions(const std::vector<int>& labels, const std::vector<int>& preds,
                              const std::vector<double>& pos_scores, int num_classes) {
  SeedEval ev;
  ev.metrics["accuracy"] = metric_accuracy(labels, preds);
  ev.metrics["macro_f1"] = metric_macro_f1(labels, preds, num_classes);
  ev.metrics["micro_f1"] = metric_micro_f1(labels, preds, num_classes);
  // Ranking metrics need both classes in the evaluation set.
  const bool has_pos = std::count(labels.begin(), labels.end(), 1) > 0;
  const bool has_neg = std::count(labels.begin(), labels.end(), 0) > 0;
  if (num_classes == 2 && has_pos && has_neg) {
    ev.metrics["roc_auc"] = metric_roc_auc(labels, pos_scores);
    ev.metrics["pr_auc"] = metric_pr_auc(labels, pos_scores);
  }
  return ev;
}

}  // namespace

EvalReport run_adaptation(MimModel& model, const std::vector<LabeledSample>& train,
                          const std::vector<LabeledSample>& test, const EvalConfig& cfg,
                          const std::function<void(uint64_t, MimModel&, ParamStore&)>& on_seed_complete) {
  if (train.empty() || test.empty()) throw std::invalid_argument("run_adaptation: empty train or test set");
  if (cfg.num_classes < 2) throw std::invalid_argument("run_adaptation: need at least 2 classes");
  if (cfg.seeds.empty()) throw std::invalid_argument("run_adaptation: no seeds");
  for (const auto& s : train) {
    if (s.label < 0 || s.label >= cfg.num_classes) {
      throw std::invalid_argument("run_adaptation: label " + std::to_string(s.label) + " outside " +
                                  std::to_string(cfg.num_classes) + " classes");
    }
  }

  const size_t feat_dim = cfg.inputs == TaskInputs::fused ? 2 * model.width() : model.width();

  // Incoming parameter state; every seed starts from here.
  std::vector<std::vector<double>> snapshot;
  snapshot.reserve(model.params.items().size());
  for (const auto& p : model.params.items()) snapshot.push_back(p.tensor.vec());
  auto restore = [&] {
    auto& items = model.params.items();
    for (size_t i = 0; i < items.size(); ++i) items[i].tensor.vec() = snapshot[i];
  };

  EvalReport report;
  report.backbone_digest_before = digest_params(model.params, is_backbone_param);

  for (size_t si = 0; si < cfg.seeds.size(); ++si) {
    const uint64_t seed = cfg.seeds[si];
    restore();
    Rng head_rng(mix_seed(seed, 0x4ead));
    ParamStore head_store;
    int max_depth = 0;
    for (const auto& p : model.params.items()) max_depth = std::max(max_depth, p.depth_index);
    LinearHead head = LinearHead::make(head_store, feat_dim, static_cast<size_t>(cfg.num_classes), head_rng,
                                       max_depth + 1);

    // Trainable set: probe updates only the head, finetune shares the
    // backbone tensors into the same store.
    ParamStore train_store;
    if (cfg.mode == AdaptMode::finetune) {
      for (const auto& p : model.params.items()) {
        if (MimModel::is_decoder_param(p.name)) continue;  // decoders are dropped downstream
        train_store.add(p.name, p.tensor, p.weight_decay, p.depth_index);
      }
    }
    for (const auto& p : head_store.items()) {
      train_store.add(p.name, p.tensor, p.weight_decay, max_depth + 1);
    }

    OptimConfig ocfg = cfg.optim;
    ocfg.total_steps = cfg.steps;
    Optimizer opt(train_store, ocfg);

    // Probing trains on frozen features, so compute them once.
    std::vector<std::vector<double>> train_feats, test_feats;
    if (cfg.mode == AdaptMode::linear_probe) {
      NoGradGuard ng;
      for (const auto& s : train) train_feats.push_back(sample_features(model, s, cfg.inputs).vec());
      for (const auto& s : test) test_feats.push_back(sample_features(model, s, cfg.inputs).vec());
    }

    for (size_t step = 0; step < cfg.steps; ++step) {
      const auto idx = batch_indices(train.size(), cfg.batch_size, step, seed);
      if (idx.empty()) continue;
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (size_t i : idx) labels.push_back(train[i].label);

      opt.zero_grad();
      Tensor logits;
      if (cfg.mode == AdaptMode::linear_probe) {
        std::vector<double> flat;
        flat.reserve(idx.size() * feat_dim);
        for (size_t i : idx) {
          flat.insert(flat.end(), train_feats[i].begin(), train_feats[i].end());
        }
        Tensor batch = Tensor::from_data({idx.size(), feat_dim}, std::move(flat));
        logits = head.fc(batch);
      } else {
        std::optional<Tensor> stacked;
        for (size_t i : idx) {
          Tensor f = reshape(sample_features(model, train[i], cfg.inputs), {size_t{1}, feat_dim});
          stacked = stacked ? concat_rows(*stacked, f) : f;
        }
        logits = head.fc(*stacked);
      }
      backward(cross_entropy(logits, labels));
      opt.step();
    }

    // Evaluate (with EMA weights when enabled).
    std::vector<std::vector<double>> saved_ema;
    if (opt.has_ema()) saved_ema = opt.swap_in_ema();
    std::vector<int> labels, preds;
    std::vector<double> pos_scores;
    {
      NoGradGuard ng;
      for (size_t i = 0; i < test.size(); ++i) {
        Tensor f = cfg.mode == AdaptMode::linear_probe
                       ? Tensor::from_data({test_feats[i].size()}, test_feats[i])
                       : sample_features(model, test[i], cfg.inputs);
        Tensor logits = head.fc(reshape(f, {size_t{1}, feat_dim}));
        Tensor probs = softmax_lastdim(logits);
        size_t best = 0;
        for (size_t c = 1; c < static_cast<size_t>(cfg.num_classes); ++c) {
          if (probs.vec()[c] > probs.vec()[best]) best = c;
        }
        labels.push_back(test[i].label);
        preds.push_back(static_cast<int>(best));
        pos_scores.push_back(probs.vec()[1]);
      }
    }
    SeedEval ev = evaluate_predictions(labels, preds, pos_scores, cfg.num_classes);
    report.per_seed.push_back(ev.metrics);

    if (cfg.mode == AdaptMode::linear_probe) {
      const std::string after = digest_params(model.params, is_backbone_param);
      if (after != report.backbone_digest_before) {
        throw std::runtime_error("linear probe modified backbone parameters");
      }
    }
    report.backbone_digest_after = digest_params(model.params, is_backbone_param);
    if (on_seed_complete) on_seed_complete(seed, model, head_store);
    if (opt.has_ema() && !saved_ema.empty()) opt.swap_out_ema(std::move(saved_ema));
  }

  // Aggregate mean and sample standard deviation per metric.
  for (const auto& [name, value] : report.per_seed.front()) {
    (void)value;
    MetricStats stats;
    stats.n_seeds = report.per_seed.size();
    double sum = 0.0;
    for (const auto& seed_metrics : report.per_seed) sum += seed_metrics.at(name);
    stats.mean = sum / static_cast<double>(stats.n_seeds);
    double sq = 0.0;
    for (const auto& seed_metrics : report.per_seed) {
      const double d = seed_metrics.at(name) - stats.mean;
      sq += d * d;
    }
    stats.stddev = stats.n_seeds > 1 ? std::sqrt(sq / static_cast<double>(stats.n_seeds - 1)) : 0.0;
    report.metrics[name] = stats;
  }
  return report;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream os;
  os << "# metric\tmean\tstd\tn_seeds\n";
  os.precision(6);
  os << std::fixed;
  for (const auto& [name, stats] : report.metrics) {
    os << name << '\t' << stats.mean << '\t' << stats.stddev << '\t' << stats.n_seeds << '\n';
  }
  return os.str();
}

}  // namespace mmim
