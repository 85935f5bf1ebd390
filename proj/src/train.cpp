#include "mmim/train.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mmim/digest.hpp"

namespace fs = std::filesystem;

namespace mmim {

RunLock::RunLock(const std::string& run_dir) {
  fs::create_directories(run_dir);
  lock_path_ = (fs::path(run_dir) / ".lock").string();
  const int fd = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw std::runtime_error("run directory is locked by another process (remove " + lock_path_ +
                             " if stale)");
  }
  ::close(fd);
}

RunLock::~RunLock() { ::unlink(lock_path_.c_str()); }

std::string resolve_run_dir(const std::string& cli_value) {
  if (!cli_value.empty()) return cli_value;
  if (const char* env = std::getenv("MMIM_RUN_DIR"); env && *env) return env;
  return "run";
}

namespace {

struct PrecisionGuard {
  Precision prev;
  explicit PrecisionGuard(const std::string& dtype) : prev(compute_precision()) {
    set_compute_precision(dtype == "f32" ? Precision::f32 : Precision::f64);
  }
  ~PrecisionGuard() { set_compute_precision(prev); }
};

std::vector<size_t> step_batch(size_t n, size_t batch, uint64_t step, uint64_t seed) {
  const size_t per_epoch = (n + batch - 1) / batch;
  const size_t epoch = step / per_epoch;
  const size_t offset = (step % per_epoch) * batch;
  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), size_t{0});
  Rng rng(mix_seed(seed, 0xe90c4, epoch));
  rng.shuffle(perm);
  std::vector<size_t> out;
  for (size_t i = offset; i < std::min(offset + batch, n); ++i) out.push_back(perm[i]);
  return out;
}

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

PretrainResult run_pretrain(const RunConfig& cfg, const std::string& manifest_path, const std::string& run_dir,
                            const std::string& resume_path, uint64_t stop_after_step) {
  cfg.validate();
  RunLock lock(run_dir);
  PrecisionGuard precision(cfg.dtype);

  const bool paired = cfg.modalities == "oct,ir";
  const auto records = load_manifest(manifest_path);

  std::vector<Image> singles;
  std::vector<std::pair<Image, Image>> pairs;
  if (paired) {
    PairReport report = build_pairs(records);
    for (const auto& [oct_rec, ir_rec] : report.pairs) {
      pairs.emplace_back(load_image(oct_rec.image_path), load_image(ir_rec.image_path));
    }
    if (pairs.empty()) throw std::runtime_error("pretrain: no paired oct/ir samples in " + manifest_path);
  } else {
    const Modality want = modality_from_string(cfg.modalities);
    for (const auto& r : records) {
      if (r.modality == want) singles.push_back(load_image(r.image_path));
    }
    if (singles.empty()) {
      throw std::runtime_error("pretrain: no " + cfg.modalities + " images in " + manifest_path);
    }
  }
  const size_t dataset_size = paired ? pairs.size() : singles.size();

  uint64_t start_step = 0;
  Rng run_rng(cfg.seed);
  MimModel model = MimModel::make(cfg.mim_config(), cfg.seed);
  Optimizer opt(model.params, cfg.optim_config());
  if (!resume_path.empty()) {
    Checkpoint ckpt = load_checkpoint(resume_path);
    if (ckpt.config_text != serialize_config(cfg)) {
      throw std::runtime_error("resume: checkpoint config does not match the requested config");
    }
    load_into_params(ckpt.model, model.params);
    load_optimizer_state(ckpt, opt);
    run_rng = Rng::deserialize(ckpt.rng_state);
    start_step = ckpt.step;
  }

  const std::string log_path = (fs::path(run_dir) / "loss_log.txt").string();
  std::ofstream log(log_path, start_step == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write loss log: " + log_path);
  if (start_step == 0) {
    log << (paired ? "# step lr loss loss_oct loss_ir" : "# step lr loss") << '\n';
  }

  const uint64_t end_step =
      stop_after_step > 0 ? std::min<uint64_t>(stop_after_step, cfg.steps) : cfg.steps;

  PretrainResult result;
  result.first_step = start_step;
  auto save_at = [&](const std::string& path, uint64_t step) {
    save_checkpoint(checkpoint_from(cfg, model, &opt, run_rng, step), path);
  };

  for (uint64_t step = start_step; step < end_step; ++step) {
    const auto batch = step_batch(dataset_size, cfg.batch_size, step, cfg.seed);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    opt.zero_grad();
    double loss_sum = 0.0, loss1_sum = 0.0, loss2_sum = 0.0;
    for (size_t slot = 0; slot < batch.size(); ++slot) {
      const uint64_t sample_seed = mix_seed(cfg.seed, 0x57e9, step, slot);
      StepOutput out;
      if (paired) {
        const auto& [oct_img, ir_img] = pairs[batch[slot]];
        out = forward_multimodal(model, oct_img, ir_img, cfg.mask_ratio_oct, cfg.mask_ratio_ir, sample_seed);
        loss1_sum += out.loss1.item();
        loss2_sum += out.loss2.item();
      } else {
        const double rho = cfg.modalities == "ir" ? cfg.mask_ratio_ir : cfg.mask_ratio_oct;
        out = forward_unimodal(model, singles[batch[slot]], rho, sample_seed);
      }
      loss_sum += out.loss.item();
      backward(scalar_mul(out.loss, inv_batch));
    }
    opt.step();

    const double mean_loss = loss_sum * inv_batch;
    result.losses.push_back(mean_loss);
    log << step << ' ' << fmt_g17(opt.current_lr()) << ' ' << fmt_g17(mean_loss);
    if (paired) log << ' ' << fmt_g17(loss1_sum * inv_batch) << ' ' << fmt_g17(loss2_sum * inv_batch);
    log << '\n';
    log.flush();

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) {
      save_at((fs::path(run_dir) / ("ckpt_step" + std::to_string(step + 1) + ".mmim")).string(), step + 1);
    }
    result.last_step = step;
  }

  result.checkpoint_path = (fs::path(run_dir) / "checkpoint.mmim").string();
  save_at(result.checkpoint_path, end_step);
  return result;
}

namespace {

RunConfig adapted_config(const RunConfig& model_cfg, const RunConfig& task_cfg) {
  RunConfig cfg = model_cfg;
  cfg.modalities = task_cfg.modalities;
  cfg.num_classes = task_cfg.num_classes;
  cfg.eval_seeds = task_cfg.eval_seeds;
  cfg.head_steps = task_cfg.head_steps;
  cfg.head_lr = task_cfg.head_lr;
  cfg.head_batch_size = task_cfg.head_batch_size;
  return cfg;
}

EvalConfig eval_config_for(const RunConfig& cfg, AdaptMode mode, TaskInputs inputs) {
  EvalConfig ec;
  ec.mode = mode;
  ec.inputs = inputs;
  ec.num_classes = cfg.num_classes;
  ec.steps = cfg.head_steps;
  ec.batch_size = cfg.head_batch_size;
  ec.seeds.clear();
  for (size_t s = 0; s < cfg.eval_seeds; ++s) ec.seeds.push_back(s);
  ec.optim = cfg.optim_config();
  ec.optim.total_steps = cfg.head_steps;
  ec.optim.warmup_steps = std::min(cfg.warmup_steps, cfg.head_steps / 10);
  ec.optim.peak_lr = mode == AdaptMode::linear_probe ? cfg.head_lr : cfg.peak_lr;
  if (mode == AdaptMode::linear_probe) ec.optim.stage_decay = 1.0;
  return ec;
}

}  // namespace

EvalReport run_adapt(const RunConfig& cfg, AdaptMode mode, const std::string& checkpoint_path,
                     const std::string& manifest_path, const std::string& run_dir) {
  RunLock lock(run_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  LoadedModel loaded = model_from_checkpoint(ckpt);
  PrecisionGuard precision(loaded.config.dtype);

  const TaskInputs inputs = task_inputs_from_string(cfg.modalities);
  if (inputs == TaskInputs::fused && loaded.model.config.mode == DecoderMode::unimodal) {
    throw std::runtime_error("adapt: fused oct,ir input needs a multimodal checkpoint");
  }

  const auto records = load_manifest(manifest_path);
  SplitFractions fractions{cfg.split_train, cfg.split_val, cfg.split_test};
  ManifestSplits splits = stratified_split(records, fractions, cfg.seed);
  const auto train = collect_samples(splits.train, inputs);
  const auto test = collect_samples(splits.test, inputs);

  const EvalConfig ec = eval_config_for(cfg, mode, inputs);
  const RunConfig saved_cfg = adapted_config(loaded.config, cfg);
  EvalReport report = run_adaptation(
      loaded.model, train, test, ec, [&](uint64_t seed, MimModel& model, ParamStore& head) {
        Checkpoint out;
        out.config_text = serialize_config(saved_cfg);
        const CkptDtype dtype = saved_cfg.dtype == "f32" ? CkptDtype::f32 : CkptDtype::f64;
        for (const auto& p : model.params.items()) {
          out.model.push_back(NamedTensor{p.name, dtype, p.tensor.shape(), p.tensor.vec()});
        }
        for (const auto& p : head.items()) {
          out.model.push_back(NamedTensor{p.name, dtype, p.tensor.shape(), p.tensor.vec()});
        }
        out.rng_state = Rng(seed).serialize();
        out.step = ec.steps;
        save_checkpoint(out, (fs::path(run_dir) / ("adapted_s" + std::to_string(seed) + ".mmim")).string());
      });

  std::ofstream mf((fs::path(run_dir) / "metrics.tsv").string());
  if (!mf) throw std::runtime_error("cannot write metrics report");
  mf << format_report(report);
  return report;
}

EvalReport run_eval(const std::string& checkpoint_path, const std::string& manifest_path,
                    const std::string& run_dir) {
  RunLock lock(run_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  LoadedModel loaded = model_from_checkpoint(ckpt);
  PrecisionGuard precision(loaded.config.dtype);
  if (loaded.head_tensors.empty()) {
    throw std::runtime_error("eval: checkpoint has no trained head (run probe or finetune first)");
  }
  const TaskInputs inputs = task_inputs_from_string(loaded.config.modalities);

  ParamStore head_store;
  Rng dummy(0);
  const size_t feat_dim = loaded.head_tensors[0].shape[0];
  const size_t classes = loaded.head_tensors[0].shape[1];
  LinearHead head = LinearHead::make(head_store, feat_dim, classes, dummy, 0);
  load_into_params(loaded.head_tensors, head_store);

  const auto samples = collect_samples(load_manifest(manifest_path), inputs);
  if (samples.empty()) throw std::runtime_error("eval: no labelled samples in " + manifest_path);

  std::vector<int> labels, preds;
  std::vector<double> pos_scores;
  {
    NoGradGuard ng;
    for (const auto& s : samples) {
      const Image* oct = s.oct ? &*s.oct : nullptr;
      const Image* ir = s.ir ? &*s.ir : nullptr;
      Tensor f;
      if (inputs == TaskInputs::fused) {
        EncodedFeatures enc = encode_features(loaded.model, oct, ir);
        f = fuse_multimodal(*enc.m1, *enc.m2);
      } else if (inputs == TaskInputs::oct_only) {
        EncodedFeatures enc = encode_features(loaded.model, oct, nullptr);
        f = pool_features(*enc.m1);
      } else {
        EncodedFeatures enc = loaded.model.config.mode == DecoderMode::unimodal
                                  ? encode_features(loaded.model, ir, nullptr)
                                  : encode_features(loaded.model, nullptr, ir);
        f = pool_features(enc.m2 ? *enc.m2 : *enc.m1);
      }
      Tensor probs = softmax_lastdim(head.fc(reshape(f, {size_t{1}, feat_dim})));
      size_t best = 0;
      for (size_t c = 1; c < classes; ++c) {
        if (probs.vec()[c] > probs.vec()[best]) best = c;
      }
      labels.push_back(s.label);
      preds.push_back(static_cast<int>(best));
      pos_scores.push_back(probs.vec()[1]);
    }
  }

  EvalReport report;
  std::map<std::string, double> m;
  m["accuracy"] = metric_accuracy(labels, preds);
  m["macro_f1"] = metric_macro_f1(labels, preds, static_cast<int>(classes));
  m["micro_f1"] = metric_micro_f1(labels, preds, static_cast<int>(classes));
  const bool has_pos = std::count(labels.begin(), labels.end(), 1) > 0;
  const bool has_neg = std::count(labels.begin(), labels.end(), 0) > 0;
  if (classes == 2 && has_pos && has_neg) {
    m["roc_auc"] = metric_roc_auc(labels, pos_scores);
    m["pr_auc"] = metric_pr_auc(labels, pos_scores);
  }
  report.per_seed.push_back(m);
  for (const auto& [name, value] : m) report.metrics[name] = MetricStats{value, 0.0, 1};

  std::ofstream mf((fs::path(run_dir) / "metrics.tsv").string());
  if (!mf) throw std::runtime_error("cannot write metrics report");
  mf << format_report(report);
  return report;
}

namespace {

Image masked_visualization(const Image& image, const MaskSpec& mask, size_t patch) {
  Tensor patches = patchify(image, patch);
  std::vector<double> rows = patches.vec();
  const size_t pd = patches.shape()[1];
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask.dropped[i]) std::fill_n(rows.data() + i * pd, pd, 0.5);
  }
  const PatchGrid grid = PatchGrid::make(image.height, image.width, patch, image.channels);
  return unpatchify(Tensor::from_data(patches.shape(), std::move(rows)), grid);
}

Image triptych(const Image& a, const Image& b, const Image& c) {
  const size_t sep = 2;
  Image panel(1, a.height, a.width * 3 + 2 * sep);
  std::fill(panel.pixels.begin(), panel.pixels.end(), 1.0);
  const Image* parts[3] = {&a, &b, &c};
  for (int k = 0; k < 3; ++k) {
    const size_t x0 = static_cast<size_t>(k) * (a.width + sep);
    for (size_t y = 0; y < a.height; ++y) {
      for (size_t x = 0; x < a.width; ++x) panel.at(0, y, x0 + x) = parts[k]->at(0, y, x);
    }
  }
  return panel;
}

}  // namespace

std::vector<std::string> run_reconstruct(const std::string& checkpoint_path, const std::string& manifest_path,
                                         const ReconstructOptions& opts, const std::string& out_dir) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  LoadedModel loaded = model_from_checkpoint(ckpt);
  PrecisionGuard precision(loaded.config.dtype);
  const bool multimodal = loaded.model.config.mode != DecoderMode::unimodal;
  const size_t patch = loaded.model.config.vit.patch;
  fs::create_directories(out_dir);

  std::vector<Image> singles;
  std::vector<std::pair<Image, Image>> pairs;
  if (!opts.images.empty()) {
    if (multimodal) {
      if (opts.images.size() % 2 != 0) {
        throw std::invalid_argument("reconstruct: multimodal checkpoints need oct/ir image pairs");
      }
      for (size_t i = 0; i + 1 < opts.images.size(); i += 2) {
        pairs.emplace_back(load_image(opts.images[i]), load_image(opts.images[i + 1]));
      }
    } else {
      for (const auto& p : opts.images) singles.push_back(load_image(p));
    }
  } else {
    if (manifest_path.empty()) throw std::invalid_argument("reconstruct: need --data or --images");
    const auto records = load_manifest(manifest_path);
    if (multimodal) {
      PairReport report = build_pairs(records);
      for (size_t i = 0; i < std::min(opts.count, report.pairs.size()); ++i) {
        pairs.emplace_back(load_image(report.pairs[i].first.image_path),
                           load_image(report.pairs[i].second.image_path));
      }
    } else {
      const Modality want = modality_from_string(loaded.config.modalities);
      for (const auto& r : records) {
        if (r.modality == want && singles.size() < opts.count) singles.push_back(load_image(r.image_path));
      }
    }
  }
  if (singles.empty() && pairs.empty()) throw std::runtime_error("reconstruct: no inputs selected");

  std::vector<std::string> written;
  NoGradGuard ng;
  const size_t n = multimodal ? pairs.size() : singles.size();
  for (size_t i = 0; i < n; ++i) {
    const uint64_t seed = mix_seed(opts.seed, 0x9ec0, i);
    if (multimodal) {
      StepOutput out =
          forward_multimodal(loaded.model, pairs[i].first, pairs[i].second, opts.rho_oct, opts.rho_ir, seed);
      const Image viz1 = masked_visualization(pairs[i].first, out.mask1, patch);
      const Image viz2 = masked_visualization(pairs[i].second, out.mask2, patch);
      std::string p1 = (fs::path(out_dir) / ("input" + std::to_string(i) + "_oct_panel.pgm")).string();
      std::string p2 = (fs::path(out_dir) / ("input" + std::to_string(i) + "_ir_panel.pgm")).string();
      save_image(triptych(pairs[i].first, viz1, out.recon1), p1);
      save_image(triptych(pairs[i].second, viz2, out.recon2), p2);
      written.push_back(std::move(p1));
      written.push_back(std::move(p2));
    } else {
      const double rho = loaded.config.modalities == "ir" ? opts.rho_ir : opts.rho_oct;
      StepOutput out = forward_unimodal(loaded.model, singles[i], rho, seed);
      const Image viz = masked_visualization(singles[i], out.mask1, patch);
      std::string p = (fs::path(out_dir) / ("input" + std::to_string(i) + "_panel.pgm")).string();
      save_image(triptych(singles[i], viz, out.recon1), p);
      written.push_back(std::move(p));
    }
  }
  return written;
}

}  // namespace mmim
