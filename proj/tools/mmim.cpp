// Command-line driver: synthetic data generation, masked-image-modelling
// pretraining, downstream adaptation and reconstruction rendering.

#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "mmim/config.hpp"
#include "mmim/data.hpp"
#include "mmim/eval.hpp"
#include "mmim/train.hpp"

namespace {

struct ConfigCli {
  std::string config_file;
  std::vector<std::string> overrides;  // key=value pairs
};

void add_config_options(CLI::App* cmd, ConfigCli& cc) {
  cmd->add_option("--config", cc.config_file, "run config file (key = value lines)");
  cmd->add_option("--set", cc.overrides, "override a config key, e.g. --set steps=500")
      ->type_name("KEY=VALUE");
}

mmim::RunConfig build_config(const ConfigCli& cc) {
  std::string text;
  if (!cc.config_file.empty()) {
    mmim::RunConfig base = mmim::load_config_file(cc.config_file);
    text = mmim::serialize_config(base);
  } else {
    text = mmim::serialize_config(mmim::RunConfig{});
  }
  for (const auto& kv : cc.overrides) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--set expects KEY=VALUE, got " + kv);
    text += kv.substr(0, eq) + " = " + kv.substr(eq + 1) + "\n";
  }
  return mmim::parse_config_text(text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal masked image modelling for retinal OCT/IR at desk scale"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "render a synthetic paired OCT/IR corpus");
  mmim::SynthConfig synth;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--size", synth.image_size, "image side length");
  gen->add_option("--num-patients", synth.num_patients, "number of patients");
  gen->add_option("--visits", synth.visits_per_patient, "visits per patient");
  gen->add_option("--classes", synth.num_classes, "number of latent classes");
  gen->add_option("--noise", synth.noise, "pixel noise level");
  gen->add_option("--intensity-jitter", synth.intensity_jitter, "per-image brightness jitter");
  gen->add_option("--seed", synth.seed, "generator seed");
  gen->add_flag("!--single-eye", synth.both_eyes, "generate one eye per patient");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "masked-image-modelling pretraining");
  ConfigCli pre_cfg;
  std::string pre_data, pre_out, pre_resume;
  std::string pre_modalities, pre_decoder_mode;
  double pre_rho_oct = -1.0, pre_rho_ir = -1.0;
  long long pre_seed = -1, pre_steps = -1;
  add_config_options(pre, pre_cfg);
  pre->add_option("--data", pre_data, "manifest file")->required();
  pre->add_option("--out", pre_out, "run directory (default $MMIM_RUN_DIR or ./run)");
  pre->add_option("--resume", pre_resume, "checkpoint to resume from");
  pre->add_option("--modalities", pre_modalities, "oct | ir | oct,ir");
  pre->add_option("--decoder-mode", pre_decoder_mode, "unimodal | joint | separate");
  pre->add_option("--mask-ratio-oct", pre_rho_oct, "OCT masking ratio");
  pre->add_option("--mask-ratio-ir", pre_rho_ir, "IR masking ratio");
  pre->add_option("--steps", pre_steps, "optimizer steps");
  pre->add_option("--seed", pre_seed, "run seed");

  // probe / finetune
  auto add_adapt = [&](const char* name, const char* help) {
    auto* cmd = app.add_subcommand(name, help);
    return cmd;
  };
  auto* probe = add_adapt("probe", "train a linear head on frozen features");
  auto* finetune = add_adapt("finetune", "adapt the whole model plus a linear head");
  ConfigCli probe_cfg, ft_cfg;
  std::string probe_data, probe_out, probe_ckpt, probe_modalities;
  std::string ft_data, ft_out, ft_ckpt, ft_modalities;
  long long probe_seeds = -1, ft_seeds = -1;
  add_config_options(probe, probe_cfg);
  probe->add_option("--checkpoint", probe_ckpt, "pretrained checkpoint")->required();
  probe->add_option("--data", probe_data, "labelled manifest")->required();
  probe->add_option("--out", probe_out, "run directory");
  probe->add_option("--modalities", probe_modalities, "head input: oct | ir | oct,ir");
  probe->add_option("--seeds", probe_seeds, "number of seeds");
  add_config_options(finetune, ft_cfg);
  finetune->add_option("--checkpoint", ft_ckpt, "pretrained checkpoint")->required();
  finetune->add_option("--data", ft_data, "labelled manifest")->required();
  finetune->add_option("--out", ft_out, "run directory");
  finetune->add_option("--modalities", ft_modalities, "head input: oct | ir | oct,ir");
  finetune->add_option("--seeds", ft_seeds, "number of seeds");

  // eval
  auto* ev = app.add_subcommand("eval", "metrics for an adapted checkpoint on a manifest");
  std::string ev_ckpt, ev_data, ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "adapted checkpoint (with trained head)")->required();
  ev->add_option("--data", ev_data, "labelled manifest")->required();
  ev->add_option("--out", ev_out, "run directory");

  // reconstruct
  auto* rec = app.add_subcommand("reconstruct", "original | masked | reconstruction panels");
  std::string rec_ckpt, rec_data, rec_out;
  mmim::ReconstructOptions rec_opts;
  rec->add_option("--checkpoint", rec_ckpt, "checkpoint")->required();
  rec->add_option("--data", rec_data, "manifest to draw inputs from");
  rec->add_option("--images", rec_opts.images, "explicit input images (oct ir pairs for multimodal)");
  rec->add_option("--out", rec_out, "output directory");
  rec->add_option("--rho-oct", rec_opts.rho_oct, "OCT masking ratio");
  rec->add_option("--rho-ir", rec_opts.rho_ir, "IR masking ratio");
  rec->add_option("--count", rec_opts.count, "number of manifest samples");
  rec->add_option("--seed", rec_opts.seed, "mask seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto records = mmim::generate_paired(synth, gen_out);
      std::printf("wrote %zu records under %s\n", records.size(), gen_out.c_str());
      return 0;
    }
    if (pre->parsed()) {
      mmim::RunConfig cfg = build_config(pre_cfg);
      if (!pre_modalities.empty()) cfg.modalities = pre_modalities;
      if (!pre_decoder_mode.empty()) cfg.decoder_mode = pre_decoder_mode;
      if (pre_rho_oct >= 0.0) cfg.mask_ratio_oct = pre_rho_oct;
      if (pre_rho_ir >= 0.0) cfg.mask_ratio_ir = pre_rho_ir;
      if (pre_steps >= 0) cfg.steps = static_cast<size_t>(pre_steps);
      if (pre_seed >= 0) cfg.seed = static_cast<uint64_t>(pre_seed);
      const std::string run_dir = mmim::resolve_run_dir(pre_out);
      const auto result = mmim::run_pretrain(cfg, pre_data, run_dir, pre_resume);
      std::printf("pretrain done: steps %llu..%llu, final loss %.6f, checkpoint %s\n",
                  static_cast<unsigned long long>(result.first_step),
                  static_cast<unsigned long long>(result.last_step),
                  result.losses.empty() ? 0.0 : result.losses.back(), result.checkpoint_path.c_str());
      return 0;
    }
    if (probe->parsed() || finetune->parsed()) {
      const bool is_probe = probe->parsed();
      mmim::RunConfig cfg = build_config(is_probe ? probe_cfg : ft_cfg);
      const std::string& modalities = is_probe ? probe_modalities : ft_modalities;
      if (!modalities.empty()) cfg.modalities = modalities;
      const long long seeds = is_probe ? probe_seeds : ft_seeds;
      if (seeds > 0) cfg.eval_seeds = static_cast<size_t>(seeds);
      const std::string run_dir = mmim::resolve_run_dir(is_probe ? probe_out : ft_out);
      const auto report = mmim::run_adapt(
          cfg, is_probe ? mmim::AdaptMode::linear_probe : mmim::AdaptMode::finetune,
          is_probe ? probe_ckpt : ft_ckpt, is_probe ? probe_data : ft_data, run_dir);
      std::fputs(mmim::format_report(report).c_str(), stdout);
      return 0;
    }
    if (ev->parsed()) {
      const auto report = mmim::run_eval(ev_ckpt, ev_data, mmim::resolve_run_dir(ev_out));
      std::fputs(mmim::format_report(report).c_str(), stdout);
      return 0;
    }
    if (rec->parsed()) {
      const auto written =
          mmim::run_reconstruct(rec_ckpt, rec_data, rec_opts, mmim::resolve_run_dir(rec_out));
      for (const auto& p : written) std::printf("%s\n", p.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
