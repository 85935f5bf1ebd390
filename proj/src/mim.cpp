#include "mmim/mim.hpp"

#include <cmath>
#include <stdexcept>

namespace mmim {

std::string to_string(DecoderMode mode) {
  switch (mode) {
    case DecoderMode::unimodal: return "unimodal";
    case DecoderMode::joint: return "joint";
    case DecoderMode::separate: return "separate";
  }
  return "unimodal";
}

DecoderMode decoder_mode_from_string(const std::string& s) {
  if (s == "unimodal") return DecoderMode::unimodal;
  if (s == "joint") return DecoderMode::joint;
  if (s == "separate") return DecoderMode::separate;
  throw std::invalid_argument("unknown decoder mode: " + s);
}

namespace {

DecoderStack make_decoder(ParamStore& params, const std::string& name, const VitConfig& vit, Rng& rng,
                          int depth_index) {
  DecoderStack d;
  d.adapter = Linear::make(params, name + ".adapter", vit.width, vit.decoder_width, rng, depth_index);
  d.trunk = Encoder::make(params, name, vit.decoder_depth, vit.decoder_width, vit.decoder_heads,
                          vit.mlp_ratio, vit.ln_eps, rng, depth_index);
  return d;
}

Tensor decode(const DecoderStack& dec, const Linear& head, const Tensor& filled) {
  return head(dec.trunk(dec.adapter(filled)));
}

}  // namespace

MimModel MimModel::make(const MimConfig& cfg, uint64_t seed) {
  cfg.vit.validate();
  MimModel m;
  m.config = cfg;
  Rng rng(mix_seed(seed, 0x1c0de));
  const VitConfig& vit = cfg.vit;
  const size_t pd = vit.patch * vit.patch * vit.channels;
  const int head_depth = static_cast<int>(vit.depth) + 1;

  m.embed1 = Linear::make(m.params, "embed1", pd, vit.width, rng, 0);
  if (cfg.mode != DecoderMode::unimodal) {
    m.embed2 = Linear::make(m.params, "embed2", pd, vit.width, rng, 0);
  }

  if (cfg.mode == DecoderMode::unimodal) {
    m.mask_uni = m.params.add("token.mask", Tensor::randn({vit.width}, rng, 0.02), false, 0);
  } else {
    m.mask_1 = m.params.add("token.mask1", Tensor::randn({vit.width}, rng, 0.02), false, 0);
    m.mask_2 = m.params.add("token.mask2", Tensor::randn({vit.width}, rng, 0.02), false, 0);
    m.mod_1 = m.params.add("token.mod1", Tensor::randn({vit.width}, rng, 0.02), false, 0);
    m.mod_2 = m.params.add("token.mod2", Tensor::randn({vit.width}, rng, 0.02), false, 0);
  }

  m.encoder = Encoder::make(m.params, "encoder", vit.depth, vit.width, vit.heads, vit.mlp_ratio, vit.ln_eps,
                            rng, 1);

  switch (cfg.mode) {
    case DecoderMode::unimodal:
      m.dec_shared = make_decoder(m.params, "decoder", vit, rng, head_depth);
      m.head1 = Linear::make(m.params, "decoder.head1", vit.decoder_width, pd, rng, head_depth);
      break;
    case DecoderMode::joint:
      m.dec_shared = make_decoder(m.params, "decoder", vit, rng, head_depth);
      m.head1 = Linear::make(m.params, "decoder.head1", vit.decoder_width, pd, rng, head_depth);
      m.head2 = Linear::make(m.params, "decoder.head2", vit.decoder_width, pd, rng, head_depth);
      break;
    case DecoderMode::separate:
      m.dec1 = make_decoder(m.params, "decoder1", vit, rng, head_depth);
      m.head1 = Linear::make(m.params, "decoder1.head", vit.decoder_width, pd, rng, head_depth);
      m.dec2 = make_decoder(m.params, "decoder2", vit, rng, head_depth);
      m.head2 = Linear::make(m.params, "decoder2.head", vit.decoder_width, pd, rng, head_depth);
      break;
  }
  return m;
}

const Tensor& MimModel::pos_table(size_t length) const {
  auto it = pos_cache_.find(length);
  if (it == pos_cache_.end()) {
    it = pos_cache_.emplace(length, sinusoidal_pos(length, config.vit.width)).first;
  }
  return it->second;
}

bool MimModel::is_decoder_param(const std::string& name) {
  return name.rfind("decoder", 0) == 0;
}

Tensor loss_unimodal(const Tensor& target_patches, const Tensor& pred_patches, const MaskSpec& mask) {
  if (target_patches.shape() != pred_patches.shape()) {
    throw std::invalid_argument("loss_unimodal: shape mismatch " + shape_str(target_patches.shape()) + " vs " +
                                shape_str(pred_patches.shape()));
  }
  if (target_patches.ndim() != 2 || target_patches.shape()[0] != mask.size()) {
    throw std::invalid_argument("loss_unimodal: mask length " + std::to_string(mask.size()) +
                                " does not match patches " + shape_str(target_patches.shape()));
  }
  const auto dropped = mask.dropped_indices();
  if (dropped.empty()) throw std::invalid_argument("loss_unimodal: no dropped patches");
  Tensor pm = gather_rows(pred_patches, dropped);
  Tensor tm = gather_rows(target_patches, dropped);
  Tensor diff = sub(pm, tm);
  return scalar_mul(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(dropped.size()));
}

namespace {

// Loss over every patch; used when nothing was dropped (rho == 0 test mode).
Tensor loss_all_patches(const Tensor& target_patches, const Tensor& pred_patches) {
  Tensor diff = sub(pred_patches, target_patches);
  const size_t rows = target_patches.shape()[0];
  return scalar_mul(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(rows));
}

Tensor maybe_normalize_targets(const Tensor& patches, bool enabled) {
  if (!enabled) return patches;
  NoGradGuard ng;
  const size_t rows = patches.shape()[0];
  const size_t pd = patches.shape()[1];
  std::vector<double> out(patches.vec());
  for (size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * pd;
    double mu = 0.0;
    for (size_t i = 0; i < pd; ++i) mu += row[i];
    mu /= static_cast<double>(pd);
    double var = 0.0;
    for (size_t i = 0; i < pd; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(pd);
    const double inv = 1.0 / std::sqrt(var + 1e-6);
    for (size_t i = 0; i < pd; ++i) row[i] = (row[i] - mu) * inv;
  }
  return Tensor::from_data(patches.shape(), std::move(out));
}

Image render_reconstruction(const Tensor& pred, const Tensor& original_patches, const MaskSpec& mask,
                            const PatchGrid& grid, bool show_original_visible) {
  NoGradGuard ng;
  std::vector<double> rows = pred.vec();
  // With nothing dropped the panel shows the model's full-visibility
  // prediction rather than a copy of the input.
  if (show_original_visible && mask.num_dropped() > 0) {
    const size_t pd = grid.patch_dim();
    for (size_t i = 0; i < mask.size(); ++i) {
      if (!mask.dropped[i]) {
        std::copy_n(original_patches.data() + i * pd, pd, rows.data() + i * pd);
      }
    }
  }
  return unpatchify(Tensor::from_data(pred.shape(), std::move(rows)), grid);
}

TokenSequence tokenize(const MimModel& model, const Linear& embed, const Image& image) {
  Tensor patches = patchify(image, model.config.vit.patch);
  return embed_tokens(patches, embed.weight, embed.bias, model.pos_table(patches.shape()[0]));
}

MaskSpec draw_mask(const MimModel& model, size_t length, double rho, uint64_t seed) {
  return model.config.fixed_count_masking ? sample_mask_fixed_count(length, rho, seed)
                                          : sample_mask(length, rho, seed);
}

}  // namespace

StepOutput forward_unimodal(const MimModel& model, const Image& image, double rho, uint64_t seed) {
  if (model.config.mode != DecoderMode::unimodal) {
    throw std::invalid_argument("forward_unimodal: model decoder mode is " + to_string(model.config.mode));
  }
  const PatchGrid grid = PatchGrid::make(image.height, image.width, model.config.vit.patch, image.channels);
  Tensor patches = patchify(image, grid.patch);
  TokenSequence seq = embed_tokens(patches, model.embed1.weight, model.embed1.bias,
                                   model.pos_table(grid.tokens()));
  StepOutput out;
  out.mask1 = draw_mask(model, grid.tokens(), rho, seed);
  TokenSequence visible = filter_visible(seq, out.mask1);
  Tensor descriptors = model.encoder(visible.tokens);
  Tensor filled = refill(descriptors, out.mask1, model.mask_uni, model.pos_table(grid.tokens()));
  out.pred1 = decode(*model.dec_shared, model.head1, filled);
  Tensor targets = maybe_normalize_targets(patches, model.config.normalized_targets);
  out.loss1 = out.mask1.num_dropped() == 0 ? loss_all_patches(targets, out.pred1)
                                           : loss_unimodal(targets, out.pred1, out.mask1);
  out.loss = out.loss1;
  out.recon1 = render_reconstruction(out.pred1, patches, out.mask1, grid,
                                     model.config.recon_show_original_visible);
  return out;
}

StepOutput forward_multimodal(const MimModel& model, const Image& image1, const Image& image2, double rho1,
                              double rho2, uint64_t seed) {
  if (model.config.mode == DecoderMode::unimodal) {
    throw std::invalid_argument("forward_multimodal: model is configured unimodal");
  }
  const size_t p = model.config.vit.patch;
  const PatchGrid grid1 = PatchGrid::make(image1.height, image1.width, p, image1.channels);
  const PatchGrid grid2 = PatchGrid::make(image2.height, image2.width, p, image2.channels);

  Tensor patches1 = patchify(image1, p);
  Tensor patches2 = patchify(image2, p);
  TokenSequence seq1 = embed_tokens(patches1, model.embed1.weight, model.embed1.bias,
                                    model.pos_table(grid1.tokens()));
  TokenSequence seq2 = embed_tokens(patches2, model.embed2->weight, model.embed2->bias,
                                    model.pos_table(grid2.tokens()));

  StepOutput out;
  out.mask1 = draw_mask(model, grid1.tokens(), rho1, mix_seed(seed, 1));
  out.mask2 = draw_mask(model, grid2.tokens(), rho2, mix_seed(seed, 2));
  TokenSequence vis1 = filter_visible(seq1, out.mask1);
  TokenSequence vis2 = filter_visible(seq2, out.mask2);

  TokenSequence joint = join_modalities(vis1, vis2, model.mod_1, model.mod_2);
  Tensor joint_desc = model.encoder(joint.tokens);
  TokenSequence tagged{joint_desc, joint.positions, joint.modality};
  auto [d1, d2] = split_modalities(tagged);

  Tensor filled1 = refill(d1.tokens, out.mask1, model.mask_1, model.pos_table(grid1.tokens()));
  Tensor filled2 = refill(d2.tokens, out.mask2, model.mask_2, model.pos_table(grid2.tokens()));

  if (model.config.mode == DecoderMode::joint) {
    out.pred1 = decode(*model.dec_shared, model.head1, filled1);
    out.pred2 = decode(*model.dec_shared, *model.head2, filled2);
  } else {
    out.pred1 = decode(*model.dec1, model.head1, filled1);
    out.pred2 = decode(*model.dec2, *model.head2, filled2);
  }

  Tensor targets1 = maybe_normalize_targets(patches1, model.config.normalized_targets);
  Tensor targets2 = maybe_normalize_targets(patches2, model.config.normalized_targets);
  out.loss1 = out.mask1.num_dropped() == 0 ? loss_all_patches(targets1, out.pred1)
                                           : loss_unimodal(targets1, out.pred1, out.mask1);
  out.loss2 = out.mask2.num_dropped() == 0 ? loss_all_patches(targets2, out.pred2)
                                           : loss_unimodal(targets2, out.pred2, out.mask2);
  out.loss = add(out.loss1, out.loss2);
  out.recon1 = render_reconstruction(out.pred1, patches1, out.mask1, grid1,
                                     model.config.recon_show_original_visible);
  out.recon2 = render_reconstruction(out.pred2, patches2, out.mask2, grid2,
                                     model.config.recon_show_original_visible);
  return out;
}

EncodedFeatures encode_features(const MimModel& model, const Image* image1, const Image* image2) {
  if (!image1 && !image2) throw std::invalid_argument("encode_features: at least one modality required");
  EncodedFeatures out;
  if (model.config.mode == DecoderMode::unimodal) {
    if (!image1 || image2) {
      throw std::invalid_argument("encode_features: unimodal model takes exactly one image in slot 1");
    }
    TokenSequence seq = tokenize(model, model.embed1, *image1);
    TokenSequence enc = seq;
    enc.tokens = model.encoder(seq.tokens);
    out.m1 = std::move(enc);
    return out;
  }

  std::optional<TokenSequence> seq1, seq2;
  if (image1) seq1 = tokenize(model, model.embed1, *image1);
  if (image2) seq2 = tokenize(model, *model.embed2, *image2);

  if (seq1 && seq2) {
    TokenSequence joint = join_modalities(*seq1, *seq2, model.mod_1, model.mod_2);
    Tensor desc = model.encoder(joint.tokens);
    TokenSequence tagged{desc, joint.positions, joint.modality};
    auto [d1, d2] = split_modalities(tagged);
    out.m1 = std::move(d1);
    out.m2 = std::move(d2);
  } else if (seq1) {
    TokenSequence enc = *seq1;
    enc.tokens = model.encoder(add(seq1->tokens, model.mod_1));
    enc.modality.assign(enc.length(), 0);
    out.m1 = std::move(enc);
  } else {
    TokenSequence enc = *seq2;
    enc.tokens = model.encoder(add(seq2->tokens, model.mod_2));
    enc.modality.assign(enc.length(), 1);
    out.m2 = std::move(enc);
  }
  return out;
}

}  // namespace mmim
