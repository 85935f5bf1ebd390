#pragma once

#include <map>
#include <optional>
#include <string>

#include "mmim/image.hpp"
#include "mmim/masking.hpp"
#include "mmim/params.hpp"
#include "mmim/vit.hpp"

namespace mmim {

enum class DecoderMode { unimodal, joint, separate };

std::string to_string(DecoderMode mode);
DecoderMode decoder_mode_from_string(const std::string& s);

struct MimConfig {
  VitConfig vit;
  DecoderMode mode = DecoderMode::unimodal;
  /// Drop exactly round(rho*L) tokens instead of i.i.d. Bernoulli draws.
  bool fixed_count_masking = false;
  /// Normalize each target patch to zero mean / unit variance before the
  /// reconstruction loss.
  bool normalized_targets = false;
  /// Reconstruction images show original pixels at visible slots (masked
  /// slots always show predictions); false renders raw predictions
  /// everywhere.
  bool recon_show_original_visible = true;

  size_t modalities() const { return mode == DecoderMode::unimodal ? 1 : 2; }
};

/// Patch-embedding-to-pixel reconstruction model: embedder(s), shared
/// encoder, decoder stack(s) and the learnable special tokens.
struct DecoderStack {
  Linear adapter;  // encoder width -> decoder width
  Encoder trunk;
};

class MimModel {
 public:
  static MimModel make(const MimConfig& cfg, uint64_t seed);

  MimConfig config;
  ParamStore params;

  Linear embed1;                       // modality 1 patch embedding
  std::optional<Linear> embed2;        // modality 2, multimodal only
  Encoder encoder;

  std::optional<DecoderStack> dec_shared;  // unimodal and joint modes
  std::optional<DecoderStack> dec1;        // separate mode
  std::optional<DecoderStack> dec2;
  Linear head1;                        // decoder width -> patch dim
  std::optional<Linear> head2;

  Tensor mask_uni;                     // <MASK>
  Tensor mask_1, mask_2;               // <MASK1>, <MASK2>
  Tensor mod_1, mod_2;                 // <MOD1>, <MOD2>

  size_t width() const { return config.vit.width; }
  const Tensor& pos_table(size_t length) const;

  /// True for parameters that belong to the pretraining decoder(s); these
  /// are dropped for downstream adaptation.
  static bool is_decoder_param(const std::string& name);

 private:
  mutable std::map<size_t, Tensor> pos_cache_;
};

struct StepOutput {
  Tensor loss;
  Tensor loss1, loss2;    // per-modality terms (loss1 only for unimodal)
  Tensor pred1, pred2;    // predicted patch matrices
  MaskSpec mask1, mask2;
  Image recon1, recon2;
};

/// Mean over dropped patches of the squared L2 distance between target and
/// predicted patch vectors. Visible patches contribute exactly zero.
Tensor loss_unimodal(const Tensor& target_patches, const Tensor& pred_patches, const MaskSpec& mask);

/// Full masked-reconstruction step for one image. With rho == 0 nothing is
/// dropped and the loss averages over all patches instead (test mode).
StepOutput forward_unimodal(const MimModel& model, const Image& image, double rho, uint64_t seed);

/// Paired step: per-modality masking, modality tokens on the visible
/// tokens, joint encoding, per-modality refill and decoding. Total loss is
/// the exact sum of the two per-modality terms.
StepOutput forward_multimodal(const MimModel& model, const Image& image1, const Image& image2, double rho1,
                              double rho2, uint64_t seed);

struct EncodedFeatures {
  std::optional<TokenSequence> m1, m2;
};

/// Unmasked descriptor sequences for one or both modalities; no decoder
/// involved. A multimodal model accepts either modality alone (its modality
/// token is still added), which is the missing-modality evaluation path.
EncodedFeatures encode_features(const MimModel& model, const Image* image1, const Image* image2);

}  // namespace mmim
