#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmim/image.hpp"
#include "mmim/params.hpp"
#include "mmim/rng.hpp"
#include "mmim/tensor.hpp"

namespace mmim {

/// Geometry of the non-overlapping patch decomposition of one image.
struct PatchGrid {
  size_t image_height = 0;
  size_t image_width = 0;
  size_t patch = 0;
  size_t channels = 1;

  static PatchGrid make(size_t height, size_t width, size_t patch, size_t channels);

  size_t rows() const { return image_height / patch; }
  size_t cols() const { return image_width / patch; }
  size_t tokens() const { return rows() * cols(); }
  size_t patch_dim() const { return patch * patch * channels; }
};

/// Ordered tokens with their original grid position and an optional
/// per-token modality tag (-1 when untagged). Positions survive masking so
/// dropped slots can be refilled later.
struct TokenSequence {
  Tensor tokens;                    // (length, width)
  std::vector<size_t> positions;    // original index in [0, L)
  std::vector<int> modality;        // -1 untagged, otherwise modality id

  size_t length() const { return positions.size(); }
  size_t width() const { return tokens.defined() && tokens.ndim() == 2 ? tokens.shape()[1] : 0; }
};

struct VitConfig {
  size_t depth = 2;
  size_t heads = 4;
  size_t width = 64;
  double mlp_ratio = 4.0;
  size_t patch = 8;
  size_t channels = 1;
  size_t decoder_depth = 2;
  size_t decoder_width = 128;
  size_t decoder_heads = 4;
  double ln_eps = 1e-6;

  void validate() const;

  static VitConfig vit_b();  // 12/768/12, patch 16
  static VitConfig vit_l();  // 24/1024/16, patch 16
};

/// Splits a channel-major image into row-major p x p patch vectors, one row
/// per patch, laid out channel-major within the vector. Inverse of
/// unpatchify.
Tensor patchify(const Image& image, size_t patch);
Image unpatchify(const Tensor& patches, const PatchGrid& grid);

/// Sinusoidal position table: row i holds sin(i / 10000^(2k/D)) and
/// cos(i / 10000^(2k/D)) interleaved over k. Regenerated per length, no
/// interpolation.
Tensor sinusoidal_pos(size_t length, size_t width);

/// token_i = E(x_i) + p_i over a whole patch matrix.
TokenSequence embed_tokens(const Tensor& patches, const Tensor& embed_weight, const Tensor& embed_bias,
                           const Tensor& pos_table);

struct Linear {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)

  static Linear make(ParamStore& params, const std::string& name, size_t in, size_t out, Rng& rng,
                     int depth_index);
  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
  size_t in_dim() const { return weight.shape()[0]; }
  size_t out_dim() const { return weight.shape()[1]; }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-6;

  static LayerNormParams make(ParamStore& params, const std::string& name, size_t dim, double eps,
                              int depth_index);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
};

struct Attention {
  Linear q, k, v, out;
  size_t heads = 1;

  static Attention make(ParamStore& params, const std::string& name, size_t width, size_t heads, Rng& rng,
                        int depth_index);
  Tensor operator()(const Tensor& x) const;
};

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
struct Block {
  LayerNormParams ln1, ln2;
  Attention attn;
  Linear fc1, fc2;

  static Block make(ParamStore& params, const std::string& name, size_t width, size_t heads, double mlp_ratio,
                    double ln_eps, Rng& rng, int depth_index);
  Tensor operator()(const Tensor& x) const;
};

/// Stack of blocks plus a final norm. Length-preserving: emits exactly one
/// descriptor per input token.
struct Encoder {
  std::vector<Block> blocks;
  LayerNormParams final_norm;

  static Encoder make(ParamStore& params, const std::string& name, size_t depth, size_t width, size_t heads,
                      double mlp_ratio, double ln_eps, Rng& rng, int first_depth_index);
  /// Throws a runtime error naming the block index if activations go
  /// non-finite.
  Tensor operator()(const Tensor& x) const;
};

}  // namespace mmim
