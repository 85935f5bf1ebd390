#include "mmim/vit.hpp"

#include <cmath>
#include <stdexcept>

namespace mmim {

PatchGrid PatchGrid::make(size_t height, size_t width, size_t patch, size_t channels) {
  if (patch == 0) throw std::invalid_argument("patch size must be positive");
  if (height % patch != 0 || width % patch != 0) {
    throw std::invalid_argument("image " + std::to_string(height) + "x" + std::to_string(width) +
                                " not divisible by patch size " + std::to_string(patch));
  }
  if (channels == 0) throw std::invalid_argument("channels must be positive");
  return PatchGrid{height, width, patch, channels};
}

void VitConfig::validate() const {
  if (depth == 0 || heads == 0 || width == 0 || patch == 0 || channels == 0) {
    throw std::invalid_argument("vit config: dimensions must be positive");
  }
  if (width % heads != 0) throw std::invalid_argument("vit config: width must be divisible by heads");
  if (width % 2 != 0) throw std::invalid_argument("vit config: width must be even for sinusoidal positions");
  if (decoder_depth == 0 || decoder_width == 0 || decoder_heads == 0) {
    throw std::invalid_argument("vit config: decoder dimensions must be positive");
  }
  if (decoder_width % decoder_heads != 0) {
    throw std::invalid_argument("vit config: decoder width must be divisible by decoder heads");
  }
  if (decoder_width % 2 != 0) throw std::invalid_argument("vit config: decoder width must be even");
  if (mlp_ratio <= 0) throw std::invalid_argument("vit config: mlp_ratio must be positive");
  if (ln_eps <= 0) throw std::invalid_argument("vit config: ln_eps must be positive");
}

VitConfig VitConfig::vit_b() {
  VitConfig c;
  c.depth = 12;
  c.heads = 12;
  c.width = 768;
  c.patch = 16;
  c.decoder_depth = 2;
  c.decoder_width = 128;
  c.decoder_heads = 4;
  return c;
}

VitConfig VitConfig::vit_l() {
  VitConfig c;
  c.depth = 24;
  c.heads = 16;
  c.width = 1024;
  c.patch = 16;
  c.decoder_depth = 2;
  c.decoder_width = 128;
  c.decoder_heads = 4;
  return c;
}

Tensor patchify(const Image& image, size_t patch) {
  PatchGrid grid = PatchGrid::make(image.height, image.width, patch, image.channels);
  const size_t pd = grid.patch_dim();
  std::vector<double> out(grid.tokens() * pd);
  size_t row = 0;
  for (size_t gy = 0; gy < grid.rows(); ++gy) {
    for (size_t gx = 0; gx < grid.cols(); ++gx, ++row) {
      double* dst = out.data() + row * pd;
      size_t k = 0;
      for (size_t c = 0; c < image.channels; ++c) {
        for (size_t py = 0; py < patch; ++py) {
          for (size_t px = 0; px < patch; ++px) {
            dst[k++] = image.at(c, gy * patch + py, gx * patch + px);
          }
        }
      }
    }
  }
  return Tensor::from_data({grid.tokens(), pd}, std::move(out));
}

Image unpatchify(const Tensor& patches, const PatchGrid& grid) {
  if (patches.ndim() != 2 || patches.shape()[0] != grid.tokens() || patches.shape()[1] != grid.patch_dim()) {
    throw std::invalid_argument("unpatchify: expected " + shape_str({grid.tokens(), grid.patch_dim()}) +
                                " patches, got " + shape_str(patches.shape()));
  }
  Image image(grid.channels, grid.image_height, grid.image_width);
  const size_t p = grid.patch;
  size_t row = 0;
  for (size_t gy = 0; gy < grid.rows(); ++gy) {
    for (size_t gx = 0; gx < grid.cols(); ++gx, ++row) {
      const double* src = patches.data() + row * grid.patch_dim();
      size_t k = 0;
      for (size_t c = 0; c < grid.channels; ++c) {
        for (size_t py = 0; py < p; ++py) {
          for (size_t px = 0; px < p; ++px) {
            image.at(c, gy * p + py, gx * p + px) = src[k++];
          }
        }
      }
    }
  }
  return image;
}

Tensor sinusoidal_pos(size_t length, size_t width) {
  if (width % 2 != 0) throw std::invalid_argument("sinusoidal_pos: width must be even");
  std::vector<double> table(length * width);
  for (size_t i = 0; i < length; ++i) {
    for (size_t k = 0; 2 * k < width; ++k) {
      const double rate = std::pow(10000.0, 2.0 * static_cast<double>(k) / static_cast<double>(width));
      const double angle = static_cast<double>(i) / rate;
      table[i * width + 2 * k] = std::sin(angle);
      table[i * width + 2 * k + 1] = std::cos(angle);
    }
  }
  return Tensor::from_data({length, width}, std::move(table));
}

TokenSequence embed_tokens(const Tensor& patches, const Tensor& embed_weight, const Tensor& embed_bias,
                           const Tensor& pos_table) {
  if (patches.ndim() != 2 || embed_weight.ndim() != 2 || patches.shape()[1] != embed_weight.shape()[0]) {
    throw std::invalid_argument("embed_tokens: patch dim " + shape_str(patches.shape()) +
                                " does not match embedding " + shape_str(embed_weight.shape()));
  }
  const size_t L = patches.shape()[0];
  const size_t D = embed_weight.shape()[1];
  if (pos_table.ndim() != 2 || pos_table.shape()[0] < L || pos_table.shape()[1] != D) {
    throw std::invalid_argument("embed_tokens: position table " + shape_str(pos_table.shape()) +
                                " too small for " + std::to_string(L) + " tokens of width " + std::to_string(D));
  }
  Tensor pos = pos_table.shape()[0] == L ? pos_table : slice_rows(pos_table, 0, L);
  TokenSequence seq;
  seq.tokens = add(add(matmul(patches, embed_weight), embed_bias), pos);
  seq.positions.resize(L);
  for (size_t i = 0; i < L; ++i) seq.positions[i] = i;
  seq.modality.assign(L, -1);
  return seq;
}

Linear Linear::make(ParamStore& params, const std::string& name, size_t in, size_t out, Rng& rng,
                    int depth_index) {
  Linear l;
  l.weight = params.add(name + ".weight", Tensor::randn({in, out}, rng, 0.02), true, depth_index);
  l.bias = params.add(name + ".bias", Tensor::zeros({out}), false, depth_index);
  return l;
}

LayerNormParams LayerNormParams::make(ParamStore& params, const std::string& name, size_t dim, double eps,
                                      int depth_index) {
  LayerNormParams ln;
  ln.gamma = params.add(name + ".gamma", Tensor::full({dim}, 1.0), false, depth_index);
  ln.beta = params.add(name + ".beta", Tensor::zeros({dim}), false, depth_index);
  ln.eps = eps;
  return ln;
}

Attention Attention::make(ParamStore& params, const std::string& name, size_t width, size_t heads, Rng& rng,
                          int depth_index) {
  Attention a;
  a.q = Linear::make(params, name + ".q", width, width, rng, depth_index);
  a.k = Linear::make(params, name + ".k", width, width, rng, depth_index);
  a.v = Linear::make(params, name + ".v", width, width, rng, depth_index);
  a.out = Linear::make(params, name + ".out", width, width, rng, depth_index);
  a.heads = heads;
  return a;
}

Tensor Attention::operator()(const Tensor& x) const {
  const size_t L = x.shape()[0];
  const size_t D = x.shape()[1];
  if (L == 0) return x;
  const size_t H = heads;
  const size_t dh = D / H;
  auto split_heads = [&](const Tensor& t) {
    return permute(reshape(t, {L, H, dh}), {1, 0, 2});  // (H, L, dh)
  };
  Tensor qh = split_heads(q(x));
  Tensor kh = split_heads(k(x));
  Tensor vh = split_heads(v(x));
  Tensor scores = scalar_mul(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor att = softmax_lastdim(scores);
  Tensor ctx = matmul(att, vh);                          // (H, L, dh)
  Tensor merged = reshape(permute(ctx, {1, 0, 2}), {L, D});
  return out(merged);
}

Block Block::make(ParamStore& params, const std::string& name, size_t width, size_t heads, double mlp_ratio,
                  double ln_eps, Rng& rng, int depth_index) {
  Block b;
  b.ln1 = LayerNormParams::make(params, name + ".ln1", width, ln_eps, depth_index);
  b.attn = Attention::make(params, name + ".attn", width, heads, rng, depth_index);
  b.ln2 = LayerNormParams::make(params, name + ".ln2", width, ln_eps, depth_index);
  const size_t hidden = static_cast<size_t>(static_cast<double>(width) * mlp_ratio);
  b.fc1 = Linear::make(params, name + ".fc1", width, hidden, rng, depth_index);
  b.fc2 = Linear::make(params, name + ".fc2", hidden, width, rng, depth_index);
  return b;
}

Tensor Block::operator()(const Tensor& x) const {
  Tensor h = add(x, attn(ln1(x)));
  return add(h, fc2(gelu(fc1(ln2(h)))));
}

Encoder Encoder::make(ParamStore& params, const std::string& name, size_t depth, size_t width, size_t heads,
                      double mlp_ratio, double ln_eps, Rng& rng, int first_depth_index) {
  Encoder e;
  e.blocks.reserve(depth);
  for (size_t i = 0; i < depth; ++i) {
    e.blocks.push_back(Block::make(params, name + ".block" + std::to_string(i), width, heads, mlp_ratio,
                                   ln_eps, rng, first_depth_index + static_cast<int>(i)));
  }
  e.final_norm = LayerNormParams::make(params, name + ".norm", width, ln_eps,
                                       first_depth_index + static_cast<int>(depth) - 1);
  return e;
}

Tensor Encoder::operator()(const Tensor& x) const {
  if (x.ndim() != 2) throw std::invalid_argument("encoder: expected (length, width) input");
  Tensor h = x;
  for (size_t i = 0; i < blocks.size(); ++i) {
    h = blocks[i](h);
    if (!h.all_finite()) {
      throw std::runtime_error("encoder: non-finite activations after block " + std::to_string(i));
    }
  }
  return final_norm(h);
}

}  // namespace mmim
