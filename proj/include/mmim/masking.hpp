#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mmim/tensor.hpp"
#include "mmim/vit.hpp"

namespace mmim {

/// Per-token drop decisions for one sequence.
struct MaskSpec {
  std::vector<uint8_t> dropped;  // 1 = dropped
  double rho = 0.0;
  uint64_t seed = 0;

  size_t size() const { return dropped.size(); }
  size_t num_dropped() const;
  size_t num_visible() const { return size() - num_dropped(); }
  std::vector<size_t> dropped_indices() const;
  std::vector<size_t> visible_indices() const;
};

/// I.i.d. Bernoulli(rho) drop decisions, reproducible from the seed.
/// If rho > 0 and no token was dropped, the draw is repeated once; if still
/// empty, one uniformly chosen token is force-dropped so the masked loss is
/// well defined.
MaskSpec sample_mask(size_t length, double rho, uint64_t seed);

/// Alternative fixed-count mode: drops exactly round(rho * L) tokens chosen
/// by a seeded shuffle. Off by default everywhere.
MaskSpec sample_mask_fixed_count(size_t length, double rho, uint64_t seed);

/// Keeps the surviving tokens in order, with their original positions.
TokenSequence filter_visible(const TokenSequence& seq, const MaskSpec& mask);

/// Rebuilds the full-length sequence: visible slots take the descriptors in
/// order, dropped slots take mask_token + pos_table[i].
Tensor refill(const Tensor& descriptors, const MaskSpec& mask, const Tensor& mask_token,
              const Tensor& pos_table);

/// Adds a modality token to every element of each sequence, then
/// concatenates (modality 1 first). Tags each token with its modality id.
TokenSequence join_modalities(const TokenSequence& seq1, const TokenSequence& seq2, const Tensor& mod1,
                              const Tensor& mod2);

/// Splits a tagged joint sequence back into its per-modality segments.
std::pair<TokenSequence, TokenSequence> split_modalities(const TokenSequence& joint);

}  // namespace mmim
