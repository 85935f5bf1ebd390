#include "mmim/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mmim {

size_t MaskSpec::num_dropped() const {
  return static_cast<size_t>(std::count(dropped.begin(), dropped.end(), uint8_t{1}));
}

std::vector<size_t> MaskSpec::dropped_indices() const {
  std::vector<size_t> idx;
  for (size_t i = 0; i < dropped.size(); ++i) {
    if (dropped[i]) idx.push_back(i);
  }
  return idx;
}

std::vector<size_t> MaskSpec::visible_indices() const {
  std::vector<size_t> idx;
  for (size_t i = 0; i < dropped.size(); ++i) {
    if (!dropped[i]) idx.push_back(i);
  }
  return idx;
}

MaskSpec sample_mask(size_t length, double rho, uint64_t seed) {
  if (rho < 0.0 || rho > 1.0) {
    throw std::invalid_argument("sample_mask: rho must be in [0,1], got " + std::to_string(rho));
  }
  MaskSpec spec;
  spec.rho = rho;
  spec.seed = seed;
  spec.dropped.resize(length, 0);
  Rng rng(seed);
  for (auto& d : spec.dropped) d = rng.bernoulli(rho) ? 1 : 0;
  if (rho > 0.0 && length > 0 && spec.num_dropped() == 0) {
    for (auto& d : spec.dropped) d = rng.bernoulli(rho) ? 1 : 0;
    if (spec.num_dropped() == 0) spec.dropped[rng.below(length)] = 1;
  }
  return spec;
}

MaskSpec sample_mask_fixed_count(size_t length, double rho, uint64_t seed) {
  if (rho < 0.0 || rho > 1.0) {
    throw std::invalid_argument("sample_mask: rho must be in [0,1], got " + std::to_string(rho));
  }
  MaskSpec spec;
  spec.rho = rho;
  spec.seed = seed;
  spec.dropped.resize(length, 0);
  size_t count = static_cast<size_t>(std::llround(rho * static_cast<double>(length)));
  if (rho > 0.0 && count == 0 && length > 0) count = 1;
  std::vector<size_t> order(length);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  for (size_t i = 0; i < count; ++i) spec.dropped[order[i]] = 1;
  return spec;
}

TokenSequence filter_visible(const TokenSequence& seq, const MaskSpec& mask) {
  if (seq.length() != mask.size()) {
    throw std::invalid_argument("filter_visible: sequence length " + std::to_string(seq.length()) +
                                " != mask length " + std::to_string(mask.size()));
  }
  const auto keep = mask.visible_indices();
  TokenSequence out;
  out.tokens = gather_rows(seq.tokens, keep);
  out.positions.reserve(keep.size());
  out.modality.reserve(keep.size());
  for (size_t i : keep) {
    out.positions.push_back(seq.positions[i]);
    out.modality.push_back(seq.modality[i]);
  }
  return out;
}

Tensor refill(const Tensor& descriptors, const MaskSpec& mask, const Tensor& mask_token,
              const Tensor& pos_table) {
  const size_t L = mask.size();
  const size_t visible = mask.num_visible();
  if (descriptors.ndim() != 2 || descriptors.shape()[0] != visible) {
    throw std::invalid_argument("refill: expected " + std::to_string(visible) + " descriptors, got " +
                                shape_str(descriptors.shape()));
  }
  const size_t D = descriptors.shape()[1];
  if (mask_token.shape() != Shape{D}) {
    throw std::invalid_argument("refill: mask token width mismatch: " + shape_str(mask_token.shape()));
  }
  if (pos_table.ndim() != 2 || pos_table.shape()[0] < L || pos_table.shape()[1] != D) {
    throw std::invalid_argument("refill: position table " + shape_str(pos_table.shape()) + " too small");
  }
  const auto dropped = mask.dropped_indices();
  Tensor filled_slots;
  if (dropped.empty()) {
    return descriptors;
  }
  Tensor pos_dropped = gather_rows(pos_table, dropped);
  filled_slots = add(pos_dropped, mask_token);  // broadcast over rows

  // Stack visible descriptors then mask slots, and permute rows back into
  // original order.
  Tensor stacked = concat_rows(descriptors, filled_slots);
  std::vector<size_t> order(L);
  size_t vis_rank = 0, drop_rank = 0;
  for (size_t i = 0; i < L; ++i) {
    order[i] = mask.dropped[i] ? visible + drop_rank++ : vis_rank++;
  }
  return gather_rows(stacked, order);
}

TokenSequence join_modalities(const TokenSequence& seq1, const TokenSequence& seq2, const Tensor& mod1,
                              const Tensor& mod2) {
  if (seq1.width() != seq2.width() && seq1.length() > 0 && seq2.length() > 0) {
    throw std::invalid_argument("join_modalities: widths differ: " + std::to_string(seq1.width()) + " vs " +
                                std::to_string(seq2.width()));
  }
  TokenSequence joint;
  if (seq1.length() == 0 && seq2.length() == 0) {
    joint.tokens = Tensor::zeros({0, mod1.shape()[0]});
  } else if (seq1.length() == 0) {
    joint.tokens = add(seq2.tokens, mod2);
  } else if (seq2.length() == 0) {
    joint.tokens = add(seq1.tokens, mod1);
  } else {
    joint.tokens = concat_rows(add(seq1.tokens, mod1), add(seq2.tokens, mod2));
  }
  joint.positions = seq1.positions;
  joint.positions.insert(joint.positions.end(), seq2.positions.begin(), seq2.positions.end());
  joint.modality.assign(seq1.length(), 0);
  joint.modality.insert(joint.modality.end(), seq2.length(), 1);
  return joint;
}

std::pair<TokenSequence, TokenSequence> split_modalities(const TokenSequence& joint) {
  const size_t L = joint.length();
  if (joint.modality.size() != L) throw std::invalid_argument("split_modalities: missing modality tags");
  size_t n1 = 0;
  for (size_t i = 0; i < L; ++i) {
    const int tag = joint.modality[i];
    if (tag != 0 && tag != 1) throw std::invalid_argument("split_modalities: untagged token in joint sequence");
    if (tag == 1 && i + 1 < L && joint.modality[i + 1] == 0) {
      throw std::invalid_argument("split_modalities: modality segments are not contiguous");
    }
    if (tag == 0) ++n1;
  }
  TokenSequence a, b;
  a.tokens = slice_rows(joint.tokens, 0, n1);
  b.tokens = slice_rows(joint.tokens, n1, L - n1);
  a.positions.assign(joint.positions.begin(), joint.positions.begin() + static_cast<long>(n1));
  b.positions.assign(joint.positions.begin() + static_cast<long>(n1), joint.positions.end());
  a.modality.assign(n1, 0);
  b.modality.assign(L - n1, 1);
  return {std::move(a), std::move(b)};
}

}  // namespace mmim
