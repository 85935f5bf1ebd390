#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmim/config.hpp"
#include "mmim/mim.hpp"
#include "mmim/optim.hpp"
#include "mmim/params.hpp"
#include "mmim/rng.hpp"

namespace mmim {

enum class CkptDtype : uint8_t { f64 = 0, f32 = 1 };

struct NamedTensor {
  std::string name;
  CkptDtype dtype = CkptDtype::f64;
  Shape shape;
  std::vector<double> data;
};

/// Portable binary checkpoint. Little-endian layout:
///   "MMIM" | u32 version
///   u64 config_len | config text (canonical RunConfig serialization)
///   model tensor section
///   u8 has_optimizer [ u64 optimizer_step | optimizer tensor section ]
///   u8 has_ema       [ ema tensor section ]
///   u64 rng_len | rng state text
///   u64 step
/// A tensor section is a directory (u64 count; per tensor u64 name_len,
/// name, u8 dtype, u32 ndim, u64 dims..., u64 offset, u64 byte_length)
/// followed by u64 payload_len and the payload. Offsets are payload-
/// relative, contiguous and non-overlapping; save->load->save is
/// byte-identical.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;
  std::string config_text;
  std::vector<NamedTensor> model;
  bool has_optimizer = false;
  uint64_t optimizer_step = 0;
  std::vector<NamedTensor> optimizer;
  bool has_ema = false;
  std::vector<NamedTensor> ema;
  std::string rng_state;
  uint64_t step = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of model (and optionally optimizer) state. Tensor dtype follows
/// cfg.dtype. Optimizer EMA buffers go to the ema section.
Checkpoint checkpoint_from(const RunConfig& cfg, const MimModel& model, Optimizer* opt, const Rng& rng,
                           uint64_t step);

/// Loads tensors into matching params by name; throws on unknown names,
/// missing params or shape mismatches.
void load_into_params(const std::vector<NamedTensor>& tensors, ParamStore& params);

/// Restores optimizer moment/EMA buffers saved by checkpoint_from.
void load_optimizer_state(const Checkpoint& ckpt, Optimizer& opt);

/// Rebuilds the model a checkpoint was saved from (config + weights).
/// Tensors named head.* are returned separately for adapted checkpoints.
struct LoadedModel {
  RunConfig config;
  MimModel model;
  std::vector<NamedTensor> head_tensors;
};
LoadedModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace mmim
