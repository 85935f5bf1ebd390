#include "mmim/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

namespace mmim {

namespace {

void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u8(std::ostream& out, uint8_t v) { write_bytes(out, &v, 1); }

void write_u32(std::ostream& out, uint32_t v) {
  uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  write_bytes(out, b, 4);
}

void write_u64(std::ostream& out, uint64_t v) {
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  write_bytes(out, b, 8);
}

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  write_bytes(out, s.data(), s.size());
}

void read_bytes(std::istream& in, void* p, size_t n, const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
  }
}

uint8_t read_u8(std::istream& in, const char* what) {
  uint8_t v;
  read_bytes(in, &v, 1, what);
  return v;
}

uint32_t read_u32(std::istream& in, const char* what) {
  uint8_t b[4];
  read_bytes(in, b, 4, what);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& in, const char* what) {
  uint8_t b[8];
  read_bytes(in, b, 8, what);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

std::string read_string(std::istream& in, const char* what) {
  const uint64_t len = read_u64(in, what);
  if (len > (1ULL << 32)) throw std::runtime_error(std::string("checkpoint: implausible length for ") + what);
  std::string s(len, '\0');
  if (len) read_bytes(in, s.data(), len, what);
  return s;
}

size_t dtype_size(CkptDtype d) { return d == CkptDtype::f64 ? 8 : 4; }

void write_section(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  write_u64(out, tensors.size());
  uint64_t offset = 0;
  for (const auto& t : tensors) {
    write_string(out, t.name);
    write_u8(out, static_cast<uint8_t>(t.dtype));
    write_u32(out, static_cast<uint32_t>(t.shape.size()));
    for (size_t d : t.shape) write_u64(out, d);
    const uint64_t len = t.data.size() * dtype_size(t.dtype);
    write_u64(out, offset);
    write_u64(out, len);
    offset += len;
  }
  write_u64(out, offset);  // payload length
  for (const auto& t : tensors) {
    if (t.dtype == CkptDtype::f64) {
      write_bytes(out, t.data.data(), t.data.size() * 8);
    } else {
      std::vector<float> narrow(t.data.begin(), t.data.end());
      write_bytes(out, narrow.data(), narrow.size() * 4);
    }
  }
}

std::vector<NamedTensor> read_section(std::istream& in, const char* what) {
  const uint64_t count = read_u64(in, what);
  if (count > (1ULL << 24)) throw std::runtime_error("checkpoint: implausible tensor count");
  std::vector<NamedTensor> tensors(count);
  std::vector<std::pair<uint64_t, uint64_t>> extents(count);
  std::set<std::string> names;
  uint64_t expected_offset = 0;
  for (uint64_t i = 0; i < count; ++i) {
    auto& t = tensors[i];
    t.name = read_string(in, what);
    if (!names.insert(t.name).second) {
      throw std::runtime_error("checkpoint: duplicate tensor name " + t.name);
    }
    const uint8_t dt = read_u8(in, what);
    if (dt > 1) throw std::runtime_error("checkpoint: unknown dtype for " + t.name);
    t.dtype = static_cast<CkptDtype>(dt);
    const uint32_t ndim = read_u32(in, what);
    if (ndim > 16) throw std::runtime_error("checkpoint: implausible rank for " + t.name);
    t.shape.resize(ndim);
    for (auto& d : t.shape) d = read_u64(in, what);
    extents[i].first = read_u64(in, what);
    extents[i].second = read_u64(in, what);
    if (extents[i].first != expected_offset) {
      throw std::runtime_error("checkpoint: overlapping or out-of-order payload for " + t.name);
    }
    if (extents[i].second != shape_numel(t.shape) * dtype_size(t.dtype)) {
      throw std::runtime_error("checkpoint: payload length does not match shape for " + t.name);
    }
    expected_offset += extents[i].second;
  }
  const uint64_t payload_len = read_u64(in, what);
  if (payload_len != expected_offset) {
    throw std::runtime_error("checkpoint: payload length mismatch in section");
  }
  for (uint64_t i = 0; i < count; ++i) {
    auto& t = tensors[i];
    const size_t n = shape_numel(t.shape);
    t.data.resize(n);
    if (t.dtype == CkptDtype::f64) {
      read_bytes(in, t.data.data(), n * 8, what);
    } else {
      std::vector<float> narrow(n);
      read_bytes(in, narrow.data(), n * 4, what);
      for (size_t k = 0; k < n; ++k) t.data[k] = static_cast<double>(narrow[k]);
    }
  }
  return tensors;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  write_bytes(out, "MMIM", 4);
  write_u32(out, Checkpoint::kVersion);
  write_string(out, ckpt.config_text);
  write_section(out, ckpt.model);
  write_u8(out, ckpt.has_optimizer ? 1 : 0);
  if (ckpt.has_optimizer) {
    write_u64(out, ckpt.optimizer_step);
    write_section(out, ckpt.optimizer);
  }
  write_u8(out, ckpt.has_ema ? 1 : 0);
  if (ckpt.has_ema) write_section(out, ckpt.ema);
  write_string(out, ckpt.rng_state);
  write_u64(out, ckpt.step);
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  read_bytes(in, magic, 4, "magic");
  if (std::memcmp(magic, "MMIM", 4) != 0) {
    throw std::runtime_error("not a checkpoint (bad magic): " + path);
  }
  const uint32_t version = read_u32(in, "version");
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " (want " +
                             std::to_string(Checkpoint::kVersion) + "): " + path);
  }
  Checkpoint ckpt;
  ckpt.config_text = read_string(in, "config");
  ckpt.model = read_section(in, "model section");
  ckpt.has_optimizer = read_u8(in, "optimizer flag") != 0;
  if (ckpt.has_optimizer) {
    ckpt.optimizer_step = read_u64(in, "optimizer step");
    ckpt.optimizer = read_section(in, "optimizer section");
  }
  ckpt.has_ema = read_u8(in, "ema flag") != 0;
  if (ckpt.has_ema) ckpt.ema = read_section(in, "ema section");
  ckpt.rng_state = read_string(in, "rng state");
  ckpt.step = read_u64(in, "step");
  return ckpt;
}

Checkpoint checkpoint_from(const RunConfig& cfg, const MimModel& model, Optimizer* opt, const Rng& rng,
                           uint64_t step) {
  Checkpoint ckpt;
  ckpt.config_text = serialize_config(cfg);
  const CkptDtype dtype = cfg.dtype == "f32" ? CkptDtype::f32 : CkptDtype::f64;
  for (const auto& p : model.params.items()) {
    ckpt.model.push_back(NamedTensor{p.name, dtype, p.tensor.shape(), p.tensor.vec()});
  }
  if (opt) {
    ckpt.has_optimizer = true;
    ckpt.optimizer_step = opt->step_count();
    for (auto& [name, buf] : opt->state_buffers()) {
      NamedTensor t{name, dtype, Shape{buf->size()}, *buf};
      if (name.rfind("ema.", 0) == 0) {
        ckpt.ema.push_back(std::move(t));
      } else {
        ckpt.optimizer.push_back(std::move(t));
      }
    }
    ckpt.has_ema = !ckpt.ema.empty();
  }
  ckpt.rng_state = rng.serialize();
  ckpt.step = step;
  return ckpt;
}

void load_into_params(const std::vector<NamedTensor>& tensors, ParamStore& params) {
  std::set<std::string> loaded;
  for (const auto& t : tensors) {
    if (!params.contains(t.name)) throw std::runtime_error("checkpoint: unknown parameter " + t.name);
    Tensor& dst = params.get(t.name);
    if (dst.shape() != t.shape) {
      throw std::runtime_error("checkpoint: shape mismatch for " + t.name + ": " + shape_str(t.shape) +
                               " vs " + shape_str(dst.shape()));
    }
    dst.vec() = t.data;
    loaded.insert(t.name);
  }
  for (const auto& p : params.items()) {
    if (!loaded.count(p.name)) throw std::runtime_error("checkpoint: missing parameter " + p.name);
  }
}

void load_optimizer_state(const Checkpoint& ckpt, Optimizer& opt) {
  if (!ckpt.has_optimizer) throw std::runtime_error("checkpoint carries no optimizer state");
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : ckpt.optimizer) by_name[t.name] = &t;
  for (const auto& t : ckpt.ema) by_name[t.name] = &t;
  for (auto& [name, buf] : opt.state_buffers()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing optimizer buffer " + name);
    if (it->second->data.size() != buf->size()) {
      throw std::runtime_error("checkpoint: optimizer buffer size mismatch for " + name);
    }
    *buf = it->second->data;
  }
  opt.set_step_count(ckpt.optimizer_step);
}

LoadedModel model_from_checkpoint(const Checkpoint& ckpt) {
  RunConfig cfg = parse_config_text(ckpt.config_text);
  cfg.validate();
  LoadedModel out{cfg, MimModel::make(cfg.mim_config(), cfg.seed), {}};
  std::vector<NamedTensor> backbone;
  for (const auto& t : ckpt.model) {
    if (t.name.rfind("head", 0) == 0) {
      out.head_tensors.push_back(t);
    } else {
      backbone.push_back(t);
    }
  }
  load_into_params(backbone, out.model.params);
  return out;
}

}  // namespace mmim
