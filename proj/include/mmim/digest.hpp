#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmim/params.hpp"

namespace mmim {

/// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  /// Hex digest; the object must not be updated afterwards.
  std::string hex_digest();

 private:
  void process_block(const uint8_t* block);
  uint32_t state_[8];
  uint64_t total_len_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
  bool finalized_ = false;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);

/// Digest over (name, raw float64 bytes) of every parameter the filter
/// accepts, in store order. Used to prove a probing run left the backbone
/// untouched.
std::string digest_params(const ParamStore& params,
                          const std::function<bool(const std::string&)>& filter = nullptr);

}  // namespace mmim
