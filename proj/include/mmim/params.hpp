#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmim/tensor.hpp"

namespace mmim {

struct ParamInfo {
  std::string name;
  Tensor tensor;
  bool weight_decay = true;  // layer norms, biases and special tokens opt out
  int depth_index = 0;       // 0 = embedder side, max = head side
};

/// Named trainable tensors in deterministic (insertion) order. The order
/// fixes optimizer iteration, checkpoint layout and digests.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor t, bool weight_decay = true, int depth_index = 0) {
    if (index_.count(name)) throw std::invalid_argument("param already registered: " + name);
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.push_back(ParamInfo{std::move(name), t, weight_decay, depth_index});
    return items_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ParamInfo& info(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown param: " + name);
    return items_[it->second];
  }

  Tensor& get(const std::string& name) { return info(name).tensor; }

  const std::vector<ParamInfo>& items() const { return items_; }
  std::vector<ParamInfo>& items() { return items_; }

  size_t total_size() const {
    size_t n = 0;
    for (const auto& p : items_) n += p.tensor.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

 private:
  std::vector<ParamInfo> items_;
  std::map<std::string, size_t> index_;
};

}  // namespace mmim
