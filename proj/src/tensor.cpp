#include "mmim/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace mmim {

namespace {

std::atomic<uint64_t> g_next_id{1};
Precision g_precision = Precision::f64;
thread_local bool g_grad_enabled = true;

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

Precision compute_precision() { return g_precision; }
void set_compute_precision(Precision p) { g_precision = p; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor ------------------------------------------------------------

namespace {

void round_if_f32(std::vector<double>& data) {
  if (g_precision == Precision::f32) {
    for (double& v : data) v = static_cast<double>(static_cast<float>(v));
  }
}

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  round_if_f32(n->data);
  n->requires_grad = requires_grad;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents, const char* op,
                   std::function<void(Node&)> bwd) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  round_if_f32(n->data);
  n->op = op;
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) rg = rg || p.requires_grad();
  }
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bwd);
  }
  return Tensor(std::move(n));
}

Node& deref(const Tensor& t, const char* op) {
  auto n = t.node();
  if (!n) throw std::invalid_argument(std::string(op) + ": undefined tensor");
  return *n;
}

std::vector<double>& grad_of(Tensor& p) {
  p.node()->ensure_grad();
  return p.node()->grad;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), 0.0);
  return Tensor(make_leaf(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), value);
  return Tensor(make_leaf(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = rng.normal() * stddev;
  return Tensor(make_leaf(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf(Shape{}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return deref(*this, "shape").shape; }
size_t Tensor::size() const { return deref(*this, "size").data.size(); }
bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool rg) { deref(*this, "set_requires_grad").requires_grad = rg; }

double* Tensor::data() { return deref(*this, "data").data.data(); }
const double* Tensor::data() const { return deref(*this, "data").data.data(); }
std::vector<double>& Tensor::vec() { return deref(*this, "vec").data; }
const std::vector<double>& Tensor::vec() const { return deref(*this, "vec").data; }

std::vector<double>& Tensor::grad() {
  Node& n = deref(*this, "grad");
  n.ensure_grad();
  return n.grad;
}

const std::vector<double>& Tensor::grad() const {
  Node& n = deref(*this, "grad");
  n.ensure_grad();
  return n.grad;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

void Tensor::zero_grad() {
  Node& n = deref(*this, "zero_grad");
  n.grad.assign(n.data.size(), 0.0);
}

double Tensor::item() const {
  const Node& n = deref(*this, "item");
  if (n.data.size() != 1) {
    throw std::invalid_argument("item: tensor has " + std::to_string(n.data.size()) + " elements");
  }
  return n.data[0];
}

double Tensor::at(std::initializer_list<size_t> idx) const {
  const Node& n = deref(*this, "at");
  if (idx.size() != n.shape.size()) throw std::invalid_argument("at: index rank mismatch");
  size_t off = 0;
  size_t d = 0;
  for (size_t i : idx) {
    if (i >= n.shape[d]) throw std::out_of_range("at: index out of range");
    off = off * n.shape[d] + i;
    ++d;
  }
  return n.data[off];
}

bool Tensor::all_finite() const {
  for (double v : deref(*this, "all_finite").data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::throw_if_nonfinite(const std::string& where) const {
  if (!all_finite()) throw std::runtime_error("non-finite value in " + where);
}

// ---- record / backward --------------------------------------------------

ComputationRecord record_from(const Tensor& root) {
  ComputationRecord rec;
  if (!root.defined()) return rec;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack;
  visited.insert(root.node().get());
  stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& top = stack.back();
    Node& n = *top.first;
    if (top.second < n.parents.size()) {
      auto pn = n.parents[top.second].node();
      ++top.second;
      if (pn && !visited.count(pn.get())) {
        visited.insert(pn.get());
        stack.emplace_back(std::move(pn), 0);
      }
    } else {
      rec.ops.push_back(top.first);
      stack.pop_back();
    }
  }
  return rec;
}

void backward(const Tensor& loss) {
  Node& root = deref(loss, "backward");
  if (root.data.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(root.shape));
  }
  ComputationRecord rec = record_from(loss);
  // Interior grads are scratch space for the sweep; only leaves accumulate
  // across calls.
  for (const auto& op : rec.ops) {
    if (op->backward_fn) op->grad.assign(op->data.size(), 0.0);
  }
  root.ensure_grad();
  root.grad[0] += 1.0;
  for (auto it = rec.ops.rbegin(); it != rec.ops.rend(); ++it) {
    Node& n = **it;
    if (!n.requires_grad || !n.backward_fn) continue;
    n.ensure_grad();
    n.backward_fn(n);
  }
}

// ---- broadcast machinery -------------------------------------------------

namespace {

struct BcastPlan {
  Shape out;
  std::vector<size_t> a_stride, b_stride;  // element strides per out dim; 0 on broadcast dims
  size_t n = 0;
};

std::vector<size_t> contiguous_strides(const Shape& s) {
  std::vector<size_t> st(s.size(), 1);
  for (size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
  return st;
}

BcastPlan make_bcast_plan(const Shape& a, const Shape& b, const char* op) {
  const size_t nd = std::max(a.size(), b.size());
  BcastPlan p;
  p.out.resize(nd);
  p.a_stride.assign(nd, 0);
  p.b_stride.assign(nd, 0);
  const auto as = contiguous_strides(a);
  const auto bs = contiguous_strides(b);
  for (size_t d = 0; d < nd; ++d) {
    const bool ha = d >= nd - a.size();
    const bool hb = d >= nd - b.size();
    const size_t da = ha ? a[d - (nd - a.size())] : 1;
    const size_t db = hb ? b[d - (nd - b.size())] : 1;
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument(std::string(op) + ": shapes not broadcastable: " + shape_str(a) + " vs " +
                                  shape_str(b));
    }
    p.out[d] = da == 1 ? db : da;  // a size-1 dim follows the other side, including 0
    if (ha && !(da == 1 && p.out[d] != 1)) p.a_stride[d] = as[d - (nd - a.size())];
    if (hb && !(db == 1 && p.out[d] != 1)) p.b_stride[d] = bs[d - (nd - b.size())];
  }
  p.n = shape_numel(p.out);
  return p;
}

template <typename F>
void for_each_bcast(const BcastPlan& p, F&& f) {
  if (p.n == 0) return;
  const size_t nd = p.out.size();
  if (nd == 0) {
    f(size_t{0}, size_t{0}, size_t{0});
    return;
  }
  std::vector<size_t> idx(nd, 0);
  size_t ao = 0, bo = 0;
  for (size_t lin = 0;;) {
    f(lin, ao, bo);
    if (++lin == p.n) break;
    for (size_t d = nd; d-- > 0;) {
      ++idx[d];
      ao += p.a_stride[d];
      bo += p.b_stride[d];
      if (idx[d] < p.out[d]) break;
      ao -= p.a_stride[d] * p.out[d];
      bo -= p.b_stride[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { add, sub, mul };

Tensor binary_elementwise(const Tensor& a, const Tensor& b, BinOp kind, const char* name) {
  const Node& na = deref(a, name);
  const Node& nb = deref(b, name);
  BcastPlan plan = make_bcast_plan(na.shape, nb.shape, name);
  std::vector<double> out(plan.n);
  const double* ad = na.data.data();
  const double* bd = nb.data.data();
  if (na.shape == nb.shape) {
    switch (kind) {
      case BinOp::add:
        for (size_t i = 0; i < plan.n; ++i) out[i] = ad[i] + bd[i];
        break;
      case BinOp::sub:
        for (size_t i = 0; i < plan.n; ++i) out[i] = ad[i] - bd[i];
        break;
      case BinOp::mul:
        for (size_t i = 0; i < plan.n; ++i) out[i] = ad[i] * bd[i];
        break;
    }
  } else {
    switch (kind) {
      case BinOp::add:
        for_each_bcast(plan, [&](size_t lin, size_t ao, size_t bo) { out[lin] = ad[ao] + bd[bo]; });
        break;
      case BinOp::sub:
        for_each_bcast(plan, [&](size_t lin, size_t ao, size_t bo) { out[lin] = ad[ao] - bd[bo]; });
        break;
      case BinOp::mul:
        for_each_bcast(plan, [&](size_t lin, size_t ao, size_t bo) { out[lin] = ad[ao] * bd[bo]; });
        break;
    }
  }
  return make_result(plan.out, std::move(out), {a, b}, name, [plan, kind](Node& self) {
    Tensor& pa = self.parents[0];
    Tensor& pb = self.parents[1];
    const double* g = self.grad.data();
    const double* ad = pa.data();
    const double* bd = pb.data();
    if (pa.requires_grad()) {
      auto& ga = grad_of(pa);
      switch (kind) {
        case BinOp::add:
        case BinOp::sub:
          for_each_bcast(plan, [&](size_t lin, size_t ao, size_t) { ga[ao] += g[lin]; });
          break;
        case BinOp::mul:
          for_each_bcast(plan, [&](size_t lin, size_t ao, size_t bo) { ga[ao] += g[lin] * bd[bo]; });
          break;
      }
    }
    if (pb.requires_grad()) {
      auto& gb = grad_of(pb);
      switch (kind) {
        case BinOp::add:
          for_each_bcast(plan, [&](size_t lin, size_t, size_t bo) { gb[bo] += g[lin]; });
          break;
        case BinOp::sub:
          for_each_bcast(plan, [&](size_t lin, size_t, size_t bo) { gb[bo] -= g[lin]; });
          break;
        case BinOp::mul:
          for_each_bcast(plan, [&](size_t lin, size_t ao, size_t bo) { gb[bo] += g[lin] * ad[ao]; });
          break;
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinOp::mul, "mul"); }

Tensor scalar_mul(const Tensor& a, double c) {
  const Node& na = deref(a, "scalar_mul");
  std::vector<double> out(na.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.data[i] * c;
  return make_result(na.shape, std::move(out), {a}, "scalar_mul", [c](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * c;
  });
}

Tensor scalar_add(const Tensor& a, double c) {
  const Node& na = deref(a, "scalar_add");
  std::vector<double> out(na.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.data[i] + c;
  return make_result(na.shape, std::move(out), {a}, "scalar_add", [](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---- matmul ---------------------------------------------------------------

namespace {

void gemm_acc(const double* a, const double* b, double* c, size_t M, size_t K, size_t N) {
  for (size_t m = 0; m < M; ++m) {
    const double* arow = a + m * K;
    double* crow = c + m * N;
    for (size_t k = 0; k < K; ++k) {
      const double av = arow[k];
      const double* brow = b + k * N;
      for (size_t n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

// dA[m,k] += sum_n dC[m,n] * B[k,n]
void gemm_da(const double* dc, const double* b, double* da, size_t M, size_t K, size_t N) {
  for (size_t m = 0; m < M; ++m) {
    const double* dcrow = dc + m * N;
    for (size_t k = 0; k < K; ++k) {
      const double* brow = b + k * N;
      double s = 0.0;
      for (size_t n = 0; n < N; ++n) s += dcrow[n] * brow[n];
      da[m * K + k] += s;
    }
  }
}

// dB[k,n] += sum_m A[m,k] * dC[m,n]
void gemm_db(const double* a, const double* dc, double* db, size_t M, size_t K, size_t N) {
  for (size_t m = 0; m < M; ++m) {
    const double* arow = a + m * K;
    const double* dcrow = dc + m * N;
    for (size_t k = 0; k < K; ++k) {
      const double av = arow[k];
      double* dbrow = db + k * N;
      for (size_t n = 0; n < N; ++n) dbrow[n] += av * dcrow[n];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Node& na = deref(a, "matmul");
  const Node& nb = deref(b, "matmul");
  const Shape& as = na.shape;
  const Shape& bs = nb.shape;
  if (as.size() < 2 || bs.size() < 2) {
    throw std::invalid_argument("matmul: operands need at least 2 dims: " + shape_str(as) + " x " + shape_str(bs));
  }
  const size_t M = as[as.size() - 2], K = as[as.size() - 1];
  const size_t Kb = bs[bs.size() - 2], N = bs[bs.size() - 1];
  if (K != Kb) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(as) + " x " + shape_str(bs));
  }
  Shape abatch(as.begin(), as.end() - 2);
  Shape bbatch(bs.begin(), bs.end() - 2);
  BcastPlan plan = make_bcast_plan(abatch, bbatch, "matmul");
  Shape out_shape = plan.out;
  out_shape.push_back(M);
  out_shape.push_back(N);
  std::vector<double> out(plan.n * M * N, 0.0);
  const double* ad = na.data.data();
  const double* bd = nb.data.data();
  for_each_bcast(plan, [&](size_t lin, size_t ao, size_t bo) {
    gemm_acc(ad + ao * M * K, bd + bo * K * N, out.data() + lin * M * N, M, K, N);
  });
  return make_result(std::move(out_shape), std::move(out), {a, b}, "matmul", [plan, M, K, N](Node& self) {
    Tensor& pa = self.parents[0];
    Tensor& pb = self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad()) {
      auto& ga = grad_of(pa);
      const double* bd = pb.data();
      for_each_bcast(plan, [&](size_t lin, size_t ao, size_t bo) {
        gemm_da(g + lin * M * N, bd + bo * K * N, ga.data() + ao * M * K, M, K, N);
      });
    }
    if (pb.requires_grad()) {
      auto& gb = grad_of(pb);
      const double* ad = pa.data();
      for_each_bcast(plan, [&](size_t lin, size_t ao, size_t bo) {
        gemm_db(ad + ao * M * K, g + lin * M * N, gb.data() + bo * K * N, M, K, N);
      });
    }
  });
}

// ---- shape ops --------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape new_shape) {
  const Node& na = deref(a, "reshape");
  if (shape_numel(new_shape) != na.data.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(na.shape) + " as " + shape_str(new_shape));
  }
  std::vector<double> out = na.data;
  return make_result(std::move(new_shape), std::move(out), {a}, "reshape", [](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

namespace {

// Calls f(out_linear, in_offset) over the output of a permutation.
template <typename F>
void permute_walk(const Shape& out_shape, const std::vector<size_t>& in_stride_per_out_dim, F&& f) {
  const size_t n = shape_numel(out_shape);
  if (n == 0) return;
  const size_t nd = out_shape.size();
  if (nd == 0) {
    f(size_t{0}, size_t{0});
    return;
  }
  std::vector<size_t> idx(nd, 0);
  size_t in_off = 0;
  for (size_t lin = 0;;) {
    f(lin, in_off);
    if (++lin == n) break;
    for (size_t d = nd; d-- > 0;) {
      ++idx[d];
      in_off += in_stride_per_out_dim[d];
      if (idx[d] < out_shape[d]) break;
      in_off -= in_stride_per_out_dim[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<size_t>& axes) {
  const Node& na = deref(a, "permute");
  const size_t nd = na.shape.size();
  if (axes.size() != nd) throw std::invalid_argument("permute: axes rank mismatch");
  std::vector<bool> seen(nd, false);
  for (size_t ax : axes) {
    if (ax >= nd || seen[ax]) throw std::invalid_argument("permute: invalid axis list");
    seen[ax] = true;
  }
  const auto in_strides = contiguous_strides(na.shape);
  Shape out_shape(nd);
  std::vector<size_t> stride_map(nd);
  for (size_t d = 0; d < nd; ++d) {
    out_shape[d] = na.shape[axes[d]];
    stride_map[d] = in_strides[axes[d]];
  }
  std::vector<double> out(na.data.size());
  const double* ad = na.data.data();
  permute_walk(out_shape, stride_map, [&](size_t lin, size_t in_off) { out[lin] = ad[in_off]; });
  return make_result(out_shape, std::move(out), {a}, "permute", [out_shape, stride_map](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    const double* g = self.grad.data();
    permute_walk(out_shape, stride_map, [&](size_t lin, size_t in_off) { ga[in_off] += g[lin]; });
  });
}

Tensor transpose_last2(const Tensor& a) {
  const size_t nd = deref(a, "transpose_last2").shape.size();
  if (nd < 2) throw std::invalid_argument("transpose_last2: needs at least 2 dims");
  std::vector<size_t> axes(nd);
  for (size_t d = 0; d < nd; ++d) axes[d] = d;
  std::swap(axes[nd - 1], axes[nd - 2]);
  return permute(a, axes);
}

// ---- row ops ---------------------------------------------------------------

namespace {

void require_rows(const Node& n, const char* op) {
  if (n.shape.empty()) throw std::invalid_argument(std::string(op) + ": tensor must have at least 1 dim");
}

size_t row_size(const Shape& s) {
  size_t r = 1;
  for (size_t d = 1; d < s.size(); ++d) r *= s[d];
  return r;
}

}  // namespace

Tensor gather_rows(const Tensor& x, const std::vector<size_t>& idx) {
  const Node& nx = deref(x, "gather_rows");
  require_rows(nx, "gather_rows");
  const size_t rows = nx.shape[0];
  const size_t rsz = row_size(nx.shape);
  for (size_t r : idx) {
    if (r >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(r) + " out of " + std::to_string(rows));
    }
  }
  Shape out_shape = nx.shape;
  out_shape[0] = idx.size();
  std::vector<double> out(idx.size() * rsz);
  for (size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(nx.data.data() + idx[r] * rsz, rsz, out.data() + r * rsz);
  }
  return make_result(std::move(out_shape), std::move(out), {x}, "gather_rows", [idx, rsz](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    const double* g = self.grad.data();
    for (size_t r = 0; r < idx.size(); ++r) {
      double* dst = ga.data() + idx[r] * rsz;
      const double* src = g + r * rsz;
      for (size_t j = 0; j < rsz; ++j) dst[j] += src[j];
    }
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  const Node& na = deref(a, "concat_rows");
  const Node& nb = deref(b, "concat_rows");
  require_rows(na, "concat_rows");
  require_rows(nb, "concat_rows");
  if (na.shape.size() != nb.shape.size() ||
      !std::equal(na.shape.begin() + 1, na.shape.end(), nb.shape.begin() + 1)) {
    throw std::invalid_argument("concat_rows: trailing dims differ: " + shape_str(na.shape) + " vs " +
                                shape_str(nb.shape));
  }
  Shape out_shape = na.shape;
  out_shape[0] = na.shape[0] + nb.shape[0];
  std::vector<double> out;
  out.reserve(na.data.size() + nb.data.size());
  out.insert(out.end(), na.data.begin(), na.data.end());
  out.insert(out.end(), nb.data.begin(), nb.data.end());
  const size_t asize = na.data.size();
  return make_result(std::move(out_shape), std::move(out), {a, b}, "concat_rows", [asize](Node& self) {
    Tensor& pa = self.parents[0];
    Tensor& pb = self.parents[1];
    const double* g = self.grad.data();
    if (pa.requires_grad()) {
      auto& ga = grad_of(pa);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
    if (pb.requires_grad()) {
      auto& gb = grad_of(pb);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[asize + i];
    }
  });
}

Tensor slice_rows(const Tensor& x, size_t start, size_t len) {
  const Node& nx = deref(x, "slice_rows");
  require_rows(nx, "slice_rows");
  const size_t rows = nx.shape[0];
  if (start + len > rows) {
    throw std::out_of_range("slice_rows: [" + std::to_string(start) + "," + std::to_string(start + len) +
                            ") out of " + std::to_string(rows) + " rows");
  }
  const size_t rsz = row_size(nx.shape);
  Shape out_shape = nx.shape;
  out_shape[0] = len;
  std::vector<double> out(nx.data.begin() + start * rsz, nx.data.begin() + (start + len) * rsz);
  return make_result(std::move(out_shape), std::move(out), {x}, "slice_rows", [start, rsz](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    const double* g = self.grad.data();
    const size_t n = self.grad.size();
    for (size_t i = 0; i < n; ++i) ga[start * rsz + i] += g[i];
  });
}

// ---- nonlinearities ----------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  const Node& nx = deref(x, "softmax");
  if (nx.shape.empty() || nx.shape.back() == 0) {
    throw std::invalid_argument("softmax: empty last dimension in shape " + shape_str(nx.shape));
  }
  const size_t last = nx.shape.back();
  const size_t rows = nx.data.size() / last;
  std::vector<double> out(nx.data.size());
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = nx.data.data() + r * last;
    double* yr = out.data() + r * last;
    double m = xr[0];
    for (size_t i = 1; i < last; ++i) m = std::max(m, xr[i]);
    double s = 0.0;
    for (size_t i = 0; i < last; ++i) {
      yr[i] = std::exp(xr[i] - m);
      s += yr[i];
    }
    for (size_t i = 0; i < last; ++i) yr[i] /= s;
  }
  return make_result(nx.shape, std::move(out), {x}, "softmax", [last, rows](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    for (size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * last;
      const double* g = self.grad.data() + r * last;
      double dot = 0.0;
      for (size_t i = 0; i < last; ++i) dot += g[i] * y[i];
      double* dst = ga.data() + r * last;
      for (size_t i = 0; i < last; ++i) dst[i] += y[i] * (g[i] - dot);
    }
  });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  const Node& nx = deref(x, "log_softmax");
  if (nx.shape.empty() || nx.shape.back() == 0) {
    throw std::invalid_argument("log_softmax: empty last dimension in shape " + shape_str(nx.shape));
  }
  const size_t last = nx.shape.back();
  const size_t rows = nx.data.size() / last;
  std::vector<double> out(nx.data.size());
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = nx.data.data() + r * last;
    double* yr = out.data() + r * last;
    double m = xr[0];
    for (size_t i = 1; i < last; ++i) m = std::max(m, xr[i]);
    double s = 0.0;
    for (size_t i = 0; i < last; ++i) s += std::exp(xr[i] - m);
    const double lse = m + std::log(s);
    for (size_t i = 0; i < last; ++i) yr[i] = xr[i] - lse;
  }
  return make_result(nx.shape, std::move(out), {x}, "log_softmax", [last, rows](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    for (size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * last;
      const double* g = self.grad.data() + r * last;
      double gsum = 0.0;
      for (size_t i = 0; i < last; ++i) gsum += g[i];
      double* dst = ga.data() + r * last;
      for (size_t i = 0; i < last; ++i) dst[i] += g[i] - std::exp(y[i]) * gsum;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Node& nx = deref(x, "layer_norm");
  const Node& ng = deref(gamma, "layer_norm");
  const Node& nb = deref(beta, "layer_norm");
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
  if (nx.shape.empty()) throw std::invalid_argument("layer_norm: input must have at least 1 dim");
  const size_t N = nx.shape.back();
  if (ng.shape != Shape{N} || nb.shape != Shape{N}) {
    throw std::invalid_argument("layer_norm: gamma/beta must have shape (" + std::to_string(N) + ")");
  }
  const size_t rows = nx.data.size() / std::max<size_t>(N, 1);
  if (N == 0) throw std::invalid_argument("layer_norm: empty last dimension");
  std::vector<double> out(nx.data.size());
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = nx.data.data() + r * N;
    double* yr = out.data() + r * N;
    double mu = 0.0;
    for (size_t i = 0; i < N; ++i) mu += xr[i];
    mu /= static_cast<double>(N);
    double var = 0.0;
    for (size_t i = 0; i < N; ++i) {
      const double d = xr[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(N);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (size_t i = 0; i < N; ++i) yr[i] = ng.data[i] * ((xr[i] - mu) * inv) + nb.data[i];
  }
  return make_result(nx.shape, std::move(out), {x, gamma, beta}, "layer_norm", [N, rows, eps](Node& self) {
    Tensor& px = self.parents[0];
    Tensor& pg = self.parents[1];
    Tensor& pb = self.parents[2];
    const double* xd = px.data();
    const double* gm = pg.data();
    const double* g = self.grad.data();
    const double dN = static_cast<double>(N);
    std::vector<double> xhat(N);
    for (size_t r = 0; r < rows; ++r) {
      const double* xr = xd + r * N;
      const double* gr = g + r * N;
      double mu = 0.0;
      for (size_t i = 0; i < N; ++i) mu += xr[i];
      mu /= dN;
      double var = 0.0;
      for (size_t i = 0; i < N; ++i) {
        const double d = xr[i] - mu;
        var += d * d;
      }
      var /= dN;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (size_t i = 0; i < N; ++i) xhat[i] = (xr[i] - mu) * inv;
      if (pg.requires_grad()) {
        auto& gg = grad_of(pg);
        for (size_t i = 0; i < N; ++i) gg[i] += gr[i] * xhat[i];
      }
      if (pb.requires_grad()) {
        auto& gb = grad_of(pb);
        for (size_t i = 0; i < N; ++i) gb[i] += gr[i];
      }
      if (px.requires_grad()) {
        auto& gx = grad_of(px);
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (size_t i = 0; i < N; ++i) {
          const double dxhat = gr[i] * gm[i];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat[i];
        }
        double* dst = gx.data() + r * N;
        for (size_t i = 0; i < N; ++i) {
          const double dxhat = gr[i] * gm[i];
          dst[i] += inv * (dxhat - sum_dxhat / dN - xhat[i] * sum_dxhat_xhat / dN);
        }
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  const Node& nx = deref(x, "gelu");
  std::vector<double> out(nx.data.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = nx.data[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  return make_result(nx.shape, std::move(out), {x}, "gelu", [](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    const double* xd = p.data();
    for (size_t i = 0; i < ga.size(); ++i) {
      const double v = xd[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      ga[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  const Node& nx = deref(x, "sigmoid");
  std::vector<double> out(nx.data.size());
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = nx.data[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_result(nx.shape, std::move(out), {x}, "sigmoid", [](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    for (size_t i = 0; i < ga.size(); ++i) {
      const double y = self.data[i];
      ga[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

// ---- reductions -----------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  const Node& nx = deref(x, "sum_all");
  double s = 0.0;
  for (double v : nx.data) s += v;
  return make_result(Shape{}, {s}, {x}, "sum_all", [](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    const double g = self.grad[0];
    for (double& v : ga) v += g;
  });
}

Tensor mean_all(const Tensor& x) {
  const size_t n = deref(x, "mean_all").data.size();
  if (n == 0) throw std::invalid_argument("mean_all: empty tensor");
  return scalar_mul(sum_all(x), 1.0 / static_cast<double>(n));
}

Tensor sum_axis0(const Tensor& x) {
  const Node& nx = deref(x, "sum_axis0");
  require_rows(nx, "sum_axis0");
  const size_t rows = nx.shape[0];
  const size_t rsz = row_size(nx.shape);
  Shape out_shape(nx.shape.begin() + 1, nx.shape.end());
  std::vector<double> out(rsz, 0.0);
  for (size_t r = 0; r < rows; ++r) {
    const double* src = nx.data.data() + r * rsz;
    for (size_t j = 0; j < rsz; ++j) out[j] += src[j];
  }
  return make_result(std::move(out_shape), std::move(out), {x}, "sum_axis0", [rows, rsz](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    const double* g = self.grad.data();
    for (size_t r = 0; r < rows; ++r) {
      double* dst = ga.data() + r * rsz;
      for (size_t j = 0; j < rsz; ++j) dst[j] += g[j];
    }
  });
}

Tensor mean_axis0(const Tensor& x) {
  const Node& nx = deref(x, "mean_axis0");
  require_rows(nx, "mean_axis0");
  if (nx.shape[0] == 0) throw std::invalid_argument("mean_axis0: empty axis");
  return scalar_mul(sum_axis0(x), 1.0 / static_cast<double>(nx.shape[0]));
}

// ---- losses ---------------------------------------------------------------

Tensor nll_rows(const Tensor& log_probs, const std::vector<int>& labels) {
  const Node& nx = deref(log_probs, "nll_rows");
  if (nx.shape.size() != 2) throw std::invalid_argument("nll_rows: expected (rows, classes) input");
  const size_t R = nx.shape[0];
  const size_t C = nx.shape[1];
  if (labels.size() != R) throw std::invalid_argument("nll_rows: label count mismatch");
  if (R == 0) throw std::invalid_argument("nll_rows: empty input");
  double s = 0.0;
  for (size_t r = 0; r < R; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<size_t>(y) >= C) throw std::out_of_range("nll_rows: label out of range");
    s -= nx.data[r * C + static_cast<size_t>(y)];
  }
  s /= static_cast<double>(R);
  return make_result(Shape{}, {s}, {log_probs}, "nll_rows", [labels, C, R](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    const double g = self.grad[0] / static_cast<double>(R);
    for (size_t r = 0; r < R; ++r) ga[r * C + static_cast<size_t>(labels[r])] -= g;
  });
}

Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
  const Node& nx = deref(logits, "bce_with_logits");
  if (targets.size() != nx.data.size()) throw std::invalid_argument("bce_with_logits: target count mismatch");
  if (nx.data.empty()) throw std::invalid_argument("bce_with_logits: empty input");
  double s = 0.0;
  for (size_t i = 0; i < nx.data.size(); ++i) {
    const double z = nx.data[i];
    s += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  s /= static_cast<double>(nx.data.size());
  return make_result(Shape{}, {s}, {logits}, "bce_with_logits", [targets](Node& self) {
    Tensor& p = self.parents[0];
    if (!p.requires_grad()) return;
    auto& ga = grad_of(p);
    const double* zd = p.data();
    const double g = self.grad[0] / static_cast<double>(targets.size());
    for (size_t i = 0; i < ga.size(); ++i) {
      const double z = zd[i];
      const double sig = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      ga[i] += g * (sig - targets[i]);
    }
  });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const Node& nx = deref(logits, "cross_entropy");
  Tensor l2 = nx.shape.size() == 1 ? reshape(logits, Shape{1, nx.shape[0]}) : logits;
  return nll_rows(log_softmax_lastdim(l2), labels);
}

}  // namespace mmim
