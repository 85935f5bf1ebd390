#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mmim/gradcheck.hpp"
#include "mmim/rng.hpp"
#include "mmim/tensor.hpp"

using namespace mmim;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, bool rg = false) {
  return Tensor::randn(std::move(shape), rng, 1.0, rg);
}

}  // namespace

TEST_CASE("matmul identity and hand-computed products") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor c = matmul(a, eye);
  CHECK(c.vec() == std::vector<double>{1, 2, 3, 4});

  Tensor r = matmul(Tensor::from_data({1, 2}, {1, 2}), Tensor::from_data({2, 1}, {3, 4}));
  CHECK(r.shape() == Shape{1, 1});
  CHECK(r.item() == 11.0);

  CHECK_THROWS_WITH_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                       doctest::Contains("inner dimensions disagree"), std::invalid_argument);
}

TEST_CASE("matmul batching and broadcast") {
  Rng rng(7);
  Tensor a = rand_tensor({3, 2, 4}, rng);
  Tensor b = rand_tensor({4, 5}, rng);
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{3, 2, 5});
  // batch 1 against plain 2-D must equal slicing first
  Tensor a1 = slice_rows(a, 1, 1);
  Tensor c1 = matmul(reshape(a1, {2, 4}), b);
  for (size_t i = 0; i < 10; ++i) {
    CHECK(c.vec()[10 + i] == doctest::Approx(c1.vec()[i]).epsilon(1e-15));
  }
}

TEST_CASE("matmul associativity on small random matrices") {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    Tensor a = rand_tensor({4, 3}, rng);
    Tensor b = rand_tensor({3, 5}, rng);
    Tensor c = rand_tensor({5, 2}, rng);
    Tensor left = matmul(matmul(a, b), c);
    Tensor right = matmul(a, matmul(b, c));
    for (size_t i = 0; i < left.size(); ++i) {
      CHECK(left.vec()[i] == doctest::Approx(right.vec()[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("softmax rows") {
  Tensor y = softmax_lastdim(Tensor::from_data({2}, {0, 0}));
  CHECK(y.vec()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y.vec()[1] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor big = softmax_lastdim(Tensor::from_data({2}, {1000, 0}));
  CHECK(big.all_finite());
  CHECK(big.vec()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(big.vec()[1] == doctest::Approx(0.0).epsilon(1e-12));

  Tensor t = softmax_lastdim(Tensor::from_data({2}, {std::log(2.0), 0.0}));
  CHECK(t.vec()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(t.vec()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

  CHECK_THROWS_AS(softmax_lastdim(Tensor::scalar(1.0)), std::invalid_argument);
}

TEST_CASE("softmax rows sum to one and stay in [0,1]") {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    Tensor x = rand_tensor({4, 7}, rng);
    Tensor y = softmax_lastdim(scalar_mul(x, 10.0));
    for (size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (size_t i = 0; i < 7; ++i) {
        double v = y.vec()[r * 7 + i];
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        s += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer_norm examples") {
  Tensor g1 = Tensor::full({3}, 1.0);
  Tensor b0 = Tensor::zeros({3});
  Tensor y = layer_norm(Tensor::from_data({3}, {5, 5, 5}), g1, b0, 1e-6);
  for (double v : y.vec()) CHECK(v == 0.0);

  Tensor g2 = Tensor::full({2}, 1.0);
  Tensor y2 = layer_norm(Tensor::from_data({2}, {1, -1}), g2, Tensor::zeros({2}), 1e-12);
  CHECK(y2.vec()[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(y2.vec()[1] == doctest::Approx(-1.0).epsilon(1e-10));

  Tensor y3 = layer_norm(Tensor::from_data({2}, {1, -1}), g2, Tensor::full({2}, 2.0), 1e-12);
  CHECK(y3.vec()[0] == doctest::Approx(3.0).epsilon(1e-10));
  CHECK(y3.vec()[1] == doctest::Approx(1.0).epsilon(1e-10));

  CHECK_THROWS_WITH_AS(layer_norm(Tensor::zeros({2}), g2, b0, 0.0), doctest::Contains("eps"),
                       std::invalid_argument);
}

TEST_CASE("gelu values against the erf oracle") {
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(gelu(Tensor::scalar(10.0)).item() == doctest::Approx(10.0).epsilon(1e-9));
  // oracle: x * Phi(x) evaluated directly
  const double phi1 = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
  CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(1.0 * phi1).epsilon(1e-12));
  CHECK(gelu(Tensor::scalar(1.0)).item() == doctest::Approx(0.8413).epsilon(1e-4));
}

TEST_CASE("backward on scalar chain") {
  Tensor w = Tensor::scalar(3.0, true);
  Tensor loss = mul(w, w);
  backward(loss);
  CHECK(w.grad()[0] == 6.0);

  // unused parameter stays at zero
  Tensor unused = Tensor::scalar(5.0, true);
  CHECK(unused.grad()[0] == 0.0);

  CHECK_THROWS_WITH_AS(backward(Tensor::zeros({2}, true)), doctest::Contains("scalar"), std::invalid_argument);
}

TEST_CASE("backward accumulates until grads are cleared") {
  Tensor w = Tensor::scalar(2.0, true);
  Tensor loss = mul(w, w);
  backward(loss);
  backward(loss);
  CHECK(w.grad()[0] == 8.0);
  w.zero_grad();
  CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("computation record is topologically ordered") {
  Tensor w = Tensor::scalar(1.5, true);
  Tensor v = Tensor::scalar(-0.5, true);
  Tensor loss = sum_all(mul(add(w, v), gelu(w)));
  ComputationRecord rec = record_from(loss);
  REQUIRE(!rec.ops.empty());
  CHECK(rec.ops.back().get() == loss.node().get());
  std::vector<const Node*> seen;
  for (const auto& op : rec.ops) {
    for (const auto& parent : op->parents) {
      bool found = false;
      for (const Node* s : seen) found = found || s == parent.node().get();
      CHECK(found);
    }
    seen.push_back(op.get());
  }
}

TEST_CASE("fd_check on closed-form functions") {
  Tensor w = Tensor::scalar(2.0, true);
  double err = fd_check([&] { return mul(mul(w, w), w); }, {w}, {.step = 1e-5});
  CHECK(err < 1e-8);

  // |w| at 0 has no derivative; central differences report slope 0 against
  // whichever branch backward picked, so the check fails loudly.
  Tensor z = Tensor::scalar(0.0, true);
  auto abs_fn = [&] {
    Tensor s = sigmoid(scalar_mul(z, 1e9));  // smooth-ish stand-in is useless here; use mul sign trick
    return mul(z, s);
  };
  (void)abs_fn;
  double bad = fd_check(
      [&] {
        // x*sign(x) built from data inspection: derivative mismatch at 0
        double sgn = z.item() >= 0.0 ? 1.0 : -1.0;
        return scalar_mul(z, sgn);
      },
      {z}, {.step = 1e-5});
  // analytic grad is sign(0)=+1 while central difference sees 0 slope... both
  // evaluations give |x| so cd = (|h|-|h|)/2h = 0 vs analytic 1.
  CHECK(bad > 0.5);
}

TEST_CASE("fd_check rejects nondeterministic functions") {
  Tensor w = Tensor::scalar(1.0, true);
  int calls = 0;
  CHECK_THROWS_WITH_AS(fd_check(
                           [&] {
                             ++calls;
                             return scalar_mul(w, static_cast<double>(calls));
                           },
                           {w}),
                       doctest::Contains("deterministic"), std::runtime_error);
}

TEST_CASE("two-layer MLP gradients match finite differences") {
  Rng rng(42);
  Tensor w1 = rand_tensor({6, 8}, rng, true);
  Tensor b1 = rand_tensor({8}, rng, true);
  Tensor w2 = rand_tensor({8, 3}, rng, true);
  Tensor b2 = rand_tensor({3}, rng, true);
  Tensor x = rand_tensor({4, 6}, rng);

  auto f = [&] {
    Tensor h = gelu(add(matmul(x, w1), b1));
    Tensor out = add(matmul(h, w2), b2);
    return mean_all(mul(out, out));
  };
  double err = fd_check(f, {w1, b1, w2, b2}, {.step = 1e-5});
  CHECK(err < 1e-6);
}

TEST_CASE("per-primitive gradients match finite differences on random inputs") {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = rand_tensor({3, 4}, rng, true);
    Tensor b = rand_tensor({3, 4}, rng, true);
    Tensor v = rand_tensor({4}, rng, true);
    Tensor m = rand_tensor({4, 5}, rng, true);
    Tensor gmm = rand_tensor({4}, rng, true);
    Tensor bet = rand_tensor({4}, rng, true);

    // Mix outputs with fixed weights, plus a linear term per parameter so no
    // checked gradient coordinate sits near zero (where the relative error of
    // central differences is dominated by roundoff).
    auto weighted = [&](const Tensor& t, const std::vector<Tensor>& params) {
      Rng wr(1000 + t.size());
      Tensor weights = Tensor::randn({t.size()}, wr);
      Tensor loss = sum_all(mul(reshape(t, {t.size()}), weights));
      for (const auto& p : params) loss = add(loss, scalar_mul(sum_all(p), 1.1));
      return loss;
    };
    struct Case {
      const char* name;
      std::function<Tensor()> f;
      std::vector<Tensor> params;
    };
    std::vector<Case> cases = {
        {"add", [&] { return weighted(add(a, b), {a, b}); }, {a, b}},
        {"add_bcast", [&] { return weighted(add(a, v), {a, v}); }, {a, v}},
        {"sub", [&] { return weighted(sub(a, b), {a, b}); }, {a, b}},
        {"mul", [&] { return weighted(mul(a, b), {a, b}); }, {a, b}},
        {"mul_bcast", [&] { return weighted(mul(a, v), {a, v}); }, {a, v}},
        {"matmul", [&] { return weighted(matmul(a, m), {a, m}); }, {a, m}},
        {"softmax", [&] { return weighted(softmax_lastdim(a), {a}); }, {a}},
        {"log_softmax", [&] { return weighted(log_softmax_lastdim(a), {a}); }, {a}},
        {"layer_norm", [&] { return weighted(layer_norm(a, gmm, bet, 1e-5), {a, gmm, bet}); }, {a, gmm, bet}},
        {"gelu", [&] { return weighted(gelu(a), {a}); }, {a}},
        {"sigmoid", [&] { return weighted(sigmoid(a), {a}); }, {a}},
        {"permute", [&] { return weighted(transpose_last2(a), {a}); }, {a}},
        {"gather", [&] { return weighted(gather_rows(a, {2, 0, 2}), {a}); }, {a}},
        {"concat", [&] { return weighted(slice_rows(concat_rows(a, b), 1, 3), {a, b}); }, {a, b}},
        {"mean_axis0", [&] { return weighted(mean_axis0(a), {a}); }, {a}},
    };
    for (auto& c : cases) {
      double err = fd_check(c.f, c.params, {.step = 1e-5});
      INFO(std::string(c.name));
      CHECK(err < 1e-6);
      worst = std::max(worst, err);
    }
  }
  MESSAGE("worst primitive fd error: ", worst);
}

TEST_CASE("loss primitives") {
  Rng rng(5);
  Tensor logits = rand_tensor({3, 4}, rng, true);
  std::vector<int> labels = {1, 3, 0};
  double err = fd_check([&] { return cross_entropy(logits, labels); }, {logits});
  CHECK(err < 1e-6);

  Tensor z = rand_tensor({6}, rng, true);
  std::vector<double> targets = {1, 0, 1, 1, 0, 0};
  err = fd_check([&] { return bce_with_logits(z, targets); }, {z});
  CHECK(err < 1e-6);

  // bce at logit 0 is log(2) regardless of target
  Tensor zero = Tensor::zeros({1});
  CHECK(bce_with_logits(zero, {1.0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("backward is deterministic bit for bit") {
  auto run = [] {
    Rng rng(99);
    Tensor w1 = Tensor::randn({5, 5}, rng, 1.0, true);
    Tensor x = Tensor::randn({7, 5}, rng);
    Tensor loss = mean_all(mul(matmul(x, w1), matmul(x, w1)));
    backward(loss);
    return w1.grad();
  };
  auto g1 = run();
  auto g2 = run();
  CHECK(g1 == g2);
}

TEST_CASE("f32 precision mode rounds op results through float") {
  set_compute_precision(Precision::f32);
  Tensor a = Tensor::from_data({2}, {1.0 / 3.0, 2.0 / 3.0});
  Tensor y = scalar_mul(a, 1.0 / 7.0);
  for (double v : y.vec()) {
    CHECK(v == static_cast<double>(static_cast<float>(v)));
  }
  set_compute_precision(Precision::f64);
  Tensor y64 = scalar_mul(Tensor::from_data({1}, {1.0 / 3.0}), 1.0 / 7.0);
  CHECK(y64.vec()[0] == (1.0 / 3.0) * (1.0 / 7.0));
}

TEST_CASE("shape errors name the offending shapes") {
  CHECK_THROWS_WITH_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})), doctest::Contains("(2,3)"),
                       std::invalid_argument);
  CHECK_THROWS_AS(reshape(Tensor::zeros({4}), {3}), std::invalid_argument);
  CHECK_THROWS_AS(gather_rows(Tensor::zeros({2, 2}), {5}), std::out_of_range);
  CHECK_THROWS_AS(slice_rows(Tensor::zeros({2, 2}), 1, 4), std::out_of_range);
}

TEST_CASE("no-grad scope detaches results") {
  Tensor w = Tensor::scalar(2.0, true);
  {
    NoGradGuard ng;
    Tensor y = mul(w, w);
    CHECK(!y.requires_grad());
  }
  Tensor y = mul(w, w);
  CHECK(y.requires_grad());
}
