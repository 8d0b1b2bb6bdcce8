// Tensor/autograd foundations: gradient checks against central finite
// differences (double precision, h = 1e-6), masked-softmax structural zeros,
// optimizer behavior, and RNG stream independence.

#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"

#include "slotdrive/autograd.hpp"
#include "slotdrive/layers.hpp"
#include "slotdrive/optim.hpp"
#include "slotdrive/rng.hpp"

using namespace slotdrive;
using nn::Tensor;
using nn::Var;

namespace {

// Central-difference gradient check of `loss_fn` w.r.t. every element of
// every parameter in `params`. Returns the worst relative error.
double gradcheck(const std::vector<Var<double>>& params,
                 const std::function<Var<double>()>& loss_fn, double h = 1e-6) {
  auto loss = loss_fn();
  nn::backward(loss);
  double worst = 0.0;
  for (const auto& p : params) {
    REQUIRE(p->has_grad());
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double lp = loss_fn()->value[0];
      p->value[i] = keep - h;
      const double lm = loss_fn()->value[0];
      p->value[i] = keep;
      const double fd = (lp - lm) / (2.0 * h);
      const double g = p->grad[i];
      const double rel =
          std::abs(fd - g) / std::max({1.0, std::abs(fd), std::abs(g)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

Tensor<double> randn(nn::Shape s, Rng& rng, double sd = 0.5) {
  return nn::randn_tensor<double>(std::move(s), rng, sd);
}

}  // namespace

TEST_CASE("rng: determinism and stream independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.below(1000) == b.below(1000));

  Rng s1(42, "one"), s2(42, "two");
  int diff = 0;
  for (int i = 0; i < 64; ++i)
    if (s1.below(1 << 20) != s2.below(1 << 20)) ++diff;
  CHECK(diff > 32);  // named streams decorrelate

  Rng u(7);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("tensor: shape bookkeeping") {
  Tensor<double> t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(2) == 4);
  t[23] = 1.5;
  CHECK(t.data[23] == 1.5);
}

TEST_CASE("autograd: linear/matmul chain gradcheck") {
  Rng rng(1, "gc");
  auto W = nn::param(randn({4, 3}, rng));
  auto b = nn::param(randn({3}, rng));
  auto x = nn::constant(randn({5, 4}, rng));
  auto tgt = randn({5, 3}, rng);
  auto fn = [&] { return nn::mse_sum(nn::linear(x, W, b), tgt); };
  CHECK(gradcheck({W, b}, fn) < 1e-6);
}

TEST_CASE("autograd: conv2d gradcheck") {
  Rng rng(2, "gc");
  nn::Conv2dLayer<double> conv(2, 3, 3, 2, 1, rng);
  auto x = nn::param(randn({2, 2, 6, 6}, rng));
  auto tgt = randn({2, 3, 3, 3}, rng);
  auto fn = [&] { return nn::mse_sum(conv.forward(x), tgt); };
  CHECK(gradcheck({conv.W, conv.b, x}, fn) < 1e-5);
}

TEST_CASE("autograd: layernorm + gelu + mlp gradcheck") {
  Rng rng(3, "gc");
  nn::LayerNormLayer<double> ln(6);
  nn::Mlp2<double> mlp(6, 8, 4, rng);
  auto x = nn::param(randn({3, 6}, rng));
  auto tgt = randn({3, 4}, rng);
  auto fn = [&] { return nn::mse_sum(mlp.forward(ln.forward(x)), tgt); };
  std::vector<Var<double>> ps{x, ln.gamma, ln.beta};
  CHECK(gradcheck(ps, fn) < 1e-5);
}

TEST_CASE("autograd: GRU cell gradcheck") {
  Rng rng(4, "gc");
  nn::GruCell<double> gru(5, 5, rng);
  auto x = nn::param(randn({3, 5}, rng));
  auto h = nn::param(randn({3, 5}, rng));
  auto tgt = randn({3, 5}, rng);
  auto fn = [&] { return nn::mse_sum(gru.forward(x, h), tgt); };
  CHECK(gradcheck({x, h}, fn) < 1e-5);
}

TEST_CASE("autograd: transformer block gradcheck") {
  Rng rng(5, "gc");
  nn::TransformerBlock<double> blk(8, 2, 16, rng);
  auto x = nn::param(randn({1, 4, 8}, rng));
  auto tgt = randn({1, 4, 8}, rng);
  auto fn = [&] { return nn::mse_sum(blk.forward(x), tgt); };
  CHECK(gradcheck({x}, fn) < 1e-5);
}

TEST_CASE("autograd: softmax_dim1 columns sum to one") {
  Rng rng(6, "gc");
  auto x = nn::constant(randn({2, 5, 7}, rng, 2.0));
  auto s = nn::softmax_dim1(x);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 7; ++c) {
      double sum = 0;
      for (int64_t k = 0; k < 5; ++k) sum += s->value[(b * 5 + k) * 7 + c];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("autograd: masked softmax zeroes banned entries and their grads") {
  Rng rng(7, "gc");
  const int64_t T = 6;
  auto x = nn::param(randn({1, T, T}, rng, 2.0));
  Tensor<uint8_t> mask({1, T, T});
  Rng mr(8, "mask");
  for (auto& m : mask.data) m = mr.bernoulli(0.6) ? 1 : 0;
  for (int64_t i = 0; i < T; ++i) mask[i * T + i] = 1;  // keep rows non-empty
  auto sm = nn::softmax_lastdim_masked(
      x, std::make_shared<Tensor<uint8_t>>(mask));

  for (int64_t i = 0; i < T * T; ++i) {
    if (!mask[i]) CHECK(sm->value[i] == 0.0);  // structurally zero
  }

  nn::backward(nn::sum_all(nn::mul(sm, sm)));
  for (int64_t i = 0; i < T * T; ++i) {
    if (!mask[i]) CHECK(x->grad[i] == 0.0);  // no gradient leaks through
  }

  // Rows renormalize over the allowed set.
  for (int64_t i = 0; i < T; ++i) {
    double sum = 0;
    for (int64_t j = 0; j < T; ++j) sum += sm->value[i * T + j];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("autograd: cross_entropy_sum with vocabulary spans") {
  Rng rng(9, "gc");
  const int64_t V = 10;
  auto logits = nn::param(randn({3, V}, rng));
  std::vector<int64_t> ids{2, 5, 9};
  std::vector<nn::VocabSpan<double>> spans{{0, 4}, {4, 3}, {7, 3}};
  auto fn = [&] { return nn::cross_entropy_sum(logits, ids, spans); };
  CHECK(gradcheck({logits}, fn) < 1e-6);

  // Zero logits -> per-row loss is ln(span size), independent of ids.
  for (auto& v : logits->value.data) v = 0.0;
  const double expect = std::log(4.0) + std::log(3.0) + std::log(3.0);
  CHECK(fn()->value[0] == doctest::Approx(expect).epsilon(1e-12));

  // Logits outside a row's span must not affect that row's loss.
  logits->value[0 * V + 8] = 100.0;  // outside span {0,4} of row 0
  CHECK(fn()->value[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("autograd: l1 / bce / masked-mse gradchecks") {
  Rng rng(10, "gc");
  auto x = nn::param(randn({4, 3}, rng));
  auto tgt = randn({4, 3}, rng);
  // Keep |x - tgt| away from the kink so central differences are valid.
  for (int64_t i = 0; i < x->value.numel(); ++i)
    if (std::abs(x->value[i] - tgt[i]) < 1e-3) x->value[i] += 0.01;
  auto l1 = [&] { return nn::l1_sum(x, tgt); };
  CHECK(gradcheck({x}, l1) < 1e-6);

  Tensor<double> bt({4, 3});
  Rng br(11, "b");
  for (auto& v : bt.data) v = br.bernoulli(0.5) ? 1.0 : 0.0;
  auto bce = [&] { return nn::bce_logits_sum(x, bt); };
  CHECK(gradcheck({x}, bce) < 1e-6);

  Tensor<double> mask({4, 3});
  for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = (i % 3 == 0) ? 1.0 : 0.0;
  auto mm = [&] { return nn::mse_sum_masked(x, tgt, mask); };
  CHECK(gradcheck({x}, mm) < 1e-6);

  // Masked-out residuals contribute nothing.
  auto full = nn::mse_sum(x, tgt);
  CHECK(mm()->value[0] < full->value[0]);
}

TEST_CASE("optim: lr schedule shape") {
  const double base = 3e-4;
  const int64_t total = 1000, warm = 100;
  CHECK(nn::lr_at(0, total, warm, base) == doctest::Approx(base / warm));
  CHECK(nn::lr_at(warm - 1, total, warm, base) == doctest::Approx(base));
  CHECK(nn::lr_at(warm, total, warm, base) == doctest::Approx(base));
  // Monotone nonincreasing after warmup, floored at 0.1 * base.
  double prev = base;
  for (int64_t s = warm; s < total; s += 50) {
    const double lr = nn::lr_at(s, total, warm, base);
    CHECK(lr <= prev + 1e-15);
    CHECK(lr >= 0.1 * base - 1e-15);
    prev = lr;
  }
  CHECK(nn::lr_at(total - 1, total, warm, base) ==
        doctest::Approx(0.1 * base).epsilon(1e-4));
}

TEST_CASE("optim: Adam minimizes a quadratic") {
  Rng rng(12, "adam");
  auto x = nn::param(randn({8}, rng, 2.0));
  Tensor<double> tgt({8});
  for (int64_t i = 0; i < 8; ++i) tgt[i] = double(i) * 0.25 - 1.0;
  nn::Adam<double> opt({x}, 0.05);
  double first = 0;
  for (int step = 0; step < 400; ++step) {
    x->grad = Tensor<double>();
    auto loss = nn::mse_sum(x, tgt);
    nn::backward(loss);
    if (step == 0) first = loss->value[0];
    opt.step();
  }
  auto final_loss = nn::mse_sum(x, tgt);
  CHECK(final_loss->value[0] < 1e-4 * first);
}

TEST_CASE("optim: clip_grad_norm caps the global norm") {
  Rng rng(13, "clip");
  auto a = nn::param(randn({4}, rng));
  auto b = nn::param(randn({3}, rng));
  nn::backward(nn::add(nn::scale(nn::sum_all(nn::mul(a, a)), 50.0),
                       nn::scale(nn::sum_all(nn::mul(b, b)), 50.0)));
  std::vector<Var<double>> ps{a, b};
  const double pre = nn::clip_grad_norm(ps, 1.0);
  CHECK(pre > 1.0);
  double post = 0;
  for (const auto& p : ps)
    for (double g : p->grad.data) post += g * g;
  CHECK(std::sqrt(post) == doctest::Approx(1.0).epsilon(1e-9));

  // Below the cap, gradients are untouched.
  auto c = nn::param(Tensor<double>({2}, 1e-6));
  nn::backward(nn::sum_all(nn::mul(c, c)));
  std::vector<Var<double>> ps2{c};
  const double g0 = c->grad[0];
  nn::clip_grad_norm(ps2, 1.0);
  CHECK(c->grad[0] == g0);
}

TEST_CASE("layers: parameter registry names are unique and complete") {
  Rng rng(14, "reg");
  nn::TransformerBlock<double> blk(8, 2, 16, rng);
  nn::ParamRegistry<double> reg;
  blk.reg(reg, "blk");
  CHECK(reg.named.size() > 0);
  for (size_t i = 0; i < reg.named.size(); ++i)
    for (size_t j = i + 1; j < reg.named.size(); ++j)
      CHECK(reg.named[i].first != reg.named[j].first);
}
