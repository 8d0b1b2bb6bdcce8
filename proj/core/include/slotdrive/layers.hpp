#pragma once

// Parameterized modules on top of the autograd ops. Modules own their Var
// parameters, expose forward() graph builders, and register named parameters
// for the optimizer and the checkpoint container.

#include <string>
#include <utility>
#include <vector>

#include "slotdrive/autograd.hpp"
#include "slotdrive/rng.hpp"

namespace slotdrive::nn {

template <typename T>
struct ParamRegistry {
  std::vector<std::pair<std::string, Var<T>>> named;

  void add(const std::string& name, Var<T> p) { named.emplace_back(name, std::move(p)); }
  void merge(const std::string& prefix, const ParamRegistry<T>& other) {
    for (auto& [n, p] : other.named) named.emplace_back(prefix + "." + n, p);
  }
  std::vector<Var<T>> vars() const {
    std::vector<Var<T>> out;
    out.reserve(named.size());
    for (auto& [n, p] : named) out.push_back(p);
    return out;
  }
  int64_t count() const {
    int64_t n = 0;
    for (auto& [name, p] : named) n += p->value.numel();
    return n;
  }
};

template <typename T>
Tensor<T> randn_tensor(Shape s, Rng& rng, double stddev) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = T(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(Shape s, Rng& rng, double lo, double hi) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.data) v = T(rng.uniform(lo, hi));
  return t;
}

template <typename T>
struct LinearLayer {
  Var<T> W, b;
  bool has_bias = true;

  LinearLayer() = default;
  LinearLayer(int64_t in, int64_t out, Rng& rng, bool bias = true,
              double init_std = -1.0)
      : has_bias(bias) {
    // Default: Xavier-uniform; transformer blocks pass an explicit std.
    if (init_std < 0) {
      const double lim = std::sqrt(6.0 / double(in + out));
      W = param(uniform_tensor<T>({in, out}, rng, -lim, lim));
    } else {
      W = param(randn_tensor<T>({in, out}, rng, init_std));
    }
    if (bias) b = param(Tensor<T>({out}));
  }

  Var<T> forward(Var<T> x) const { return linear(x, W, has_bias ? b : nullptr); }

  void reg(ParamRegistry<T>& r, const std::string& p) const {
    r.add(p + ".W", W);
    if (has_bias) r.add(p + ".b", b);
  }
};

template <typename T>
struct LayerNormLayer {
  Var<T> gamma, beta;

  LayerNormLayer() = default;
  explicit LayerNormLayer(int64_t dim) {
    gamma = param(Tensor<T>({dim}, T(1)));
    beta = param(Tensor<T>({dim}));
  }
  Var<T> forward(Var<T> x) const { return layer_norm(x, gamma, beta); }
  void reg(ParamRegistry<T>& r, const std::string& p) const {
    r.add(p + ".gamma", gamma);
    r.add(p + ".beta", beta);
  }
};

template <typename T>
struct Conv2dLayer {
  Var<T> W, b;
  int64_t stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(int64_t in_ch, int64_t out_ch, int64_t k, int64_t stride_, int64_t pad_,
              Rng& rng)
      : stride(stride_), pad(pad_) {
    const double std = std::sqrt(2.0 / double(in_ch * k * k));
    W = param(randn_tensor<T>({out_ch, in_ch, k, k}, rng, std));
    b = param(Tensor<T>({out_ch}));
  }
  Var<T> forward(Var<T> x) const { return conv2d(x, W, b, stride, pad); }
  void reg(ParamRegistry<T>& r, const std::string& p) const {
    r.add(p + ".W", W);
    r.add(p + ".b", b);
  }
};

// Two-layer MLP with a hidden activation.
template <typename T>
struct Mlp2 {
  LinearLayer<T> fc1, fc2;
  bool use_gelu = false;

  Mlp2() = default;
  Mlp2(int64_t in, int64_t hidden, int64_t out, Rng& rng, bool gelu_act = false,
       double init_std = -1.0)
      : fc1(in, hidden, rng, true, init_std),
        fc2(hidden, out, rng, true, init_std),
        use_gelu(gelu_act) {}

  Var<T> forward(Var<T> x) const {
    auto h = fc1.forward(x);
    h = use_gelu ? gelu(h) : relu(h);
    return fc2.forward(h);
  }
  void reg(ParamRegistry<T>& r, const std::string& p) const {
    fc1.reg(r, p + ".fc1");
    fc2.reg(r, p + ".fc2");
  }
};

// GRU cell; gate layout follows the usual r/z/n convention.
template <typename T>
struct GruCell {
  LinearLayer<T> xr, xz, xn, hr, hz, hn;
  int64_t hidden = 0;

  GruCell() = default;
  GruCell(int64_t in, int64_t hidden_, Rng& rng)
      : xr(in, hidden_, rng), xz(in, hidden_, rng), xn(in, hidden_, rng),
        hr(hidden_, hidden_, rng, false), hz(hidden_, hidden_, rng, false),
        hn(hidden_, hidden_, rng), hidden(hidden_) {}

  Var<T> forward(Var<T> x, Var<T> h) const {
    auto r = sigmoid(add(xr.forward(x), hr.forward(h)));
    auto z = sigmoid(add(xz.forward(x), hz.forward(h)));
    auto n = tanh_op(add(xn.forward(x), mul(r, hn.forward(h))));
    return add(mul(one_minus(z), n), mul(z, h));
  }
  void reg(ParamRegistry<T>& r, const std::string& p) const {
    xr.reg(r, p + ".xr");
    xz.reg(r, p + ".xz");
    xn.reg(r, p + ".xn");
    hr.reg(r, p + ".hr");
    hz.reg(r, p + ".hz");
    hn.reg(r, p + ".hn");
  }
};

// Multi-head self-attention. The mask (if any) is (B*heads, T, T) with 1 for
// allowed pairs; masked weights and their gradients are exactly zero.
template <typename T>
struct SelfAttention {
  LinearLayer<T> q, k, v, proj;
  int64_t heads = 1;

  SelfAttention() = default;
  SelfAttention(int64_t H, int64_t heads_, Rng& rng, double init_std = 0.02)
      : q(H, H, rng, true, init_std), k(H, H, rng, true, init_std),
        v(H, H, rng, true, init_std), proj(H, H, rng, true, init_std),
        heads(heads_) {
    SD_SHAPE(H % heads_ == 0, "attention heads must divide H");
  }

  Var<T> forward(Var<T> x, std::shared_ptr<Tensor<uint8_t>> mask = nullptr) const {
    const int64_t H = x->value.dim(2);
    const int64_t hs = H / heads;
    auto qh = heads_split(q.forward(x), heads);
    auto kh = heads_split(k.forward(x), heads);
    auto vh = heads_split(v.forward(x), heads);
    auto scores = scale(bmm_nt(qh, kh), T(1.0 / std::sqrt(double(hs))));
    auto att = mask ? softmax_lastdim_masked(scores, mask) : softmax_lastdim(scores);
    auto out = heads_merge(bmm_nn(att, vh), heads);
    return proj.forward(out);
  }
  void reg(ParamRegistry<T>& r, const std::string& p) const {
    q.reg(r, p + ".q");
    k.reg(r, p + ".k");
    v.reg(r, p + ".v");
    proj.reg(r, p + ".proj");
  }
};

// Pre-norm transformer block: x += attn(ln1(x)); x += mlp(ln2(x)).
template <typename T>
struct TransformerBlock {
  LayerNormLayer<T> ln1, ln2;
  SelfAttention<T> attn;
  Mlp2<T> mlp;

  TransformerBlock() = default;
  TransformerBlock(int64_t H, int64_t heads, int64_t mlp_hidden, Rng& rng,
                   double init_std = 0.02)
      : ln1(H), ln2(H), attn(H, heads, rng, init_std),
        mlp(H, mlp_hidden, H, rng, /*gelu=*/true, init_std) {}

  Var<T> forward(Var<T> x, std::shared_ptr<Tensor<uint8_t>> mask = nullptr) const {
    x = add(x, attn.forward(ln1.forward(x), mask));
    x = add(x, mlp.forward(ln2.forward(x)));
    return x;
  }
  void reg(ParamRegistry<T>& r, const std::string& p) const {
    ln1.reg(r, p + ".ln1");
    ln2.reg(r, p + ".ln2");
    attn.reg(r, p + ".attn");
    mlp.reg(r, p + ".mlp");
  }
};

// Learned positional projection of a fixed coordinate grid. The grid encodes
// each cell as (x, y, 1-x, 1-y) in [0,1]; a linear layer maps it to dim.
template <typename T>
struct SoftPositionEmbed {
  LinearLayer<T> proj;
  Tensor<T> grid;  // (H*W, 4), fixed

  SoftPositionEmbed() = default;
  SoftPositionEmbed(int64_t H, int64_t W, int64_t dim, Rng& rng)
      : proj(4, dim, rng) {
    grid = Tensor<T>({H * W, 4});
    for (int64_t r = 0; r < H; ++r)
      for (int64_t c = 0; c < W; ++c) {
        const T y = H > 1 ? T(r) / T(H - 1) : T(0.5);
        const T x = W > 1 ? T(c) / T(W - 1) : T(0.5);
        T* g = grid.ptr() + (r * W + c) * 4;
        g[0] = x;
        g[1] = y;
        g[2] = T(1) - x;
        g[3] = T(1) - y;
      }
  }

  // Returns (H*W, dim); add with trailing broadcast over the batch.
  Var<T> forward() const { return proj.forward(constant(grid)); }
  void reg(ParamRegistry<T>& r, const std::string& p) const { proj.reg(r, p + ".proj"); }
};

}  // namespace slotdrive::nn
