#pragma once

// Reverse-mode autodiff on dense tensors. Nodes form a tape ordered by
// creation id; backward() visits reachable nodes in descending id order,
// which is a valid reverse topological order because every op's inputs are
// created before its output. Scalar type is a template parameter: double is
// used by the finite-difference gradient tests, float by the training paths.

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "slotdrive/tensor.hpp"

namespace slotdrive::nn {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily during backward
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;  // accumulates into parents' grads
  int64_t id = 0;
  bool requires_grad = false;

  bool has_grad() const { return grad.numel() == value.numel(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline int64_t next_node_id() {
  static int64_t counter = 0;
  return ++counter;
}
}  // namespace detail

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->id = detail::next_node_id();
  return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return make_var(std::move(value), false);
}

template <typename T>
Var<T> param(Tensor<T> value) {
  return make_var(std::move(value), true);
}

template <typename T>
Tensor<T>& grad_of(Var<T>& v) {
  if (!v->has_grad()) {
    v->grad = Tensor<T>(v->value.shape);
  }
  return v->grad;
}

template <typename T, typename... Parents>
Var<T> make_op(Tensor<T> value, std::function<void(Node<T>&)> fn, Parents... ps) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  (n->parents.push_back(ps), ...);
  for (auto& p : n->parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) n->backward_fn = std::move(fn);
  n->id = detail::next_node_id();
  return n;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
  if (!root->requires_grad) return;
  if (seed == nullptr) {
    SD_SHAPE(root->value.numel() == 1, "backward() without a seed needs a scalar root");
  }

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });

  root->grad = seed ? *seed : Tensor<T>(root->value.shape, T(1));
  for (Node<T>* n : order) {
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

template <typename T>
void zero_grad(std::vector<Var<T>>& params) {
  for (auto& p : params) p->grad = Tensor<T>();
}

// ---------------------------------------------------------------------------
// elementwise & broadcast
// ---------------------------------------------------------------------------

// add with trailing broadcast: b's shape must equal the trailing dims of a
// (e.g. (B,T,H) + (T,H), or (R,F) + (F)).
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const int64_t na = a->value.numel(), nb = b->value.numel();
  SD_SHAPE(nb > 0 && na % nb == 0,
           "add broadcast " << shape_str(a->value.shape) << " + " << shape_str(b->value.shape));
  Tensor<T> out = a->value;
  T* o = out.ptr();
  const T* pb = b->value.ptr();
  for (int64_t i = 0; i < na; ++i) o[i] += pb[i % nb];
  return make_op<T>(
      std::move(out),
      [na, nb](Node<T>& n) {
        auto a_ = n.parents[0];
        auto b_ = n.parents[1];
        const T* g = n.grad.ptr();
        if (a_->requires_grad) {
          T* ga = grad_of(a_).ptr();
          for (int64_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (b_->requires_grad) {
          T* gb = grad_of(b_).ptr();
          for (int64_t i = 0; i < na; ++i) gb[i % nb] += g[i];
        }
      },
      a, b);
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  SD_SHAPE(a->value.shape == b->value.shape, "sub shapes");
  Tensor<T> out = a->value;
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] -= b->value[i];
  return make_op<T>(
      std::move(out),
      [n](Node<T>& nd) {
        auto a_ = nd.parents[0];
        auto b_ = nd.parents[1];
        const T* g = nd.grad.ptr();
        if (a_->requires_grad) {
          T* ga = grad_of(a_).ptr();
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (b_->requires_grad) {
          T* gb = grad_of(b_).ptr();
          for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
      },
      a, b);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  SD_SHAPE(a->value.shape == b->value.shape, "mul shapes");
  Tensor<T> out = a->value;
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] *= b->value[i];
  return make_op<T>(
      std::move(out),
      [n](Node<T>& nd) {
        auto a_ = nd.parents[0];
        auto b_ = nd.parents[1];
        const T* g = nd.grad.ptr();
        if (a_->requires_grad) {
          T* ga = grad_of(a_).ptr();
          const T* vb = b_->value.ptr();
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
        }
        if (b_->requires_grad) {
          T* gb = grad_of(b_).ptr();
          const T* va = a_->value.ptr();
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
        }
      },
      a, b);
}

// a * b where b has a singleton middle dim: (R,C,P) * (R,1,P).
template <typename T>
Var<T> mul_channel_bcast(Var<T> a, Var<T> b) {
  SD_SHAPE(a->value.rank() == 3 && b->value.rank() == 3 && b->value.dim(1) == 1 &&
               a->value.dim(0) == b->value.dim(0) && a->value.dim(2) == b->value.dim(2),
           "mul_channel_bcast " << shape_str(a->value.shape) << " * "
                                << shape_str(b->value.shape));
  const int64_t R = a->value.dim(0), C = a->value.dim(1), P = a->value.dim(2);
  Tensor<T> out = a->value;
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) {
      T* o = out.ptr() + (r * C + c) * P;
      const T* w = b->value.ptr() + r * P;
      for (int64_t p = 0; p < P; ++p) o[p] *= w[p];
    }
  return make_op<T>(
      std::move(out),
      [R, C, P](Node<T>& nd) {
        auto a_ = nd.parents[0];
        auto b_ = nd.parents[1];
        if (a_->requires_grad) {
          T* ga = grad_of(a_).ptr();
          for (int64_t r = 0; r < R; ++r)
            for (int64_t c = 0; c < C; ++c) {
              const T* g = nd.grad.ptr() + (r * C + c) * P;
              const T* w = b_->value.ptr() + r * P;
              T* dst = ga + (r * C + c) * P;
              for (int64_t p = 0; p < P; ++p) dst[p] += g[p] * w[p];
            }
        }
        if (b_->requires_grad) {
          T* gb = grad_of(b_).ptr();
          for (int64_t r = 0; r < R; ++r)
            for (int64_t c = 0; c < C; ++c) {
              const T* g = nd.grad.ptr() + (r * C + c) * P;
              const T* va = a_->value.ptr() + (r * C + c) * P;
              T* dst = gb + r * P;
              for (int64_t p = 0; p < P; ++p) dst[p] += g[p] * va[p];
            }
        }
      },
      a, b);
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v *= c;
  return make_op<T>(
      std::move(out),
      [c](Node<T>& nd) {
        auto a_ = nd.parents[0];
        if (!a_->requires_grad) return;
        T* ga = grad_of(a_).ptr();
        const T* g = nd.grad.ptr();
        for (int64_t i = 0; i < nd.grad.numel(); ++i) ga[i] += g[i] * c;
      },
      a);
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v += c;
  return make_op<T>(
      std::move(out),
      [](Node<T>& nd) {
        auto a_ = nd.parents[0];
        if (!a_->requires_grad) return;
        T* ga = grad_of(a_).ptr();
        const T* g = nd.grad.ptr();
        for (int64_t i = 0; i < nd.grad.numel(); ++i) ga[i] += g[i];
      },
      a);
}

template <typename T>
Var<T> one_minus(Var<T> a) {
  return add_scalar(scale(a, T(-1)), T(1));
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return constant(a->value);
}

// ---------------------------------------------------------------------------
// unary nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F f, DF df) {
  Tensor<T> out = a->value;
  for (auto& v : out.data) v = f(v);
  return make_op<T>(
      std::move(out),
      [df](Node<T>& nd) {
        auto a_ = nd.parents[0];
        if (!a_->requires_grad) return;
        T* ga = grad_of(a_).ptr();
        const T* g = nd.grad.ptr();
        const T* x = a_->value.ptr();
        const T* y = nd.value.ptr();
        for (int64_t i = 0; i < nd.grad.numel(); ++i) ga[i] += g[i] * df(x[i], y[i]);
      },
      a);
}
}  // namespace detail

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::unary(
      a, [](T v) { return v > T(0) ? v : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(
      a, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh_op(Var<T> a) {
  return detail::unary(
      a, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> exp_op(Var<T> a) {
  return detail::unary(
      a, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary(
      a,
      [=](T v) {
        return T(0.5) * v * (T(1) + T(std::erf(double(v) * kInvSqrt2)));
      },
      [=](T x, T) {
        const double xd = double(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
        return T(cdf + xd * pdf);
      });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  SD_SHAPE(a->value.rank() == 2 && b->value.rank() == 2 &&
               a->value.dim(1) == b->value.dim(0),
           "matmul " << shape_str(a->value.shape) << " x " << shape_str(b->value.shape));
  const int64_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  Tensor<T> out({m, n});
  as_matrix(out, m, n).noalias() =
      as_matrix(a->value, m, k) * as_matrix(b->value, k, n);
  return make_op<T>(
      std::move(out),
      [m, k, n](Node<T>& nd) {
        auto a_ = nd.parents[0];
        auto b_ = nd.parents[1];
        auto G = as_matrix(nd.grad, m, n);
        if (a_->requires_grad)
          as_matrix(grad_of(a_), m, k).noalias() +=
              G * as_matrix(b_->value, k, n).transpose();
        if (b_->requires_grad)
          as_matrix(grad_of(b_), k, n).noalias() +=
              as_matrix(a_->value, m, k).transpose() * G;
      },
      a, b);
}

// x (..., in) @ W (in, out) [+ bias (out)] — flattens leading dims to rows.
template <typename T>
Var<T> linear(Var<T> x, Var<T> W, Var<T> bias = nullptr) {
  SD_SHAPE(W->value.rank() == 2, "linear weight rank");
  const int64_t in = W->value.dim(0), out_f = W->value.dim(1);
  SD_SHAPE(x->value.rank() >= 1 && x->value.shape.back() == in,
           "linear " << shape_str(x->value.shape) << " @ " << shape_str(W->value.shape));
  const int64_t rows = x->value.numel() / in;
  Shape out_shape = x->value.shape;
  out_shape.back() = out_f;
  Tensor<T> out(out_shape);
  as_matrix(out, rows, out_f).noalias() =
      as_matrix(x->value, rows, in) * as_matrix(W->value, in, out_f);
  if (bias) {
    SD_SHAPE(bias->value.numel() == out_f, "linear bias");
    T* o = out.ptr();
    const T* b = bias->value.ptr();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < out_f; ++c) o[r * out_f + c] += b[c];
  }
  auto fn = [rows, in, out_f](Node<T>& nd) {
    auto x_ = nd.parents[0];
    auto W_ = nd.parents[1];
    auto G = as_matrix(nd.grad, rows, out_f);
    if (x_->requires_grad)
      as_matrix(grad_of(x_), rows, in).noalias() +=
          G * as_matrix(W_->value, in, out_f).transpose();
    if (W_->requires_grad)
      as_matrix(grad_of(W_), in, out_f).noalias() +=
          as_matrix(x_->value, rows, in).transpose() * G;
    if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
      auto b_ = nd.parents[2];
      T* gb = grad_of(b_).ptr();
      const T* g = nd.grad.ptr();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < out_f; ++c) gb[c] += g[r * out_f + c];
    }
  };
  if (bias) return make_op<T>(std::move(out), fn, x, W, bias);
  return make_op<T>(std::move(out), fn, x, W);
}

// Batched matmul over leading dim: (G,m,k) @ (G,k,n) -> (G,m,n).
template <typename T>
Var<T> bmm_nn(Var<T> a, Var<T> b) {
  SD_SHAPE(a->value.rank() == 3 && b->value.rank() == 3 &&
               a->value.dim(0) == b->value.dim(0) && a->value.dim(2) == b->value.dim(1),
           "bmm_nn " << shape_str(a->value.shape) << " x " << shape_str(b->value.shape));
  const int64_t G = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2),
                n = b->value.dim(2);
  Tensor<T> out({G, m, n});
  for (int64_t g = 0; g < G; ++g)
    as_matrix(out, m, n, g * m * n).noalias() =
        as_matrix(a->value, m, k, g * m * k) * as_matrix(b->value, k, n, g * k * n);
  return make_op<T>(
      std::move(out),
      [G, m, k, n](Node<T>& nd) {
        auto a_ = nd.parents[0];
        auto b_ = nd.parents[1];
        for (int64_t g = 0; g < G; ++g) {
          auto Gm = as_matrix(nd.grad, m, n, g * m * n);
          if (a_->requires_grad)
            as_matrix(grad_of(a_), m, k, g * m * k).noalias() +=
                Gm * as_matrix(b_->value, k, n, g * k * n).transpose();
          if (b_->requires_grad)
            as_matrix(grad_of(b_), k, n, g * k * n).noalias() +=
                as_matrix(a_->value, m, k, g * m * k).transpose() * Gm;
        }
      },
      a, b);
}

// (G,m,k) @ (G,n,k)^T -> (G,m,n).
template <typename T>
Var<T> bmm_nt(Var<T> a, Var<T> b) {
  SD_SHAPE(a->value.rank() == 3 && b->value.rank() == 3 &&
               a->value.dim(0) == b->value.dim(0) && a->value.dim(2) == b->value.dim(2),
           "bmm_nt " << shape_str(a->value.shape) << " x " << shape_str(b->value.shape));
  const int64_t G = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2),
                n = b->value.dim(1);
  Tensor<T> out({G, m, n});
  for (int64_t g = 0; g < G; ++g)
    as_matrix(out, m, n, g * m * n).noalias() =
        as_matrix(a->value, m, k, g * m * k) *
        as_matrix(b->value, n, k, g * n * k).transpose();
  return make_op<T>(
      std::move(out),
      [G, m, k, n](Node<T>& nd) {
        auto a_ = nd.parents[0];
        auto b_ = nd.parents[1];
        for (int64_t g = 0; g < G; ++g) {
          auto Gm = as_matrix(nd.grad, m, n, g * m * n);
          if (a_->requires_grad)
            as_matrix(grad_of(a_), m, k, g * m * k).noalias() +=
                Gm * as_matrix(b_->value, n, k, g * n * k);
          if (b_->requires_grad)
            as_matrix(grad_of(b_), n, k, g * n * k).noalias() +=
                Gm.transpose() * as_matrix(a_->value, m, k, g * m * k);
        }
      },
      a, b);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
  Tensor<T> out = a->value.reshaped(std::move(s));
  return make_op<T>(
      std::move(out),
      [](Node<T>& nd) {
        auto a_ = nd.parents[0];
        if (!a_->requires_grad) return;
        T* ga = grad_of(a_).ptr();
        const T* g = nd.grad.ptr();
        for (int64_t i = 0; i < nd.grad.numel(); ++i) ga[i] += g[i];
      },
      a);
}

template <typename T>
Var<T> slice_dim0(Var<T> a, int64_t start, int64_t len) {
  SD_SHAPE(a->value.rank() >= 1 && start >= 0 && start + len <= a->value.dim(0),
           "slice_dim0 [" << start << "," << start + len << ") of "
                          << shape_str(a->value.shape));
  const int64_t inner = a->value.numel() / a->value.dim(0);
  Shape os = a->value.shape;
  os[0] = len;
  Tensor<T> out(os);
  std::copy_n(a->value.ptr() + start * inner, len * inner, out.ptr());
  return make_op<T>(
      std::move(out),
      [start, len, inner](Node<T>& nd) {
        auto a_ = nd.parents[0];
        if (!a_->requires_grad) return;
        T* ga = grad_of(a_).ptr() + start * inner;
        const T* g = nd.grad.ptr();
        for (int64_t i = 0; i < len * inner; ++i) ga[i] += g[i];
      },
      a);
}

template <typename T>
Var<T> concat_dim0(const std::vector<Var<T>>& parts) {
  SD_SHAPE(!parts.empty(), "concat_dim0 empty");
  Shape os = parts[0]->value.shape;
  const int64_t inner = parts[0]->value.numel() / parts[0]->value.dim(0);
  int64_t total = 0;
  for (auto& p : parts) {
    SD_SHAPE(p->value.numel() / p->value.dim(0) == inner, "concat_dim0 inner dims");
    total += p->value.dim(0);
  }
  os[0] = total;
  Tensor<T> out(os);
  int64_t off = 0;
  for (auto& p : parts) {
    std::copy_n(p->value.ptr(), p->value.numel(), out.ptr() + off);
    off += p->value.numel();
  }
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(out);
  n->parents.assign(parts.begin(), parts.end());
  for (auto& p : n->parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) {
    n->backward_fn = [](Node<T>& nd) {
      int64_t off2 = 0;
      for (auto& p : nd.parents) {
        const int64_t cnt = p->value.numel();
        if (p->requires_grad) {
          T* gp = grad_of(p).ptr();
          const T* g = nd.grad.ptr() + off2;
          for (int64_t i = 0; i < cnt; ++i) gp[i] += g[i];
        }
        off2 += cnt;
      }
    };
  }
  n->id = detail::next_node_id();
  return n;
}

// Rows of an embedding table: (V,H) gathered by ids -> (n,H).
template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<int64_t> ids) {
  SD_SHAPE(table->value.rank() == 2, "gather_rows table rank");
  const int64_t V = table->value.dim(0), H = table->value.dim(1);
  for (int64_t id : ids)
    SD_CHECK(id >= 0 && id < V, IndexOutOfRange, "row " << id << " of " << V);
  Tensor<T> out({static_cast<int64_t>(ids.size()), H});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table->value.ptr() + ids[i] * H, H, out.ptr() + i * H);
  return make_op<T>(
      std::move(out),
      [ids = std::move(ids), H](Node<T>& nd) {
        auto t_ = nd.parents[0];
        if (!t_->requires_grad) return;
        T* gt = grad_of(t_).ptr();
        const T* g = nd.grad.ptr();
        for (size_t i = 0; i < ids.size(); ++i)
          for (int64_t h = 0; h < H; ++h) gt[ids[i] * H + h] += g[i * H + h];
      },
      table);
}

// (B,T,H) -> (B*nh, T, H/nh): split the feature dim into heads.
template <typename T>
Var<T> heads_split(Var<T> x, int64_t nh) {
  SD_SHAPE(x->value.rank() == 3 && x->value.dim(2) % nh == 0, "heads_split");
  const int64_t B = x->value.dim(0), S = x->value.dim(1), H = x->value.dim(2),
                hs = H / nh;
  Tensor<T> out({B * nh, S, hs});
  const T* src = x->value.ptr();
  T* dst = out.ptr();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < nh; ++h)
      for (int64_t t = 0; t < S; ++t)
        std::copy_n(src + (b * S + t) * H + h * hs, hs,
                    dst + ((b * nh + h) * S + t) * hs);
  return make_op<T>(
      std::move(out),
      [B, S, H, nh, hs](Node<T>& nd) {
        auto x_ = nd.parents[0];
        if (!x_->requires_grad) return;
        T* gx = grad_of(x_).ptr();
        const T* g = nd.grad.ptr();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t h = 0; h < nh; ++h)
            for (int64_t t = 0; t < S; ++t) {
              const T* gs = g + ((b * nh + h) * S + t) * hs;
              T* gd = gx + (b * S + t) * H + h * hs;
              for (int64_t i = 0; i < hs; ++i) gd[i] += gs[i];
            }
      },
      x);
}

// Inverse of heads_split: (B*nh, T, hs) -> (B, T, nh*hs).
template <typename T>
Var<T> heads_merge(Var<T> x, int64_t nh) {
  SD_SHAPE(x->value.rank() == 3 && x->value.dim(0) % nh == 0, "heads_merge");
  const int64_t B = x->value.dim(0) / nh, S = x->value.dim(1), hs = x->value.dim(2),
                H = nh * hs;
  Tensor<T> out({B, S, H});
  const T* src = x->value.ptr();
  T* dst = out.ptr();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < nh; ++h)
      for (int64_t t = 0; t < S; ++t)
        std::copy_n(src + ((b * nh + h) * S + t) * hs, hs,
                    dst + (b * S + t) * H + h * hs);
  return make_op<T>(
      std::move(out),
      [B, S, H, nh, hs](Node<T>& nd) {
        auto x_ = nd.parents[0];
        if (!x_->requires_grad) return;
        T* gx = grad_of(x_).ptr();
        const T* g = nd.grad.ptr();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t h = 0; h < nh; ++h)
            for (int64_t t = 0; t < S; ++t) {
              const T* gs = g + (b * S + t) * H + h * hs;
              T* gd = gx + ((b * nh + h) * S + t) * hs;
              for (int64_t i = 0; i < hs; ++i) gd[i] += gs[i];
            }
      },
      x);
}

// Swap the last two axes: (A,B) -> (B,A) or (G,A,B) -> (G,B,A).
template <typename T>
Var<T> transpose_12(Var<T> a) {
  const int rank = static_cast<int>(a->value.rank());
  SD_SHAPE(rank == 2 || rank == 3, "transpose_12 rank " << rank);
  const int64_t G = rank == 3 ? a->value.dim(0) : 1;
  const int64_t A = a->value.dim(rank - 2), B = a->value.dim(rank - 1);
  Shape s = a->value.shape;
  std::swap(s[static_cast<size_t>(rank - 2)], s[static_cast<size_t>(rank - 1)]);
  Tensor<T> out(std::move(s));
  for (int64_t g = 0; g < G; ++g)
    as_matrix(out, B, A, g * A * B).noalias() =
        as_matrix(a->value, A, B, g * A * B).transpose();
  return make_op<T>(
      std::move(out),
      [G, A, B](Node<T>& nd) {
        auto a_ = nd.parents[0];
        if (!a_->requires_grad) return;
        for (int64_t g = 0; g < G; ++g)
          as_matrix(grad_of(a_), A, B, g * A * B).noalias() +=
              as_matrix(nd.grad, B, A, g * A * B).transpose();
      },
      a);
}

// (R,d) -> (R,d,H0*W0): tile each feature vector over a spatial grid.
template <typename T>
Var<T> spatial_broadcast(Var<T> x, int64_t P) {
  SD_SHAPE(x->value.rank() == 2, "spatial_broadcast input rank");
  const int64_t R = x->value.dim(0), d = x->value.dim(1);
  Tensor<T> out({R, d, P});
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < d; ++c) {
      const T v = x->value[r * d + c];
      T* o = out.ptr() + (r * d + c) * P;
      for (int64_t p = 0; p < P; ++p) o[p] = v;
    }
  return make_op<T>(
      std::move(out),
      [R, d, P](Node<T>& nd) {
        auto x_ = nd.parents[0];
        if (!x_->requires_grad) return;
        T* gx = grad_of(x_).ptr();
        const T* g = nd.grad.ptr();
        for (int64_t r = 0; r < R; ++r)
          for (int64_t c = 0; c < d; ++c) {
            T acc = T(0);
            const T* gs = g + (r * d + c) * P;
            for (int64_t p = 0; p < P; ++p) acc += gs[p];
            gx[r * d + c] += acc;
          }
      },
      x);
}

// ---------------------------------------------------------------------------
// reductions & normalizations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> a) {
  T acc = T(0);
  for (const T& v : a->value.data) acc += v;
  Tensor<T> out({1});
  out[0] = acc;
  return make_op<T>(
      std::move(out),
      [](Node<T>& nd) {
        auto a_ = nd.parents[0];
        if (!a_->requires_grad) return;
        T* ga = grad_of(a_).ptr();
        const T g = nd.grad[0];
        for (int64_t i = 0; i < a_->value.numel(); ++i) ga[i] += g;
      },
      a);
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  return scale(sum_all(a), T(1) / T(a->value.numel()));
}

// (A,B,C) summed over the middle dim -> (A,C).
template <typename T>
Var<T> sum_dim1(Var<T> a) {
  SD_SHAPE(a->value.rank() == 3, "sum_dim1 rank");
  const int64_t A = a->value.dim(0), B = a->value.dim(1), C = a->value.dim(2);
  Tensor<T> out({A, C});
  for (int64_t i = 0; i < A; ++i)
    for (int64_t b = 0; b < B; ++b) {
      const T* src = a->value.ptr() + (i * B + b) * C;
      T* dst = out.ptr() + i * C;
      for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
    }
  return make_op<T>(
      std::move(out),
      [A, B, C](Node<T>& nd) {
        auto a_ = nd.parents[0];
        if (!a_->requires_grad) return;
        T* ga = grad_of(a_).ptr();
        const T* g = nd.grad.ptr();
        for (int64_t i = 0; i < A; ++i)
          for (int64_t b = 0; b < B; ++b) {
            T* dst = ga + (i * B + b) * C;
            const T* gs = g + i * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += gs[c];
          }
      },
      a);
}

template <typename T>
Var<T> dot(Var<T> a, Var<T> b) {
  return sum_all(mul(a, b));
}

// LayerNorm over the last dim with affine params gamma/beta of shape (F).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const int64_t F = x->value.shape.back();
  SD_SHAPE(gamma->value.numel() == F && beta->value.numel() == F, "layer_norm params");
  const int64_t R = x->value.numel() / F;
  Tensor<T> out(x->value.shape);
  auto xhat = std::make_shared<Tensor<T>>(Shape{R, F});
  auto inv_std = std::make_shared<std::vector<T>>(R);
  const T* xp = x->value.ptr();
  const T* gm = gamma->value.ptr();
  const T* bt = beta->value.ptr();
  T* op = out.ptr();
  for (int64_t r = 0; r < R; ++r) {
    const T* row = xp + r * F;
    T mean = T(0);
    for (int64_t f = 0; f < F; ++f) mean += row[f];
    mean /= T(F);
    T var = T(0);
    for (int64_t f = 0; f < F; ++f) {
      const T d = row[f] - mean;
      var += d * d;
    }
    var /= T(F);
    const T istd = T(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = istd;
    for (int64_t f = 0; f < F; ++f) {
      const T xh = (row[f] - mean) * istd;
      (*xhat)[r * F + f] = xh;
      op[r * F + f] = xh * gm[f] + bt[f];
    }
  }
  return make_op<T>(
      std::move(out),
      [R, F, xhat, inv_std](Node<T>& nd) {
        auto x_ = nd.parents[0];
        auto g_ = nd.parents[1];
        auto b_ = nd.parents[2];
        const T* g = nd.grad.ptr();
        const T* gm = g_->value.ptr();
        if (g_->requires_grad) {
          T* gg = grad_of(g_).ptr();
          for (int64_t r = 0; r < R; ++r)
            for (int64_t f = 0; f < F; ++f)
              gg[f] += g[r * F + f] * (*xhat)[r * F + f];
        }
        if (b_->requires_grad) {
          T* gb = grad_of(b_).ptr();
          for (int64_t r = 0; r < R; ++r)
            for (int64_t f = 0; f < F; ++f) gb[f] += g[r * F + f];
        }
        if (x_->requires_grad) {
          T* gx = grad_of(x_).ptr();
          for (int64_t r = 0; r < R; ++r) {
            // dL/dxhat_f = g_f * gamma_f; project out mean and xhat components.
            T sum_gy = T(0), sum_gy_xhat = T(0);
            for (int64_t f = 0; f < F; ++f) {
              const T gy = g[r * F + f] * gm[f];
              sum_gy += gy;
              sum_gy_xhat += gy * (*xhat)[r * F + f];
            }
            const T istd = (*inv_std)[static_cast<size_t>(r)];
            for (int64_t f = 0; f < F; ++f) {
              const T gy = g[r * F + f] * gm[f];
              const T xh = (*xhat)[r * F + f];
              gx[r * F + f] +=
                  istd * (gy - sum_gy / T(F) - xh * sum_gy_xhat / T(F));
            }
          }
        }
      },
      x, gamma, beta);
}

// Plain softmax over the last dim.
template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  const int64_t C = x->value.shape.back();
  const int64_t R = x->value.numel() / C;
  Tensor<T> out(x->value.shape);
  const T* xp = x->value.ptr();
  T* op = out.ptr();
  for (int64_t r = 0; r < R; ++r) {
    const T* row = xp + r * C;
    T mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    T z = T(0);
    for (int64_t c = 0; c < C; ++c) {
      const T e = std::exp(row[c] - mx);
      op[r * C + c] = e;
      z += e;
    }
    for (int64_t c = 0; c < C; ++c) op[r * C + c] /= z;
  }
  return make_op<T>(
      std::move(out),
      [R, C](Node<T>& nd) {
        auto x_ = nd.parents[0];
        if (!x_->requires_grad) return;
        T* gx = grad_of(x_).ptr();
        const T* g = nd.grad.ptr();
        const T* y = nd.value.ptr();
        for (int64_t r = 0; r < R; ++r) {
          T dotgy = T(0);
          for (int64_t c = 0; c < C; ++c) dotgy += g[r * C + c] * y[r * C + c];
          for (int64_t c = 0; c < C; ++c)
            gx[r * C + c] += y[r * C + c] * (g[r * C + c] - dotgy);
        }
      },
      x);
}

// Masked softmax over the last dim. Disallowed entries get weight exactly 0
// in the forward pass and gradient exactly 0 in the backward pass (they are
// excluded from the normalization entirely, not just given -inf logits).
// A fully-masked row yields all zeros.
template <typename T>
Var<T> softmax_lastdim_masked(Var<T> x, std::shared_ptr<Tensor<uint8_t>> mask) {
  SD_SHAPE(mask->shape == x->value.shape, "softmax mask shape");
  const int64_t C = x->value.shape.back();
  const int64_t R = x->value.numel() / C;
  Tensor<T> out(x->value.shape);
  const T* xp = x->value.ptr();
  const uint8_t* mp = mask->ptr();
  T* op = out.ptr();
  for (int64_t r = 0; r < R; ++r) {
    const T* row = xp + r * C;
    const uint8_t* mrow = mp + r * C;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t c = 0; c < C; ++c)
      if (mrow[c]) mx = std::max(mx, row[c]);
    T z = T(0);
    for (int64_t c = 0; c < C; ++c) {
      if (mrow[c]) {
        const T e = std::exp(row[c] - mx);
        op[r * C + c] = e;
        z += e;
      } else {
        op[r * C + c] = T(0);
      }
    }
    if (z > T(0))
      for (int64_t c = 0; c < C; ++c) op[r * C + c] /= z;
  }
  return make_op<T>(
      std::move(out),
      [R, C, mask](Node<T>& nd) {
        auto x_ = nd.parents[0];
        if (!x_->requires_grad) return;
        T* gx = grad_of(x_).ptr();
        const T* g = nd.grad.ptr();
        const T* y = nd.value.ptr();
        for (int64_t r = 0; r < R; ++r) {
          T dotgy = T(0);
          for (int64_t c = 0; c < C; ++c) dotgy += g[r * C + c] * y[r * C + c];
          // y is exactly 0 on masked entries, so their grads stay exactly 0.
          for (int64_t c = 0; c < C; ++c)
            gx[r * C + c] += y[r * C + c] * (g[r * C + c] - dotgy);
        }
      },
      x);
}

// Softmax over the middle dim of (B,K,N) — slot attention normalizes its
// attention logits over slots, not positions.
template <typename T>
Var<T> softmax_dim1(Var<T> x) {
  SD_SHAPE(x->value.rank() == 3, "softmax_dim1 rank");
  const int64_t B = x->value.dim(0), K = x->value.dim(1), N = x->value.dim(2);
  Tensor<T> out(x->value.shape);
  const T* xp = x->value.ptr();
  T* op = out.ptr();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t n = 0; n < N; ++n) {
      T mx = xp[(b * K + 0) * N + n];
      for (int64_t k = 1; k < K; ++k)
        mx = std::max(mx, xp[(b * K + k) * N + n]);
      T z = T(0);
      for (int64_t k = 0; k < K; ++k) {
        const T e = std::exp(xp[(b * K + k) * N + n] - mx);
        op[(b * K + k) * N + n] = e;
        z += e;
      }
      for (int64_t k = 0; k < K; ++k) op[(b * K + k) * N + n] /= z;
    }
  return make_op<T>(
      std::move(out),
      [B, K, N](Node<T>& nd) {
        auto x_ = nd.parents[0];
        if (!x_->requires_grad) return;
        T* gx = grad_of(x_).ptr();
        const T* g = nd.grad.ptr();
        const T* y = nd.value.ptr();
        for (int64_t b = 0; b < B; ++b)
          for (int64_t n = 0; n < N; ++n) {
            T dotgy = T(0);
            for (int64_t k = 0; k < K; ++k)
              dotgy += g[(b * K + k) * N + n] * y[(b * K + k) * N + n];
            for (int64_t k = 0; k < K; ++k) {
              const int64_t i = (b * K + k) * N + n;
              gx[i] += y[i] * (g[i] - dotgy);
            }
          }
      },
      x);
}

// w_i = x_i / (sum_j x_j + eps) over the last dim (slot-attention readout
// normalization; x is nonnegative in that use).
template <typename T>
Var<T> normalize_lastdim(Var<T> x, T eps) {
  const int64_t C = x->value.shape.back();
  const int64_t R = x->value.numel() / C;
  Tensor<T> out(x->value.shape);
  auto denoms = std::make_shared<std::vector<T>>(R);
  const T* xp = x->value.ptr();
  T* op = out.ptr();
  for (int64_t r = 0; r < R; ++r) {
    T s = T(0);
    for (int64_t c = 0; c < C; ++c) s += xp[r * C + c];
    const T denom = s + eps;
    (*denoms)[static_cast<size_t>(r)] = denom;
    for (int64_t c = 0; c < C; ++c) op[r * C + c] = xp[r * C + c] / denom;
  }
  return make_op<T>(
      std::move(out),
      [R, C, denoms](Node<T>& nd) {
        auto x_ = nd.parents[0];
        if (!x_->requires_grad) return;
        T* gx = grad_of(x_).ptr();
        const T* g = nd.grad.ptr();
        const T* y = nd.value.ptr();
        for (int64_t r = 0; r < R; ++r) {
          const T denom = (*denoms)[static_cast<size_t>(r)];
          T dotgy = T(0);
          for (int64_t c = 0; c < C; ++c) dotgy += g[r * C + c] * y[r * C + c];
          for (int64_t c = 0; c < C; ++c)
            gx[r * C + c] += (g[r * C + c] - dotgy) / denom;
        }
      },
      x);
}

// ---------------------------------------------------------------------------
// convolution & resampling (NCHW)
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void im2col(const T* img, int64_t C, int64_t H, int64_t W, int64_t KH, int64_t KW,
            int64_t stride, int64_t pad, int64_t OH, int64_t OW, T* cols) {
  // cols is (C*KH*KW, OH*OW), row-major.
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ki = 0; ki < KH; ++ki)
      for (int64_t kj = 0; kj < KW; ++kj) {
        T* dst = cols + ((c * KH + ki) * KW + kj) * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) {
            for (int64_t ow = 0; ow < OW; ++ow) dst[oh * OW + ow] = T(0);
            continue;
          }
          const T* src = img + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = ow * stride - pad + kj;
            dst[oh * OW + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_acc(const T* cols, int64_t C, int64_t H, int64_t W, int64_t KH,
                int64_t KW, int64_t stride, int64_t pad, int64_t OH, int64_t OW,
                T* img) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ki = 0; ki < KH; ++ki)
      for (int64_t kj = 0; kj < KW; ++kj) {
        const T* src = cols + ((c * KH + ki) * KW + kj) * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh) {
          const int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          T* dst = img + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            const int64_t iw = ow * stride - pad + kj;
            if (iw >= 0 && iw < W) dst[iw] += src[oh * OW + ow];
          }
        }
      }
}
}  // namespace detail

// conv2d, x (B,C,H,W), weight (OC,C,KH,KW), bias (OC) optional.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int64_t stride, int64_t pad) {
  SD_SHAPE(x->value.rank() == 4 && weight->value.rank() == 4 &&
               x->value.dim(1) == weight->value.dim(1),
           "conv2d " << shape_str(x->value.shape) << " w " << shape_str(weight->value.shape));
  const int64_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  const int64_t OC = weight->value.dim(0), KH = weight->value.dim(2),
                KW = weight->value.dim(3);
  const int64_t OH = (H + 2 * pad - KH) / stride + 1;
  const int64_t OW = (W + 2 * pad - KW) / stride + 1;
  SD_SHAPE(OH > 0 && OW > 0, "conv2d output size");
  const int64_t CKK = C * KH * KW, P = OH * OW;

  Tensor<T> out({B, OC, OH, OW});
  std::vector<T> cols(static_cast<size_t>(CKK * P));
  for (int64_t b = 0; b < B; ++b) {
    detail::im2col(x->value.ptr() + b * C * H * W, C, H, W, KH, KW, stride, pad, OH,
                   OW, cols.data());
    MatMap<T> O(out.ptr() + b * OC * P, OC, P);
    O.noalias() = ConstMatMap<T>(weight->value.ptr(), OC, CKK) *
                  ConstMatMap<T>(cols.data(), CKK, P);
    if (bias) {
      const T* bp = bias->value.ptr();
      for (int64_t oc = 0; oc < OC; ++oc)
        O.row(oc).array() += bp[oc];
    }
  }
  auto fn = [B, C, H, W, OC, KH, KW, OH, OW, stride, pad, CKK, P](Node<T>& nd) {
    auto x_ = nd.parents[0];
    auto w_ = nd.parents[1];
    std::vector<T> cols2(static_cast<size_t>(CKK * P));
    for (int64_t b = 0; b < B; ++b) {
      ConstMatMap<T> G(nd.grad.ptr() + b * OC * P, OC, P);
      if (w_->requires_grad) {
        detail::im2col(x_->value.ptr() + b * C * H * W, C, H, W, KH, KW, stride,
                       pad, OH, OW, cols2.data());
        MatMap<T>(grad_of(w_).ptr(), OC, CKK).noalias() +=
            G * ConstMatMap<T>(cols2.data(), CKK, P).transpose();
      }
      if (x_->requires_grad) {
        MatMap<T>(cols2.data(), CKK, P).noalias() =
            ConstMatMap<T>(w_->value.ptr(), OC, CKK).transpose() * G;
        detail::col2im_acc(cols2.data(), C, H, W, KH, KW, stride, pad, OH, OW,
                           grad_of(x_).ptr() + b * C * H * W);
      }
    }
    if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
      auto b_ = nd.parents[2];
      T* gb = grad_of(b_).ptr();
      const T* g = nd.grad.ptr();
      for (int64_t b = 0; b < B; ++b)
        for (int64_t oc = 0; oc < OC; ++oc) {
          T acc = T(0);
          const T* gr = g + (b * OC + oc) * P;
          for (int64_t p = 0; p < P; ++p) acc += gr[p];
          gb[oc] += acc;
        }
    }
  };
  if (bias) return make_op<T>(std::move(out), fn, x, weight, bias);
  return make_op<T>(std::move(out), fn, x, weight);
}

// Nearest-neighbor 2x upsample, (B,C,H,W) -> (B,C,2H,2W).
template <typename T>
Var<T> upsample2x(Var<T> x) {
  SD_SHAPE(x->value.rank() == 4, "upsample2x rank");
  const int64_t B = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                W = x->value.dim(3);
  Tensor<T> out({B, C, 2 * H, 2 * W});
  const T* src = x->value.ptr();
  T* dst = out.ptr();
  for (int64_t bc = 0; bc < B * C; ++bc)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t w = 0; w < W; ++w) {
        const T v = src[(bc * H + h) * W + w];
        T* o = dst + (bc * 2 * H + 2 * h) * 2 * W + 2 * w;
        o[0] = v;
        o[1] = v;
        o[2 * W] = v;
        o[2 * W + 1] = v;
      }
  return make_op<T>(
      std::move(out),
      [B, C, H, W](Node<T>& nd) {
        auto x_ = nd.parents[0];
        if (!x_->requires_grad) return;
        T* gx = grad_of(x_).ptr();
        const T* g = nd.grad.ptr();
        for (int64_t bc = 0; bc < B * C; ++bc)
          for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
              const T* gs = g + (bc * 2 * H + 2 * h) * 2 * W + 2 * w;
              gx[(bc * H + h) * W + w] +=
                  gs[0] + gs[1] + gs[2 * W] + gs[2 * W + 1];
            }
      },
      x);
}

// ---------------------------------------------------------------------------
// losses (per-sample sums; batch averaging is done by the caller)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> mse_sum(Var<T> pred, const Tensor<T>& target) {
  SD_SHAPE(pred->value.shape == target.shape, "mse_sum shapes");
  T acc = T(0);
  const int64_t n = pred->value.numel();
  for (int64_t i = 0; i < n; ++i) {
    const T d = pred->value[i] - target[i];
    acc += d * d;
  }
  Tensor<T> out({1});
  out[0] = acc;
  auto tgt = std::make_shared<Tensor<T>>(target);
  return make_op<T>(
      std::move(out),
      [tgt, n](Node<T>& nd) {
        auto p_ = nd.parents[0];
        if (!p_->requires_grad) return;
        T* gp = grad_of(p_).ptr();
        const T g = nd.grad[0];
        for (int64_t i = 0; i < n; ++i)
          gp[i] += g * T(2) * (p_->value[i] - (*tgt)[i]);
      },
      pred);
}

// Elementwise-masked squared error sum: sum(mask * (pred - target)^2).
template <typename T>
Var<T> mse_sum_masked(Var<T> pred, const Tensor<T>& target, const Tensor<T>& mask) {
  SD_SHAPE(pred->value.shape == target.shape && pred->value.shape == mask.shape,
           "mse_sum_masked shapes");
  T acc = T(0);
  const int64_t n = pred->value.numel();
  for (int64_t i = 0; i < n; ++i) {
    const T d = pred->value[i] - target[i];
    acc += mask[i] * d * d;
  }
  Tensor<T> out({1});
  out[0] = acc;
  auto tgt = std::make_shared<Tensor<T>>(target);
  auto msk = std::make_shared<Tensor<T>>(mask);
  return make_op<T>(
      std::move(out),
      [tgt, msk, n](Node<T>& nd) {
        auto p_ = nd.parents[0];
        if (!p_->requires_grad) return;
        T* gp = grad_of(p_).ptr();
        const T g = nd.grad[0];
        for (int64_t i = 0; i < n; ++i)
          gp[i] += g * T(2) * (*msk)[i] * (p_->value[i] - (*tgt)[i]);
      },
      pred);
}

template <typename T>
Var<T> l1_sum(Var<T> pred, const Tensor<T>& target) {
  SD_SHAPE(pred->value.shape == target.shape, "l1_sum shapes");
  T acc = T(0);
  const int64_t n = pred->value.numel();
  for (int64_t i = 0; i < n; ++i) acc += std::abs(pred->value[i] - target[i]);
  Tensor<T> out({1});
  out[0] = acc;
  auto tgt = std::make_shared<Tensor<T>>(target);
  return make_op<T>(
      std::move(out),
      [tgt, n](Node<T>& nd) {
        auto p_ = nd.parents[0];
        if (!p_->requires_grad) return;
        T* gp = grad_of(p_).ptr();
        const T g = nd.grad[0];
        for (int64_t i = 0; i < n; ++i) {
          const T d = p_->value[i] - (*tgt)[i];
          gp[i] += g * (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)));
        }
      },
      pred);
}

// Numerically-stable sum of per-element BCE with logits against {0,1} targets.
template <typename T>
Var<T> bce_logits_sum(Var<T> logits, const Tensor<T>& targets) {
  SD_SHAPE(logits->value.shape == targets.shape, "bce_logits_sum shapes");
  T acc = T(0);
  const int64_t n = logits->value.numel();
  for (int64_t i = 0; i < n; ++i) {
    const T z = logits->value[i], y = targets[i];
    // log(1+e^z) - y*z, stable for both signs of z
    acc += std::max(z, T(0)) - y * z + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor<T> out({1});
  out[0] = acc;
  auto tgt = std::make_shared<Tensor<T>>(targets);
  return make_op<T>(
      std::move(out),
      [tgt, n](Node<T>& nd) {
        auto p_ = nd.parents[0];
        if (!p_->requires_grad) return;
        T* gp = grad_of(p_).ptr();
        const T g = nd.grad[0];
        for (int64_t i = 0; i < n; ++i) {
          const T z = p_->value[i];
          const T s = T(1) / (T(1) + std::exp(-z));
          gp[i] += g * (s - (*tgt)[i]);
        }
      },
      logits);
}

// Cross-entropy summed over rows. logits (R,V); ids per row; optional
// per-row vocabulary restriction [off, off+len): entries outside are excluded
// from the log-sum-exp (no cross-vocabulary leakage) and get zero gradient.
// Rows with id < 0 are skipped (padding).
template <typename T>
struct VocabSpan {
  int64_t off = 0;
  int64_t len = 0;  // 0 means the whole vocabulary
};

template <typename T>
Var<T> cross_entropy_sum(Var<T> logits, std::vector<int64_t> ids,
                         std::vector<VocabSpan<T>> spans = {}) {
  SD_SHAPE(logits->value.rank() == 2, "cross_entropy_sum logits rank");
  const int64_t R = logits->value.dim(0), V = logits->value.dim(1);
  SD_SHAPE(static_cast<int64_t>(ids.size()) == R, "cross_entropy_sum rows");
  if (spans.empty()) spans.assign(static_cast<size_t>(R), VocabSpan<T>{0, V});
  SD_SHAPE(static_cast<int64_t>(spans.size()) == R, "cross_entropy_sum spans");

  T acc = T(0);
  const T* lp = logits->value.ptr();
  for (int64_t r = 0; r < R; ++r) {
    if (ids[static_cast<size_t>(r)] < 0) continue;
    auto [off, len] = spans[static_cast<size_t>(r)];
    if (len == 0) len = V;
    const int64_t id = ids[static_cast<size_t>(r)];
    SD_CHECK(id >= off && id < off + len, IndexOutOfRange,
             "target " << id << " outside vocab span [" << off << "," << off + len << ")");
    const T* row = lp + r * V;
    T mx = row[off];
    for (int64_t c = off; c < off + len; ++c) mx = std::max(mx, row[c]);
    T z = T(0);
    for (int64_t c = off; c < off + len; ++c) z += std::exp(row[c] - mx);
    acc += std::log(z) + mx - row[id];
  }
  Tensor<T> out({1});
  out[0] = acc;
  return make_op<T>(
      std::move(out),
      [R, V, ids = std::move(ids), spans = std::move(spans)](Node<T>& nd) {
        auto l_ = nd.parents[0];
        if (!l_->requires_grad) return;
        T* gl = grad_of(l_).ptr();
        const T* lp = l_->value.ptr();
        const T g = nd.grad[0];
        for (int64_t r = 0; r < R; ++r) {
          if (ids[static_cast<size_t>(r)] < 0) continue;
          auto [off, len] = spans[static_cast<size_t>(r)];
          if (len == 0) len = V;
          const int64_t id = ids[static_cast<size_t>(r)];
          const T* row = lp + r * V;
          T mx = row[off];
          for (int64_t c = off; c < off + len; ++c) mx = std::max(mx, row[c]);
          T z = T(0);
          for (int64_t c = off; c < off + len; ++c) z += std::exp(row[c] - mx);
          for (int64_t c = off; c < off + len; ++c) {
            const T p = std::exp(row[c] - mx) / z;
            gl[r * V + c] += g * (p - (c == id ? T(1) : T(0)));
          }
        }
      },
      logits);
}

}  // namespace slotdrive::nn
