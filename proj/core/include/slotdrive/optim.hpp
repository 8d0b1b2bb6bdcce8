#pragma once

#include <cmath>
#include <vector>

#include "slotdrive/autograd.hpp"

namespace slotdrive::nn {

template <typename T>
double global_grad_norm(const std::vector<Var<T>>& params) {
  double acc = 0.0;
  for (auto& p : params) {
    if (!p->has_grad()) continue;
    for (const T& g : p->grad.data) acc += double(g) * double(g);
  }
  return std::sqrt(acc);
}

// Scales all gradients so the global norm is at most max_norm. Returns the
// pre-clip norm.
template <typename T>
double clip_grad_norm(std::vector<Var<T>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0.0) {
    const T s = T(max_norm / norm);
    for (auto& p : params) {
      if (!p->has_grad()) continue;
      for (T& g : p->grad.data) g *= s;
    }
  }
  return norm;
}

// Adam with optional decoupled weight decay (AdamW when wd > 0).
template <typename T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, double lr, double weight_decay = 0.0,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1),
        b2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& p : params_) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, double(t_));
    const double bc2 = 1.0 - std::pow(b2_, double(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p->has_grad()) continue;
      T* w = p->value.ptr();
      const T* g = p->grad.ptr();
      T* m = m_[i].ptr();
      T* v = v_[i].ptr();
      const int64_t n = p->value.numel();
      for (int64_t j = 0; j < n; ++j) {
        const double gj = double(g[j]);
        const double mj = b1_ * double(m[j]) + (1.0 - b1_) * gj;
        const double vj = b2_ * double(v[j]) + (1.0 - b2_) * gj * gj;
        m[j] = T(mj);
        v[j] = T(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        double upd = lr_ * mhat / (std::sqrt(vhat) + eps_);
        if (wd_ > 0.0) upd += lr_ * wd_ * double(w[j]);
        w[j] = T(double(w[j]) - upd);
      }
    }
  }

  std::vector<Var<T>>& params() { return params_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  int64_t t_ = 0;
};

// Linear warmup to base_lr, then cosine decay to floor_frac * base_lr.
inline double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps,
                    double base_lr, double floor_frac = 0.1) {
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * double(step + 1) / double(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double t = double(step - warmup_steps) / double(total_steps - warmup_steps);
  const double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, t)));
  return base_lr * (floor_frac + (1.0 - floor_frac) * c);
}

}  // namespace slotdrive::nn
