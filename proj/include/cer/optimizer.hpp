#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "cer/tensor.hpp"

namespace cer {

// Transformer-style learning rate: linear warmup into inverse square-root
// decay. `scale` is usually d_model^-0.5 times a peak multiplier.
struct InverseSqrtSchedule {
  double scale = 1.0;
  long long warmup_steps = 4000;

  double lr(long long step) const {
    if (step < 1) step = 1;
    if (warmup_steps < 1) throw std::invalid_argument("schedule: warmup_steps must be >= 1");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(warmup_steps);
    return scale * std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
  }
};

template <class S>
class AdamOptimizer {
 public:
  struct Config {
    S beta1 = S(0.9);
    S beta2 = S(0.98);
    S eps = S(1e-9);
  };

  explicit AdamOptimizer(std::vector<Tensor<S>> params, Config cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.push_back(Mat<S>::Zero(p.rows(), p.cols()));
      v_.push_back(Mat<S>::Zero(p.rows(), p.cols()));
    }
  }

  long long steps_done() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // One update from the gradients currently stored on the parameters. A
  // parameter whose gradient buffer was never touched has zero moments and
  // a zero gradient, so its exact update is zero; skip it outright.
  void step(S lr) {
    ++t_;
    const S b1t = S(1) - std::pow(cfg_.beta1, S(t_));
    const S b2t = S(1) - std::pow(cfg_.beta2, S(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>& p = params_[i];
      if (!p.grad_allocated()) continue;
      const Mat<S>& g = p.grad();
      m_[i] = cfg_.beta1 * m_[i] + (S(1) - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (S(1) - cfg_.beta2) * g.cwiseProduct(g);
      p.value().noalias() -=
          (lr / b1t) * (m_[i].array() / ((v_[i] / b2t).cwiseSqrt().array() + cfg_.eps)).matrix();
    }
  }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<Mat<S>> m_, v_;
  Config cfg_;
  long long t_ = 0;
};

}  // namespace cer
