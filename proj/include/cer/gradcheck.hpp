#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cer/tensor.hpp"

namespace cer {

template <class S>
struct GradCheckEntry {
  std::string name;
  S max_rel_err = S(0);
  Index row = -1, col = -1;
  S analytic = S(0), numeric = S(0);
};

template <class S>
struct GradCheckResult {
  std::vector<GradCheckEntry<S>> leaves;
  S max_rel_err = S(0);

  bool ok(S tol) const { return max_rel_err < tol; }
};

// Central-difference gradient verification. `build` must construct the loss
// from scratch on every call (recording on the tape when one is given) and be
// deterministic: any RNG it consumes has to be reseeded inside the builder.
// Relative error is |a - n| / max(|a|, |n|, 1).
template <class S>
GradCheckResult<S> grad_check(const std::function<Tensor<S>(Tape<S>*)>& build,
                              const std::vector<std::pair<std::string, Tensor<S>>>& leaves,
                              S h) {
  for (const auto& [name, leaf] : leaves) {
    if (!leaf.requires_grad())
      throw std::invalid_argument("grad_check: leaf '" + name + "' does not require grad");
    leaf.zero_grad();
  }
  Tape<S> tape;
  Tensor<S> loss = build(&tape);
  tape.backward(loss);

  std::vector<Mat<S>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& [name, leaf] : leaves) analytic.push_back(leaf.grad());

  GradCheckResult<S> result;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const Tensor<S>& leaf = leaves[i].second;
    GradCheckEntry<S> entry;
    entry.name = leaves[i].first;
    for (Index r = 0; r < leaf.rows(); ++r) {
      for (Index c = 0; c < leaf.cols(); ++c) {
        const S saved = leaf.value()(r, c);
        leaf.value()(r, c) = saved + h;
        const S up = build(nullptr).item();
        leaf.value()(r, c) = saved - h;
        const S down = build(nullptr).item();
        leaf.value()(r, c) = saved;
        const S numeric = (up - down) / (S(2) * h);
        const S a = analytic[i](r, c);
        const S denom = std::max({std::abs(a), std::abs(numeric), S(1)});
        const S rel = std::abs(a - numeric) / denom;
        if (rel > entry.max_rel_err) {
          entry.max_rel_err = rel;
          entry.row = r;
          entry.col = c;
          entry.analytic = a;
          entry.numeric = numeric;
        }
      }
    }
    result.max_rel_err = std::max(result.max_rel_err, entry.max_rel_err);
    result.leaves.push_back(std::move(entry));
  }
  return result;
}

}  // namespace cer
