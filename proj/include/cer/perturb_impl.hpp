#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace cer {

template <class S>
std::vector<int> top_m_neighbors(int id, const Mat<S>& table, int m, int v_real,
                                 std::ostream* warn) {
  if (id < 0 || id >= table.rows())
    throw std::invalid_argument("top_m_neighbors: id out of range");
  if (m < 1) throw std::invalid_argument("top_m_neighbors: m must be >= 1");

  const double query_norm = table.row(id).template cast<double>().norm();
  if (query_norm == 0.0 && warn) *warn << "top_m_neighbors: query row " << id << " has zero norm\n";

  std::vector<std::pair<double, int>> scored;
  for (int j = Vocabulary::kSpecialCount; j < v_real; ++j) {
    if (j == id) continue;
    const double norm = table.row(j).template cast<double>().norm();
    if (norm == 0.0) {
      if (warn) *warn << "top_m_neighbors: dropping zero-norm row " << j << "\n";
      continue;
    }
    const double cos =
        query_norm == 0.0
            ? 0.0
            : table.row(id).template cast<double>().dot(table.row(j).template cast<double>()) /
                  (query_norm * norm);
    scored.emplace_back(cos, j);
  }
  if (static_cast<int>(scored.size()) < m)
    throw std::invalid_argument("top_m_neighbors: only " + std::to_string(scored.size()) +
                                " candidates for m=" + std::to_string(m));
  std::partial_sort(scored.begin(), scored.begin() + m, scored.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                    });
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) out.push_back(scored[static_cast<std::size_t>(i)].second);
  return out;
}

template <class S>
Mat<S> semantic_perturb_embedding(int id, const Mat<S>& table, int m, int v_real,
                                  std::ostream* warn) {
  const std::vector<int> neighbors = top_m_neighbors(id, table, m, v_real, warn);
  Mat<S> mean = Mat<S>::Zero(1, table.cols());
  for (int j : neighbors) mean.row(0) += table.row(j);
  mean /= S(m);
  return mean;
}

template <class S>
PerturbationPlan<S> apply_strategy(const std::vector<int>& ids, const PerturbationSpec& spec,
                                   const Mat<S>& table, int v_real, int v_madeup, Rng& rng,
                                   std::ostream* warn) {
  spec.validate(v_real - Vocabulary::kSpecialCount);
  PerturbationPlan<S> plan;
  if (spec.strategy == Strategy::None) return plan;
  if (spec.strategy == Strategy::Madeup && v_madeup == 0)
    throw std::invalid_argument("apply_strategy: Madeup needs a non-empty made-up dictionary");

  plan.positions = sample_positions(ids, v_real, spec.sigma, rng);
  switch (spec.strategy) {
    case Strategy::Madeup: {
      plan.kind = OverrideKind::ReplaceId;
      for (std::size_t i = 0; i < plan.positions.size(); ++i)
        plan.ids_after.push_back(v_real + static_cast<int>(rng.uniform_int(
                                              static_cast<std::uint64_t>(v_madeup))));
      break;
    }
    case Strategy::Random: {
      plan.kind = OverrideKind::ReplaceId;
      const int lo = Vocabulary::kSpecialCount;
      for (Index p : plan.positions) {
        int pick = ids[static_cast<std::size_t>(p)];
        while (pick == ids[static_cast<std::size_t>(p)])
          pick = lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(v_real - lo)));
        plan.ids_after.push_back(pick);
      }
      break;
    }
    case Strategy::Dropout: {
      plan.kind = OverrideKind::Constant;
      plan.constants = Mat<S>::Zero(static_cast<Index>(plan.positions.size()), table.cols());
      break;
    }
    case Strategy::Gaussian: {
      plan.kind = OverrideKind::Constant;
      plan.constants =
          Mat<S>(static_cast<Index>(plan.positions.size()), table.cols());
      for (std::size_t i = 0; i < plan.positions.size(); ++i) {
        const int id = ids[static_cast<std::size_t>(plan.positions[i])];
        for (Index d = 0; d < table.cols(); ++d)
          plan.constants(static_cast<Index>(i), d) =
              table(id, d) + S(spec.gaussian_std * rng.normal());
      }
      break;
    }
    case Strategy::Semantics: {
      plan.kind = OverrideKind::TableMean;
      plan.m = spec.m;
      for (Index p : plan.positions) {
        const std::vector<int> n =
            top_m_neighbors(ids[static_cast<std::size_t>(p)], table, spec.m, v_real, warn);
        plan.mean_ids.insert(plan.mean_ids.end(), n.begin(), n.end());
      }
      break;
    }
    case Strategy::None:
      break;
  }
  return plan;
}

}  // namespace cer
