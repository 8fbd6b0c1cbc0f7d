#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "cer/rng.hpp"
#include "cer/tensor.hpp"
#include "cer/vocab.hpp"

namespace cer {

enum class Strategy { None, Madeup, Semantics, Dropout, Gaussian, Random };

Strategy strategy_from_string(const std::string& name);
std::string to_string(Strategy s);

struct PerturbationSpec {
  Strategy strategy = Strategy::None;
  double sigma = 0.1;
  int m = 3;
  double gaussian_std = 0.01;

  // dict_size is the real-word dictionary the strategy draws from.
  void validate(int dict_size) const;
};

// How the embedding layer should realize the perturbation.
enum class OverrideKind {
  None,      // empty plan
  ReplaceId,  // swap token ids before lookup (Madeup, Random)
  Constant,   // replace the raw embedding row with a fixed vector (Dropout, Gaussian)
  TableMean,  // replace with the mean of m live table rows (Semantics)
};

// Positions are row indices into the flattened (B*L) id stream of one batch
// side. They are distinct, ascending, and never at PAD/BOS/EOS/UNK.
template <class S>
struct PerturbationPlan {
  std::vector<Index> positions;
  OverrideKind kind = OverrideKind::None;
  std::vector<int> ids_after;  // ReplaceId: one id per position
  Mat<S> constants;            // Constant: |positions| x d_model
  std::vector<int> mean_ids;   // TableMean: m table rows per position, flattened
  int m = 0;

  bool empty() const { return positions.empty(); }
};

// Independent Bernoulli(sigma) over eligible positions (real-word ids only;
// specials and pads are skipped without consuming a draw, so appending pads
// never shifts the stream).
std::vector<Index> sample_positions(const std::vector<int>& ids, int v_real, double sigma,
                                    Rng& rng);

// Uniform made-up id in [V, V+M) at each selected position.
std::vector<int> apply_madeup(const std::vector<int>& ids, const std::vector<Index>& positions,
                              int v_real, int v_madeup, Rng& rng);

// The m real-word ids with the highest cosine similarity to row `id`,
// excluding the query itself; ties broken by lower id. Zero-norm rows are
// dropped from candidacy with a warning.
template <class S>
std::vector<int> top_m_neighbors(int id, const Mat<S>& table, int m, int v_real,
                                 std::ostream* warn = nullptr);

// Mean of the neighbor embeddings, as a 1 x d row.
template <class S>
Mat<S> semantic_perturb_embedding(int id, const Mat<S>& table, int m, int v_real,
                                  std::ostream* warn = nullptr);

// Samples positions and materializes the strategy's overrides against the
// given table snapshot. Draw order: one Bernoulli sweep, then per selected
// position (ascending) the strategy's own draws.
template <class S>
PerturbationPlan<S> apply_strategy(const std::vector<int>& ids, const PerturbationSpec& spec,
                                   const Mat<S>& table, int v_real, int v_madeup, Rng& rng,
                                   std::ostream* warn = nullptr);

}  // namespace cer

#include "cer/perturb_impl.hpp"
