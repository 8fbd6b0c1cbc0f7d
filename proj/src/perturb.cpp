#include "cer/perturb.hpp"

#include <stdexcept>

namespace cer {

Strategy strategy_from_string(const std::string& name) {
  if (name == "none") return Strategy::None;
  if (name == "madeup") return Strategy::Madeup;
  if (name == "semantics") return Strategy::Semantics;
  if (name == "dropout") return Strategy::Dropout;
  if (name == "gaussian") return Strategy::Gaussian;
  if (name == "random") return Strategy::Random;
  throw std::invalid_argument("unknown noise strategy '" + name +
                              "' (none|madeup|semantics|dropout|gaussian|random)");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::None: return "none";
    case Strategy::Madeup: return "madeup";
    case Strategy::Semantics: return "semantics";
    case Strategy::Dropout: return "dropout";
    case Strategy::Gaussian: return "gaussian";
    case Strategy::Random: return "random";
  }
  return "none";
}

void PerturbationSpec::validate(int dict_size) const {
  if (sigma < 0.0 || sigma > 1.0)
    throw std::invalid_argument("perturbation: sigma must be in [0,1]");
  if (m < 1) throw std::invalid_argument("perturbation: m must be >= 1");
  if (strategy == Strategy::Semantics && m >= dict_size)
    throw std::invalid_argument("perturbation: m must be smaller than the dictionary");
  if (gaussian_std <= 0.0)
    throw std::invalid_argument("perturbation: gaussian_std must be positive");
}

std::vector<Index> sample_positions(const std::vector<int>& ids, int v_real, double sigma,
                                    Rng& rng) {
  std::vector<Index> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < Vocabulary::kSpecialCount || ids[i] >= v_real) continue;
    if (rng.uniform() < sigma) out.push_back(static_cast<Index>(i));
  }
  return out;
}

std::vector<int> apply_madeup(const std::vector<int>& ids, const std::vector<Index>& positions,
                              int v_real, int v_madeup, Rng& rng) {
  if (v_madeup <= 0 && !positions.empty())
    throw std::invalid_argument("apply_madeup: made-up dictionary is empty");
  std::vector<int> out = ids;
  for (Index p : positions) {
    if (p < 0 || p >= static_cast<Index>(ids.size()))
      throw std::invalid_argument("apply_madeup: position out of range");
    out[static_cast<std::size_t>(p)] =
        v_real + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(v_madeup)));
  }
  return out;
}

}  // namespace cer
