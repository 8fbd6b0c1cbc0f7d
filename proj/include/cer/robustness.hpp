#pragma once

#include <cmath>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cer/bleu.hpp"
#include "cer/decode.hpp"
#include "cer/perturb.hpp"
#include "cer/vocab.hpp"

namespace cer {

struct RobustnessPoint {
  double rate = 0.0;
  std::string system;
  std::uint64_t seed = 0;
  double bleu = 0.0;
};

struct RobustnessReport {
  std::vector<RobustnessPoint> points;  // rate-major, then system, then seed
  std::vector<double> rates;
  std::vector<std::string> systems;

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const RobustnessPoint& p : points) {
      nlohmann::json j;
      j["rate"] = p.rate;
      j["system"] = p.system;
      j["seed"] = p.seed;
      j["bleu"] = p.bleu;
      arr.push_back(std::move(j));
    }
    return arr;
  }

  // Plot-ready aggregation: mean and sample standard deviation across seeds.
  std::string to_tsv() const {
    std::ostringstream out;
    out << "rate\tsystem\tmean\tsd\n";
    for (double rate : rates) {
      for (const std::string& system : systems) {
        std::vector<double> vals;
        for (const RobustnessPoint& p : points)
          if (p.rate == rate && p.system == system) vals.push_back(p.bleu);
        if (vals.empty()) continue;
        double mean = 0.0;
        for (double v : vals) mean += v;
        mean /= static_cast<double>(vals.size());
        double sd = 0.0;
        if (vals.size() > 1) {
          for (double v : vals) sd += (v - mean) * (v - mean);
          sd = std::sqrt(sd / static_cast<double>(vals.size() - 1));
        }
        out << rate << '\t' << system << '\t' << mean << '\t' << sd << '\n';
      }
    }
    return out.str();
  }

  double mean_bleu(double rate, const std::string& system) const {
    double acc = 0.0;
    int n = 0;
    for (const RobustnessPoint& p : points)
      if (p.rate == rate && p.system == system) {
        acc += p.bleu;
        ++n;
      }
    if (n == 0) throw std::invalid_argument("robustness report: no points for " + system);
    return acc / n;
  }
};

template <class S>
struct RobustnessSystem {
  std::string name;
  TransformerModel<S>* model = nullptr;
  bool nal_active = false;
};

// Test-time source perturbation at a given rate. Made-up noise becomes UNK
// injection (unseen surface forms have no reserved ids at deployment); the
// embedding-level strategies reuse their training-time overrides.
template <class S>
void perturb_test_source(const std::vector<int>& ids, Strategy strategy, double rate, int m,
                         double gaussian_std, TransformerModel<S>& model, Rng& rng,
                         std::vector<int>& ids_out, PerturbationPlan<S>& plan_out,
                         std::ostream* warn = nullptr) {
  ids_out = ids;
  plan_out = PerturbationPlan<S>{};
  if (rate == 0.0 || strategy == Strategy::None) return;
  const ModelConfig& cfg = model.config();
  if (strategy == Strategy::Madeup) {
    for (Index p : sample_positions(ids, cfg.v_src, rate, rng))
      ids_out[static_cast<std::size_t>(p)] = Vocabulary::kUnk;
    return;
  }
  PerturbationSpec spec{strategy, rate, m, gaussian_std};
  plan_out = apply_strategy<S>(ids, spec, model.src_embedding().value(), cfg.v_src, cfg.m_madeup,
                               rng, warn);
}

// Decodes every system on noise-injected copies of the test set across the
// rate grid and seeds. All systems see identical perturbation draws for a
// given (rate, seed).
template <class S>
RobustnessReport robustness_eval(const std::vector<RobustnessSystem<S>>& systems,
                                 const std::vector<std::vector<int>>& test_src,
                                 const std::vector<std::vector<std::string>>& refs,
                                 const Vocabulary& tgt_vocab, Strategy strategy,
                                 const std::vector<double>& rates,
                                 const std::vector<std::uint64_t>& seeds,
                                 const DecodeConfig& dcfg, int m = 3, double gaussian_std = 0.01,
                                 std::ostream* warn = nullptr) {
  if (systems.empty()) throw std::invalid_argument("robustness_eval: no systems");
  if (test_src.size() != refs.size())
    throw std::invalid_argument("robustness_eval: source/reference count mismatch");
  if (rates.empty() || seeds.empty())
    throw std::invalid_argument("robustness_eval: need at least one rate and one seed");
  const ModelConfig& first = systems.front().model->config();
  for (const RobustnessSystem<S>& sys : systems) {
    const ModelConfig& cfg = sys.model->config();
    if (cfg.v_src != first.v_src || cfg.v_tgt != first.v_tgt)
      throw std::invalid_argument("robustness_eval: vocabulary mismatch between systems");
  }

  RobustnessReport report;
  report.rates = rates;
  for (const RobustnessSystem<S>& sys : systems) report.systems.push_back(sys.name);

  for (double rate : rates) {
    for (const RobustnessSystem<S>& sys : systems) {
      for (std::uint64_t seed : seeds) {
        Rng rng(derive_seed(seed, "robust"));
        std::vector<std::string> hyps;
        hyps.reserve(test_src.size());
        std::vector<int> noisy_ids;
        PerturbationPlan<S> plan;
        for (const std::vector<int>& src : test_src) {
          perturb_test_source(src, strategy, rate, m, gaussian_std, *sys.model, rng, noisy_ids,
                              plan, warn);
          const std::vector<int> out =
              decode(*sys.model, noisy_ids, dcfg, sys.nal_active, warn,
                     plan.empty() ? nullptr : &plan);
          hyps.push_back(tgt_vocab.decode(out));
        }
        report.points.push_back(
            RobustnessPoint{rate, sys.name, seed, corpus_bleu(hyps, refs)});
      }
    }
  }
  return report;
}

}  // namespace cer
