#include "cer/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <unordered_map>

#include "cer/text.hpp"

namespace cer {

namespace {

constexpr double kEps = 1e-9;

using Counts = std::unordered_map<std::string, long long>;

Counts ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  Counts out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (std::size_t j = 1; j < n; ++j) {
      key += '\x1f';
      key += toks[i + j];
    }
    ++out[key];
  }
  return out;
}

}  // namespace

BleuDetail corpus_bleu_detail(const std::vector<std::string>& hyps,
                              const std::vector<std::vector<std::string>>& refs) {
  if (hyps.empty()) throw std::invalid_argument("bleu: no hypotheses");
  if (refs.size() != hyps.size())
    throw std::invalid_argument("bleu: hypothesis/reference counts differ");

  std::array<long long, 4> match{}, total{};
  long long hyp_len = 0, ref_len = 0;

  for (std::size_t i = 0; i < hyps.size(); ++i) {
    if (refs[i].empty())
      throw std::invalid_argument("bleu: hypothesis " + std::to_string(i) + " has no references");
    const std::vector<std::string> hyp = split_ws(lowercase(hyps[i]));
    std::vector<std::vector<std::string>> ref_toks;
    ref_toks.reserve(refs[i].size());
    for (const std::string& r : refs[i]) ref_toks.push_back(split_ws(lowercase(r)));

    hyp_len += static_cast<long long>(hyp.size());
    long long closest = static_cast<long long>(ref_toks[0].size());
    for (const auto& r : ref_toks) {
      const long long len = static_cast<long long>(r.size());
      const long long d_new = std::llabs(len - static_cast<long long>(hyp.size()));
      const long long d_old = std::llabs(closest - static_cast<long long>(hyp.size()));
      if (d_new < d_old || (d_new == d_old && len < closest)) closest = len;
    }
    ref_len += closest;

    for (std::size_t n = 1; n <= 4; ++n) {
      const Counts hc = ngram_counts(hyp, n);
      Counts best;
      for (const auto& r : ref_toks)
        for (const auto& [key, count] : ngram_counts(r, n))
          best[key] = std::max(best[key], count);
      for (const auto& [key, count] : hc) {
        total[n - 1] += count;
        auto it = best.find(key);
        if (it != best.end()) match[n - 1] += std::min(count, it->second);
      }
    }
  }

  BleuDetail d;
  d.hyp_len = hyp_len;
  d.ref_len = ref_len;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double p = total[n] == 0
                         ? kEps
                         : std::max(static_cast<double>(match[n]), kEps) / static_cast<double>(total[n]);
    d.precision[n] = p;
    log_sum += std::log(p);
  }
  d.brevity_penalty =
      hyp_len >= ref_len || hyp_len == 0
          ? (hyp_len == 0 ? 0.0 : 1.0)
          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  d.bleu = d.brevity_penalty * std::exp(log_sum / 4.0);
  return d;
}

double corpus_bleu(const std::vector<std::string>& hyps,
                   const std::vector<std::vector<std::string>>& refs) {
  return corpus_bleu_detail(hyps, refs).bleu;
}

double corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  std::vector<std::vector<std::string>> wrapped;
  wrapped.reserve(refs.size());
  for (const std::string& r : refs) wrapped.push_back({r});
  return corpus_bleu(hyps, wrapped);
}

}  // namespace cer
