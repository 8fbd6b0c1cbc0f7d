#pragma once

#include <array>
#include <string>
#include <vector>

namespace cer {

struct BleuDetail {
  double bleu = 0.0;  // in [0,1]
  std::array<double, 4> precision{};
  double brevity_penalty = 1.0;
  long long hyp_len = 0;
  long long ref_len = 0;
};

// Corpus-level case-insensitive BLEU-4 with clipped modified precisions,
// closest-reference-length brevity penalty (ties to the shorter length) and
// an epsilon floor of 1e-9 on empty n-gram buckets. refs[i] lists one or more
// references for hyps[i].
BleuDetail corpus_bleu_detail(const std::vector<std::string>& hyps,
                              const std::vector<std::vector<std::string>>& refs);

double corpus_bleu(const std::vector<std::string>& hyps,
                   const std::vector<std::vector<std::string>>& refs);

// Single-reference convenience.
double corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs);

}  // namespace cer
