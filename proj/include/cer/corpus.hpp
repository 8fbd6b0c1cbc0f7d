#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cer/vocab.hpp"

namespace cer {

// Encoded sentence pair: raw source ids, target wrapped as BOS ... EOS.
struct EncodedPair {
  std::vector<int> src;
  std::vector<int> tgt;

  bool operator==(const EncodedPair&) const = default;
  long long tokens() const {
    return static_cast<long long>(src.size()) + static_cast<long long>(tgt.size());
  }
};

// Padded id matrices in row-major [batch x len] layout, PAD-filled suffixes.
struct ParallelBatch {
  long long batch = 0;
  long long src_len = 0;
  long long tgt_len = 0;
  std::vector<int> src;
  std::vector<int> tgt;
  std::vector<long long> src_lens;
  std::vector<long long> tgt_lens;

  int src_at(long long b, long long t) const { return src[static_cast<std::size_t>(b * src_len + t)]; }
  int tgt_at(long long b, long long t) const { return tgt[static_cast<std::size_t>(b * tgt_len + t)]; }
};

// Returns nullopt when either side tokenizes to nothing (skip-with-warning).
std::optional<EncodedPair> encode_pair(const std::string& src_line, const std::string& tgt_line,
                                       const Vocabulary& src_vocab, const Vocabulary& tgt_vocab);

// Loads two line-aligned files; skips empty-side pairs with a warning on
// `warn` when given. Throws if the files have different line counts.
std::vector<EncodedPair> load_parallel_corpus(const std::string& src_path,
                                              const std::string& tgt_path,
                                              const Vocabulary& src_vocab,
                                              const Vocabulary& tgt_vocab,
                                              std::ostream* warn = nullptr);

// Pads a group of pairs into one batch.
ParallelBatch pack_batch(const std::vector<EncodedPair>& pairs);

// Copy with PAD suffixes grown by the given amounts; lengths are unchanged.
ParallelBatch extend_padding(const ParallelBatch& b, long long extra_src, long long extra_tgt);

// Length-bucketed, seed-shuffled batches; each batch holds at most
// batch_tokens source+target tokens. Throws (naming the pair index) when a
// single pair exceeds the budget.
std::vector<ParallelBatch> make_batches(const std::vector<EncodedPair>& pairs,
                                        long long batch_tokens, std::uint64_t seed);

}  // namespace cer
