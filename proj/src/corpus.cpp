#include "cer/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "cer/rng.hpp"

namespace cer {

std::optional<EncodedPair> encode_pair(const std::string& src_line, const std::string& tgt_line,
                                       const Vocabulary& src_vocab, const Vocabulary& tgt_vocab) {
  EncodedPair p;
  p.src = src_vocab.encode(src_line);
  const std::vector<int> tgt = tgt_vocab.encode(tgt_line);
  if (p.src.empty() || tgt.empty()) return std::nullopt;
  p.tgt.reserve(tgt.size() + 2);
  p.tgt.push_back(Vocabulary::kBos);
  p.tgt.insert(p.tgt.end(), tgt.begin(), tgt.end());
  p.tgt.push_back(Vocabulary::kEos);
  return p;
}

std::vector<EncodedPair> load_parallel_corpus(const std::string& src_path,
                                              const std::string& tgt_path,
                                              const Vocabulary& src_vocab,
                                              const Vocabulary& tgt_vocab, std::ostream* warn) {
  std::ifstream src_in(src_path), tgt_in(tgt_path);
  if (!src_in) throw std::runtime_error("corpus: cannot read " + src_path);
  if (!tgt_in) throw std::runtime_error("corpus: cannot read " + tgt_path);

  std::vector<EncodedPair> pairs;
  std::string src_line, tgt_line;
  long long line_no = 0;
  while (true) {
    const bool got_src = static_cast<bool>(std::getline(src_in, src_line));
    const bool got_tgt = static_cast<bool>(std::getline(tgt_in, tgt_line));
    if (!got_src && !got_tgt) break;
    if (got_src != got_tgt)
      throw std::runtime_error("corpus: line counts differ between " + src_path + " and " +
                               tgt_path);
    ++line_no;
    auto pair = encode_pair(src_line, tgt_line, src_vocab, tgt_vocab);
    if (!pair) {
      if (warn) *warn << "corpus: skipping empty pair at line " << line_no << "\n";
      continue;
    }
    pairs.push_back(std::move(*pair));
  }
  return pairs;
}

ParallelBatch pack_batch(const std::vector<EncodedPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("pack_batch: no pairs");
  ParallelBatch b;
  b.batch = static_cast<long long>(pairs.size());
  for (const EncodedPair& p : pairs) {
    b.src_len = std::max(b.src_len, static_cast<long long>(p.src.size()));
    b.tgt_len = std::max(b.tgt_len, static_cast<long long>(p.tgt.size()));
  }
  b.src.assign(static_cast<std::size_t>(b.batch * b.src_len), Vocabulary::kPad);
  b.tgt.assign(static_cast<std::size_t>(b.batch * b.tgt_len), Vocabulary::kPad);
  for (long long i = 0; i < b.batch; ++i) {
    const EncodedPair& p = pairs[static_cast<std::size_t>(i)];
    b.src_lens.push_back(static_cast<long long>(p.src.size()));
    b.tgt_lens.push_back(static_cast<long long>(p.tgt.size()));
    std::copy(p.src.begin(), p.src.end(), b.src.begin() + i * b.src_len);
    std::copy(p.tgt.begin(), p.tgt.end(), b.tgt.begin() + i * b.tgt_len);
  }
  return b;
}

ParallelBatch extend_padding(const ParallelBatch& b, long long extra_src, long long extra_tgt) {
  ParallelBatch out;
  out.batch = b.batch;
  out.src_len = b.src_len + extra_src;
  out.tgt_len = b.tgt_len + extra_tgt;
  out.src_lens = b.src_lens;
  out.tgt_lens = b.tgt_lens;
  out.src.assign(static_cast<std::size_t>(out.batch * out.src_len), Vocabulary::kPad);
  out.tgt.assign(static_cast<std::size_t>(out.batch * out.tgt_len), Vocabulary::kPad);
  for (long long i = 0; i < b.batch; ++i) {
    std::copy(b.src.begin() + i * b.src_len, b.src.begin() + (i + 1) * b.src_len,
              out.src.begin() + i * out.src_len);
    std::copy(b.tgt.begin() + i * b.tgt_len, b.tgt.begin() + (i + 1) * b.tgt_len,
              out.tgt.begin() + i * out.tgt_len);
  }
  return out;
}

std::vector<ParallelBatch> make_batches(const std::vector<EncodedPair>& pairs,
                                        long long batch_tokens, std::uint64_t seed) {
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (pairs[i].tokens() > batch_tokens)
      throw std::invalid_argument("make_batches: pair " + std::to_string(i) + " has " +
                                  std::to_string(pairs[i].tokens()) +
                                  " tokens, over the batch budget of " +
                                  std::to_string(batch_tokens));

  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(i)))]);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pairs[a].src.size() != pairs[b].src.size()) return pairs[a].src.size() < pairs[b].src.size();
    return pairs[a].tgt.size() < pairs[b].tgt.size();
  });

  std::vector<std::vector<EncodedPair>> groups;
  std::vector<EncodedPair> cur;
  long long cur_tokens = 0;
  for (std::size_t idx : order) {
    const long long cost = pairs[idx].tokens();
    if (!cur.empty() && cur_tokens + cost > batch_tokens) {
      groups.push_back(std::move(cur));
      cur.clear();
      cur_tokens = 0;
    }
    cur.push_back(pairs[idx]);
    cur_tokens += cost;
  }
  if (!cur.empty()) groups.push_back(std::move(cur));

  for (std::size_t i = groups.size(); i > 1; --i)
    std::swap(groups[i - 1], groups[static_cast<std::size_t>(rng.uniform_int(static_cast<std::uint64_t>(i)))]);

  std::vector<ParallelBatch> batches;
  batches.reserve(groups.size());
  for (const auto& g : groups) batches.push_back(pack_batch(g));
  return batches;
}

}  // namespace cer
