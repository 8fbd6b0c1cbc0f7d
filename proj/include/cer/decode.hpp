#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "cer/model.hpp"
#include "cer/vocab.hpp"

namespace cer {

struct DecodeConfig {
  int beam = 4;
  double alpha = 0.6;  // GNMT length penalty exponent
  int max_len_factor = 2;
  int max_len_offset = 10;

  void validate() const {
    if (beam < 1) throw std::invalid_argument("decode: beam size must be >= 1");
    if (alpha < 0.0) throw std::invalid_argument("decode: length penalty must be >= 0");
    if (max_len_factor < 0 || max_len_offset < 1)
      throw std::invalid_argument("decode: max length bounds must be positive");
  }

  int max_len(std::size_t src_len) const {
    return max_len_factor * static_cast<int>(src_len) + max_len_offset;
  }
};

inline double length_penalty(int len, double alpha) {
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

// Beam search over one source sentence. Returns generated target ids without
// BOS/EOS. Scores are length-normalized log probabilities; the live beams are
// re-forwarded from scratch each step as one decoder batch.
template <class S>
std::vector<int> decode(TransformerModel<S>& model, const std::vector<int>& src,
                        const DecodeConfig& cfg, bool nal_active, std::ostream* warn = nullptr,
                        const PerturbationPlan<S>* src_plan = nullptr) {
  cfg.validate();
  if (src.empty()) {
    if (warn) (*warn) << "decode: empty source sentence, emitting empty output\n";
    return {};
  }
  const ModelConfig& mc = model.config();
  const Index Ls = static_cast<Index>(src.size());
  Rng no_dropout(0);
  const std::vector<long long> src_lens = {static_cast<long long>(Ls)};
  const Mat<S> enc_mask = pad_key_mask<S>(src_lens, 1, Ls, Ls);
  Tensor<S> x = src_plan
                    ? model.embed(nullptr, src, 1, Ls, Side::Encoder, *src_plan, no_dropout, false)
                    : model.embed(nullptr, src, 1, Ls, Side::Encoder, no_dropout, false);
  const Tensor<S> enc = model.encoder_forward(nullptr, x, enc_mask, no_dropout, false, nal_active)
                            .states;

  struct Hyp {
    std::vector<int> ids;  // generated tokens, BOS implied, EOS not included
    double logp = 0.0;
  };
  struct Finished {
    std::vector<int> ids;
    double score = 0.0;  // length-normalized
  };
  std::vector<Hyp> live = {Hyp{}};
  std::vector<Finished> done;

  const int limit = cfg.max_len(src.size());
  for (int step = 0; step < limit && !live.empty(); ++step) {
    const Index B = static_cast<Index>(live.size());
    const Index Lt = static_cast<Index>(step + 1);
    std::vector<int> dec_ids(static_cast<std::size_t>(B * Lt), Vocabulary::kPad);
    for (Index b = 0; b < B; ++b) {
      dec_ids[static_cast<std::size_t>(b * Lt)] = Vocabulary::kBos;
      for (int t = 0; t < step; ++t)
        dec_ids[static_cast<std::size_t>(b * Lt + 1 + t)] = live[static_cast<std::size_t>(b)].ids[static_cast<std::size_t>(t)];
    }
    Mat<S> enc_rep(B * Ls, mc.d_model);
    for (Index b = 0; b < B; ++b) enc_rep.middleRows(b * Ls, Ls) = enc.value();
    Tensor<S> enc_states = Tensor<S>::from_matrix(std::move(enc_rep), Shape{B, Ls, mc.d_model});

    const std::vector<long long> dec_lens(static_cast<std::size_t>(B), Lt);
    const std::vector<long long> key_lens(static_cast<std::size_t>(B), Ls);
    const Mat<S> self_mask = causal_pad_mask<S>(dec_lens, B, Lt);
    const Mat<S> cross_mask = pad_key_mask<S>(key_lens, B, Lt, Ls);

    Tensor<S> y = model.embed(nullptr, dec_ids, B, Lt, Side::Decoder, no_dropout, false);
    Tensor<S> logits = model
                           .decoder_forward(nullptr, y, enc_states, self_mask, cross_mask,
                                            no_dropout, false, nal_active)
                           .logits;

    struct Cand {
      Index hyp;
      int token;
      double logp;
    };
    std::vector<Cand> cands;
    cands.reserve(static_cast<std::size_t>(B * mc.v_tgt));
    for (Index b = 0; b < B; ++b) {
      const auto row = logits.value().row(b * Lt + Lt - 1);
      const double mx = static_cast<double>(row.maxCoeff());
      double z = 0.0;
      for (Index v = 0; v < mc.v_tgt; ++v) z += std::exp(static_cast<double>(row(v)) - mx);
      const double lse = mx + std::log(z);
      for (Index v = 0; v < mc.v_tgt; ++v) {
        if (v == Vocabulary::kPad || v == Vocabulary::kBos) continue;
        cands.push_back(Cand{b, static_cast<int>(v),
                             live[static_cast<std::size_t>(b)].logp +
                                 static_cast<double>(row(v)) - lse});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return a.logp > b.logp; });

    // EOS finalizes a hypothesis only from within the top-beam candidates
    // (this is what makes beam=1 the plain greedy argmax); live slots refill
    // from the remaining candidates in score order.
    std::vector<Hyp> next;
    int rank = 0;
    for (const Cand& c : cands) {
      const bool within_top = rank < cfg.beam;
      ++rank;
      if (c.token == Vocabulary::kEos) {
        if (within_top) {
          Finished f;
          f.ids = live[static_cast<std::size_t>(c.hyp)].ids;
          f.score = c.logp / length_penalty(static_cast<int>(f.ids.size()) + 1, cfg.alpha);
          done.push_back(std::move(f));
        }
        continue;
      }
      if (static_cast<int>(next.size()) < cfg.beam) {
        Hyp h = live[static_cast<std::size_t>(c.hyp)];
        h.ids.push_back(c.token);
        h.logp = c.logp;
        next.push_back(std::move(h));
      }
      if (static_cast<int>(next.size()) >= cfg.beam && rank >= cfg.beam) break;
    }
    live = std::move(next);
    if (static_cast<int>(done.size()) >= cfg.beam) break;
  }

  if (done.empty()) {
    // length limit hit with nothing finished: fall back to the live prefixes
    for (Hyp& h : live) {
      Finished f;
      f.score = h.logp / length_penalty(static_cast<int>(h.ids.size()), cfg.alpha);
      f.ids = std::move(h.ids);
      done.push_back(std::move(f));
    }
  }
  if (done.empty()) return {};
  const Finished* best = &done.front();
  for (const Finished& f : done)
    if (f.score > best->score) best = &f;
  return best->ids;
}

// Teacher-forced length-normalized score of a given output under the model;
// `out_ids` is BOS/EOS-free, the terminating EOS is appended here.
template <class S>
double sequence_score(TransformerModel<S>& model, const std::vector<int>& src,
                      const std::vector<int>& out_ids, double alpha, bool nal_active) {
  if (src.empty()) throw std::invalid_argument("sequence_score: empty source");
  const ModelConfig& mc = model.config();
  const Index Ls = static_cast<Index>(src.size());
  const Index Lt = static_cast<Index>(out_ids.size()) + 1;
  Rng no_dropout(0);
  const std::vector<long long> src_lens = {static_cast<long long>(Ls)};
  const Mat<S> enc_mask = pad_key_mask<S>(src_lens, 1, Ls, Ls);
  Tensor<S> x = model.embed(nullptr, src, 1, Ls, Side::Encoder, no_dropout, false);
  Tensor<S> enc = model.encoder_forward(nullptr, x, enc_mask, no_dropout, false, nal_active).states;

  std::vector<int> dec_ids(static_cast<std::size_t>(Lt));
  dec_ids[0] = Vocabulary::kBos;
  std::copy(out_ids.begin(), out_ids.end(), dec_ids.begin() + 1);
  const std::vector<long long> dec_lens = {static_cast<long long>(Lt)};
  const Mat<S> self_mask = causal_pad_mask<S>(dec_lens, 1, Lt);
  const Mat<S> cross_mask = pad_key_mask<S>(src_lens, 1, Lt, Ls);
  Tensor<S> y = model.embed(nullptr, dec_ids, 1, Lt, Side::Decoder, no_dropout, false);
  Tensor<S> logits =
      model.decoder_forward(nullptr, y, enc, self_mask, cross_mask, no_dropout, false, nal_active)
          .logits;

  double logp = 0.0;
  for (Index t = 0; t < Lt; ++t) {
    const int label = t + 1 < Lt ? out_ids[static_cast<std::size_t>(t)] : Vocabulary::kEos;
    const auto row = logits.value().row(t);
    const double mx = static_cast<double>(row.maxCoeff());
    double z = 0.0;
    for (Index v = 0; v < mc.v_tgt; ++v) z += std::exp(static_cast<double>(row(v)) - mx);
    logp += static_cast<double>(row(label)) - (mx + std::log(z));
  }
  return logp / length_penalty(static_cast<int>(out_ids.size()) + 1, alpha);
}

template <class S>
std::vector<std::vector<int>> decode_corpus(TransformerModel<S>& model,
                                            const std::vector<std::vector<int>>& srcs,
                                            const DecodeConfig& cfg, bool nal_active,
                                            std::ostream* warn = nullptr,
                                            const std::vector<PerturbationPlan<S>>* plans = nullptr) {
  if (plans && plans->size() != srcs.size())
    throw std::invalid_argument("decode_corpus: plan/source count mismatch");
  std::vector<std::vector<int>> out;
  out.reserve(srcs.size());
  for (std::size_t i = 0; i < srcs.size(); ++i)
    out.push_back(decode(model, srcs[i], cfg, nal_active, warn, plans ? &(*plans)[i] : nullptr));
  return out;
}

}  // namespace cer
