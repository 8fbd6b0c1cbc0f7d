#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "cer/gradcheck.hpp"
#include "cer/training.hpp"

namespace cer {

// Verification twin of the CER training objective. The production loss blocks
// gradients into the clean reconstruction targets, so central differences on
// it would wrongly move the targets too. This helper snapshots the clean
// contexts at the current parameters and rebuilds the objective with those
// snapshots as constants: same value and same gradient at this point, but a
// plain differentiable function of the parameters. The pipeline is assembled
// independently from compute_losses on purpose; `reference_total` ties the
// two together.
template <class S>
struct ObjectiveCheck {
  std::function<Tensor<S>(Tape<S>*)> builder;
  S reference_total = S(0);
};

template <class S>
ObjectiveCheck<S> make_objective_check(TransformerModel<S>& model, const ParallelBatch& batch,
                                       const TrainSettings& st, std::uint64_t rng_seed) {
  const ModelConfig& cfg = model.config();
  if (st.variant == Variant::CERCon || st.variant == Variant::CERD)
    throw std::invalid_argument(
        "make_objective_check covers the reconstruction objective only (baseline/cer)");
  ObjectiveCheck<S> check;
  std::vector<Mat<S>> frozen_x, frozen_y;
  {
    TrainRngs rngs = TrainRngs::make(rng_seed);
    StepLosses<S> parts = compute_losses<S>(nullptr, model, batch, st, rngs);
    check.reference_total = parts.total.item();
    for (const auto& c : parts.enc_clean) frozen_x.push_back(c.value());
    for (const auto& c : parts.dec_clean) frozen_y.push_back(c.value());
  }

  check.builder = [&model, batch, st, rng_seed, cfg, frozen_x = std::move(frozen_x),
                   frozen_y = std::move(frozen_y)](Tape<S>* tp) -> Tensor<S> {
    TrainRngs rngs = TrainRngs::make(rng_seed);
    const Index B = batch.batch, Ls = batch.src_len, Ld = batch.tgt_len - 1;
    std::vector<int> dec_ids(static_cast<std::size_t>(B * Ld));
    std::vector<int> labels(static_cast<std::size_t>(B * Ld));
    std::vector<S> label_w(static_cast<std::size_t>(B * Ld), S(0));
    std::vector<S> w_src(static_cast<std::size_t>(B * Ls), S(0));
    std::vector<long long> dec_lens(static_cast<std::size_t>(B));
    for (Index i = 0; i < B; ++i) {
      for (long long t = 0; t < batch.src_lens[static_cast<std::size_t>(i)]; ++t)
        w_src[static_cast<std::size_t>(i * Ls + t)] = S(1);
      dec_lens[static_cast<std::size_t>(i)] = batch.tgt_lens[static_cast<std::size_t>(i)] - 1;
      for (Index t = 0; t < Ld; ++t) {
        dec_ids[static_cast<std::size_t>(i * Ld + t)] = batch.tgt_at(i, t);
        labels[static_cast<std::size_t>(i * Ld + t)] = batch.tgt_at(i, t + 1);
        if (t < dec_lens[static_cast<std::size_t>(i)])
          label_w[static_cast<std::size_t>(i * Ld + t)] = S(1);
      }
    }
    const Mat<S> enc_mask = pad_key_mask<S>(batch.src_lens, B, Ls, Ls);
    const Mat<S> self_mask = causal_pad_mask<S>(dec_lens, B, Ld);
    const Mat<S> cross_mask = pad_key_mask<S>(batch.src_lens, B, Ld, Ls);

    Tensor<S> x = model.embed(tp, batch.src, B, Ls, Side::Encoder, rngs.dropout, true);
    auto enc = model.encoder_forward(tp, x, enc_mask, rngs.dropout, true);
    Tensor<S> y = model.embed(tp, dec_ids, B, Ld, Side::Decoder, rngs.dropout, true);
    auto dec = model.decoder_forward(tp, y, enc.states, self_mask, cross_mask, rngs.dropout, true);
    Tensor<S> total = cross_entropy(tp, dec.logits, labels, label_w, S(cfg.label_smoothing));

    if (st.variant != Variant::Baseline && cfg.lambda_x != 0.0) {
      PerturbationSpec spec{st.noise.src_strategy, st.noise.sigma_x, st.noise.m,
                            st.noise.gaussian_std};
      auto plan = apply_strategy<S>(batch.src, spec, model.src_embedding().value(), cfg.v_src,
                                    cfg.m_madeup, rngs.src_noise, nullptr);
      Tensor<S> xn = model.embed(tp, batch.src, B, Ls, Side::Encoder, plan, rngs.dropout, true);
      auto encn = model.encoder_forward(tp, xn, enc_mask, rngs.dropout, true);
      Tensor<S> lx;
      for (std::size_t l = 0; l < encn.contexts.size(); ++l) {
        Tensor<S> target = Tensor<S>::from_matrix(frozen_x[l], encn.contexts[l].shape());
        Tensor<S> rec = model.nal_apply(tp, encn.contexts[l], Side::Encoder, static_cast<int>(l));
        Tensor<S> term = weighted_sq_dist(tp, target, rec, w_src);
        lx = lx.defined() ? add(tp, lx, term) : term;
      }
      total = add(tp, total, scale(tp, lx, S(cfg.lambda_x)));
    }

    if (st.variant != Variant::Baseline && cfg.lambda_y != 0.0) {
      PerturbationSpec spec{st.noise.tgt_strategy, st.noise.sigma_y, st.noise.m,
                            st.noise.gaussian_std};
      auto plan = apply_strategy<S>(dec_ids, spec, model.tgt_embedding().value(), cfg.v_tgt, 0,
                                    rngs.tgt_noise, nullptr);
      Tensor<S> yn = model.embed(tp, dec_ids, B, Ld, Side::Decoder, plan, rngs.dropout, true);
      auto decn = model.decoder_forward(tp, yn, enc.states, self_mask, cross_mask, rngs.dropout,
                                        true);
      Tensor<S> ly;
      for (std::size_t l = 0; l < decn.contexts.size(); ++l) {
        Tensor<S> target = Tensor<S>::from_matrix(frozen_y[l], decn.contexts[l].shape());
        Tensor<S> rec = model.nal_apply(tp, decn.contexts[l], Side::Decoder, static_cast<int>(l));
        Tensor<S> term = weighted_sq_dist(tp, target, rec, label_w);
        ly = ly.defined() ? add(tp, ly, term) : term;
      }
      total = add(tp, total, scale(tp, ly, S(cfg.lambda_y)));
    }
    return total;
  };
  return check;
}

}  // namespace cer
