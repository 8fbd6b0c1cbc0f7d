#pragma once

#include <cmath>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cer/corpus.hpp"
#include "cer/model.hpp"
#include "cer/optimizer.hpp"
#include "cer/perturb.hpp"

namespace cer {

enum class Variant { Baseline, CER, CERInactive, CERCon, CERD };

inline std::string variant_to_string(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::CER: return "cer";
    case Variant::CERInactive: return "cer-inactive";
    case Variant::CERCon: return "cer-con";
    case Variant::CERD: return "cer-d";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "baseline") return Variant::Baseline;
  if (s == "cer") return Variant::CER;
  if (s == "cer-inactive") return Variant::CERInactive;
  if (s == "cer-con") return Variant::CERCon;
  if (s == "cer-d") return Variant::CERD;
  throw std::invalid_argument("unknown variant '" + s +
                              "' (options: baseline, cer, cer-inactive, cer-con, cer-d)");
}

// Adjusts the parts of a model config that a variant dictates. The baseline
// drops the reconstruction terms entirely; CER-con and CER-D replace the NAL
// with a constraint / discriminator, so the model carries no NAL parameters.
inline void apply_variant(ModelConfig& cfg, Variant v) {
  switch (v) {
    case Variant::Baseline:
      cfg.include_nal = false;
      cfg.nal_active_at_test = false;
      cfg.lambda_x = 0.0;
      cfg.lambda_y = 0.0;
      break;
    case Variant::CER:
      cfg.include_nal = true;
      cfg.nal_active_at_test = true;
      break;
    case Variant::CERInactive:
      cfg.include_nal = true;
      cfg.nal_active_at_test = false;
      break;
    case Variant::CERCon:
    case Variant::CERD:
      cfg.include_nal = false;
      cfg.nal_active_at_test = false;
      break;
  }
}

struct NoiseSettings {
  Strategy src_strategy = Strategy::Madeup;
  Strategy tgt_strategy = Strategy::Semantics;
  double sigma_x = 0.1;
  double sigma_y = 0.1;
  int m = 3;
  double gaussian_std = 0.01;
};

struct TrainSettings {
  Variant variant = Variant::CER;
  long long steps = 100;
  long long batch_tokens = 1024;
  long long warmup_steps = 4000;
  double peak_lr_scale = 1.0;  // multiplies d_model^-0.5
  std::uint64_t seed = 1;
  Index disc_width = 256;
  NoiseSettings noise;
};

// Independent seed-derived streams so that e.g. disabling source noise does
// not shift the dropout masks of an otherwise identical run.
struct TrainRngs {
  Rng src_noise;
  Rng tgt_noise;
  Rng dropout;
  Rng disc;

  static TrainRngs make(std::uint64_t seed) {
    return TrainRngs{Rng(derive_seed(seed, "src")), Rng(derive_seed(seed, "tgt")),
                     Rng(derive_seed(seed, "drop")), Rng(derive_seed(seed, "disc"))};
  }
};

template <class S>
struct LossBreakdown {
  S l_nmt = S(0);
  S l_nal_x = S(0);
  S l_nal_y = S(0);
  S total = S(0);
  long long tokens = 0;  // label tokens behind the normalizations
};

// Reconstruction loss of one side: squared L2 between the gradient-blocked
// clean context and the NAL image of the noisy context, summed over layers,
// averaged over non-pad tokens.
template <class S>
Tensor<S> nal_loss(Tape<S>* tp, TransformerModel<S>& model, Side side,
                   const std::vector<Tensor<S>>& clean, const std::vector<Tensor<S>>& noisy,
                   const std::vector<S>& token_weights) {
  if (clean.size() != noisy.size())
    throw std::invalid_argument("nal_loss: clean/noisy context counts differ");
  Tensor<S> total;
  for (std::size_t l = 0; l < clean.size(); ++l) {
    Tensor<S> rec = model.nal_apply(tp, noisy[l], side, static_cast<int>(l));
    Tensor<S> term = weighted_sq_dist(tp, detach(clean[l]), rec, token_weights);
    total = total.defined() ? add(tp, total, term) : term;
  }
  return total;
}

// The CER-con form: same distance, no NAL, and gradient flows into both the
// clean and the noisy path.
template <class S>
Tensor<S> con_loss(Tape<S>* tp, const std::vector<Tensor<S>>& clean,
                   const std::vector<Tensor<S>>& noisy, const std::vector<S>& token_weights) {
  if (clean.size() != noisy.size())
    throw std::invalid_argument("con_loss: clean/noisy context counts differ");
  Tensor<S> total;
  for (std::size_t l = 0; l < clean.size(); ++l) {
    Tensor<S> term = weighted_sq_dist(tp, clean[l], noisy[l], token_weights);
    total = total.defined() ? add(tp, total, term) : term;
  }
  return total;
}

// Per-token clean/noisy classifier used by the CER-D variant.
template <class S>
class Discriminator {
 public:
  Discriminator(Index d_model, Index width, Rng& rng)
      : w1_(xavier(d_model, width, rng)),
        b1_(Tensor<S>::zeros({1, width}, true)),
        w2_(xavier(width, 1, rng)),
        b2_(Tensor<S>::zeros({1, 1}, true)) {}

  Tensor<S> score_logits(Tape<S>* tp, Tensor<S> contexts) {
    Tensor<S> h = relu(tp, add_bias(tp, matmul(tp, contexts, w1_), b1_));
    return add_bias(tp, matmul(tp, h, w2_), b2_);
  }

  std::vector<Tensor<S>> params() const { return {w1_, b1_, w2_, b2_}; }

 private:
  static Tensor<S> xavier(Index in, Index out, Rng& rng) {
    const S limit = std::sqrt(S(6) / S(in + out));
    Mat<S> w(in, out);
    for (Index r = 0; r < in; ++r)
      for (Index c = 0; c < out; ++c) w(r, c) = S(rng.uniform(-limit, limit));
    return Tensor<S>::from_matrix(w, true);
  }

  Tensor<S> w1_, b1_, w2_, b2_;
};

// Discriminator update objective: clean contexts labeled 1, noisy labeled 0,
// per-layer mean BCE averaged over the two classes and summed over layers.
template <class S>
Tensor<S> disc_classification_loss(Tape<S>* tp, Discriminator<S>& disc,
                                   const std::vector<Tensor<S>>& clean,
                                   const std::vector<Tensor<S>>& noisy,
                                   const std::vector<S>& token_weights) {
  if (clean.size() != noisy.size())
    throw std::invalid_argument("disc_classification_loss: context counts differ");
  const std::vector<S> ones(token_weights.size(), S(1));
  const std::vector<S> zeros(token_weights.size(), S(0));
  Tensor<S> total;
  for (std::size_t l = 0; l < clean.size(); ++l) {
    Tensor<S> on_clean = bce_logits(tp, disc.score_logits(tp, clean[l]), ones, token_weights);
    Tensor<S> on_noisy = bce_logits(tp, disc.score_logits(tp, noisy[l]), zeros, token_weights);
    Tensor<S> term = scale(tp, add(tp, on_clean, on_noisy), S(0.5));
    total = total.defined() ? add(tp, total, term) : term;
  }
  return total;
}

// Generator-side adversarial loss: make noisy contexts look clean to the
// discriminator (non-saturating form, -log D on noisy only).
template <class S>
Tensor<S> adversarial_gen_loss(Tape<S>* tp, Discriminator<S>& disc,
                               const std::vector<Tensor<S>>& noisy,
                               const std::vector<S>& token_weights) {
  const std::vector<S> ones(token_weights.size(), S(1));
  Tensor<S> total;
  for (std::size_t l = 0; l < noisy.size(); ++l) {
    Tensor<S> term = bce_logits(tp, disc.score_logits(tp, noisy[l]), ones, token_weights);
    total = total.defined() ? add(tp, total, term) : term;
  }
  return total;
}

template <class S>
struct StepLosses {
  Tensor<S> l_nmt, l_nal_x, l_nal_y, total;  // taped scalars; side terms may be undefined
  long long label_tokens = 0;
  std::vector<Tensor<S>> enc_clean, enc_noisy, dec_clean, dec_noisy;
  std::vector<S> w_src, w_dec;
};

// Builds the full training objective on one batch: clean twin forward for the
// translation loss, then (depending on variant and weights) a noisy encoder
// forward and a noisy decoder forward attending to the CLEAN encoder states.
// Forward order is fixed so RNG streams stay aligned across runs.
template <class S>
StepLosses<S> compute_losses(Tape<S>* tp, TransformerModel<S>& model, const ParallelBatch& batch,
                             const TrainSettings& st, TrainRngs& rngs,
                             Discriminator<S>* disc_x = nullptr, Discriminator<S>* disc_y = nullptr,
                             std::ostream* warn = nullptr) {
  const ModelConfig& cfg = model.config();
  const Index B = batch.batch, Ls = batch.src_len, Lt = batch.tgt_len;
  if (Lt < 2) throw std::invalid_argument("compute_losses: target side needs at least two tokens");
  const Index Ld = Lt - 1;

  StepLosses<S> out;
  std::vector<int> dec_ids(static_cast<std::size_t>(B * Ld));
  std::vector<int> labels(static_cast<std::size_t>(B * Ld));
  std::vector<S> label_w(static_cast<std::size_t>(B * Ld), S(0));
  out.w_src.assign(static_cast<std::size_t>(B * Ls), S(0));
  out.w_dec.assign(static_cast<std::size_t>(B * Ld), S(0));
  std::vector<long long> dec_lens(static_cast<std::size_t>(B));
  for (Index i = 0; i < B; ++i) {
    for (long long t = 0; t < batch.src_lens[static_cast<std::size_t>(i)]; ++t)
      out.w_src[static_cast<std::size_t>(i * Ls + t)] = S(1);
    dec_lens[static_cast<std::size_t>(i)] = batch.tgt_lens[static_cast<std::size_t>(i)] - 1;
    for (Index t = 0; t < Ld; ++t) {
      dec_ids[static_cast<std::size_t>(i * Ld + t)] = batch.tgt_at(i, t);
      labels[static_cast<std::size_t>(i * Ld + t)] = batch.tgt_at(i, t + 1);
      if (t < dec_lens[static_cast<std::size_t>(i)]) {
        label_w[static_cast<std::size_t>(i * Ld + t)] = S(1);
        out.w_dec[static_cast<std::size_t>(i * Ld + t)] = S(1);
        ++out.label_tokens;
      }
    }
  }

  const Mat<S> enc_mask = pad_key_mask<S>(batch.src_lens, B, Ls, Ls);
  const Mat<S> self_mask = causal_pad_mask<S>(dec_lens, B, Ld);
  const Mat<S> cross_mask = pad_key_mask<S>(batch.src_lens, B, Ld, Ls);

  Tensor<S> x = model.embed(tp, batch.src, B, Ls, Side::Encoder, rngs.dropout, true);
  auto enc = model.encoder_forward(tp, x, enc_mask, rngs.dropout, true);
  Tensor<S> y = model.embed(tp, dec_ids, B, Ld, Side::Decoder, rngs.dropout, true);
  auto dec = model.decoder_forward(tp, y, enc.states, self_mask, cross_mask, rngs.dropout, true);
  out.l_nmt = cross_entropy(tp, dec.logits, labels, label_w, S(cfg.label_smoothing));
  out.enc_clean = enc.contexts;
  out.dec_clean = dec.contexts;
  out.total = out.l_nmt;

  const bool run_x = st.variant != Variant::Baseline && cfg.lambda_x != 0.0;
  const bool run_y = st.variant != Variant::Baseline && cfg.lambda_y != 0.0;

  if (run_x) {
    PerturbationSpec spec{st.noise.src_strategy, st.noise.sigma_x, st.noise.m,
                          st.noise.gaussian_std};
    PerturbationPlan<S> plan = apply_strategy<S>(batch.src, spec, model.src_embedding().value(),
                                                 cfg.v_src, cfg.m_madeup, rngs.src_noise, warn);
    Tensor<S> xn = model.embed(tp, batch.src, B, Ls, Side::Encoder, plan, rngs.dropout, true);
    auto encn = model.encoder_forward(tp, xn, enc_mask, rngs.dropout, true);
    out.enc_noisy = encn.contexts;
    switch (st.variant) {
      case Variant::CERCon:
        out.l_nal_x = con_loss(tp, out.enc_clean, out.enc_noisy, out.w_src);
        break;
      case Variant::CERD:
        out.l_nal_x = adversarial_gen_loss(tp, *disc_x, out.enc_noisy, out.w_src);
        break;
      default:
        out.l_nal_x = nal_loss(tp, model, Side::Encoder, out.enc_clean, out.enc_noisy, out.w_src);
    }
    out.total = add(tp, out.total, scale(tp, out.l_nal_x, S(cfg.lambda_x)));
  }

  if (run_y) {
    PerturbationSpec spec{st.noise.tgt_strategy, st.noise.sigma_y, st.noise.m,
                          st.noise.gaussian_std};
    PerturbationPlan<S> plan = apply_strategy<S>(dec_ids, spec, model.tgt_embedding().value(),
                                                 cfg.v_tgt, 0, rngs.tgt_noise, warn);
    Tensor<S> yn = model.embed(tp, dec_ids, B, Ld, Side::Decoder, plan, rngs.dropout, true);
    auto decn =
        model.decoder_forward(tp, yn, enc.states, self_mask, cross_mask, rngs.dropout, true);
    out.dec_noisy = decn.contexts;
    switch (st.variant) {
      case Variant::CERCon:
        out.l_nal_y = con_loss(tp, out.dec_clean, out.dec_noisy, out.w_dec);
        break;
      case Variant::CERD:
        out.l_nal_y = adversarial_gen_loss(tp, *disc_y, out.dec_noisy, out.w_dec);
        break;
      default:
        out.l_nal_y = nal_loss(tp, model, Side::Decoder, out.dec_clean, out.dec_noisy, out.w_dec);
    }
    out.total = add(tp, out.total, scale(tp, out.l_nal_y, S(cfg.lambda_y)));
  }
  return out;
}

template <class S>
class Trainer {
 public:
  Trainer(TransformerModel<S>& model, const TrainSettings& settings)
      : model_(model),
        st_(settings),
        rngs_(TrainRngs::make(settings.seed)),
        opt_(collect_params(model)),
        schedule_{settings.peak_lr_scale / std::sqrt(static_cast<double>(model.config().d_model)),
                  settings.warmup_steps} {
    const ModelConfig& cfg = model.config();
    const bool wants_nal = st_.variant == Variant::CER || st_.variant == Variant::CERInactive;
    if (wants_nal && !cfg.include_nal && (cfg.lambda_x != 0.0 || cfg.lambda_y != 0.0))
      throw std::invalid_argument("variant '" + variant_to_string(st_.variant) +
                                  "' needs a model built with NAL parameters");
    if (st_.variant == Variant::CERD) {
      disc_x_.emplace(cfg.d_model, st_.disc_width, rngs_.disc);
      disc_y_.emplace(cfg.d_model, st_.disc_width, rngs_.disc);
      dopt_x_.emplace(disc_x_->params());
      dopt_y_.emplace(disc_y_->params());
    }
  }

  long long steps_done() const { return step_; }
  double lr_at(long long step) const { return schedule_.lr(step); }
  TrainRngs& rngs() { return rngs_; }
  Discriminator<S>* disc_x() { return disc_x_ ? &*disc_x_ : nullptr; }
  Discriminator<S>* disc_y() { return disc_y_ ? &*disc_y_ : nullptr; }

  LossBreakdown<S> step(const ParallelBatch& batch, std::ostream* warn = nullptr) {
    Tape<S> tape;
    StepLosses<S> parts = compute_losses(&tape, model_, batch, st_, rngs_,
                                         disc_x_ ? &*disc_x_ : nullptr,
                                         disc_y_ ? &*disc_y_ : nullptr, warn);
    LossBreakdown<S> b;
    b.l_nmt = parts.l_nmt.item();
    b.l_nal_x = parts.l_nal_x.defined() ? parts.l_nal_x.item() : S(0);
    b.l_nal_y = parts.l_nal_y.defined() ? parts.l_nal_y.item() : S(0);
    b.total = parts.total.item();
    b.tokens = parts.label_tokens;
    if (!std::isfinite(static_cast<double>(b.total)))
      throw std::runtime_error("training diverged at step " + std::to_string(step_ + 1) +
                               ": l_nmt=" + std::to_string(static_cast<double>(b.l_nmt)) +
                               " l_nal_x=" + std::to_string(static_cast<double>(b.l_nal_x)) +
                               " l_nal_y=" + std::to_string(static_cast<double>(b.l_nal_y)));

    opt_.zero_grad();
    if (dopt_x_) dopt_x_->zero_grad();
    if (dopt_y_) dopt_y_->zero_grad();
    tape.backward(parts.total);
    ++step_;
    const S lr = S(schedule_.lr(step_));
    opt_.step(lr);
    if (st_.variant == Variant::CERD) {
      if (!parts.enc_noisy.empty())
        discriminator_update(*disc_x_, *dopt_x_, parts.enc_clean, parts.enc_noisy, parts.w_src, lr);
      if (!parts.dec_noisy.empty())
        discriminator_update(*disc_y_, *dopt_y_, parts.dec_clean, parts.dec_noisy, parts.w_dec, lr);
    }
    return b;
  }

  // One discriminator step on gradient-blocked contexts; the translation
  // model's parameters cannot move here.
  static void discriminator_update(Discriminator<S>& disc, AdamOptimizer<S>& opt,
                                   const std::vector<Tensor<S>>& clean,
                                   const std::vector<Tensor<S>>& noisy,
                                   const std::vector<S>& token_weights, S lr) {
    std::vector<Tensor<S>> clean_det, noisy_det;
    clean_det.reserve(clean.size());
    noisy_det.reserve(noisy.size());
    for (const auto& c : clean) clean_det.push_back(detach(c));
    for (const auto& n : noisy) noisy_det.push_back(detach(n));
    Tape<S> tape;
    Tensor<S> loss = disc_classification_loss(&tape, disc, clean_det, noisy_det, token_weights);
    opt.zero_grad();
    tape.backward(loss);
    opt.step(lr);
  }

 private:
  static std::vector<Tensor<S>> collect_params(TransformerModel<S>& model) {
    std::vector<Tensor<S>> out;
    for (auto& [name, t] : model.named_params()) out.push_back(t);
    return out;
  }

  TransformerModel<S>& model_;
  TrainSettings st_;
  TrainRngs rngs_;
  AdamOptimizer<S> opt_;
  InverseSqrtSchedule schedule_;
  std::optional<Discriminator<S>> disc_x_, disc_y_;
  std::optional<AdamOptimizer<S>> dopt_x_, dopt_y_;
  long long step_ = 0;
};

template <class S>
void check_vocab_bounds(const ModelConfig& cfg, const std::vector<EncodedPair>& pairs) {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (int id : pairs[i].src)
      if (id < 0 || id >= cfg.v_src)
        throw std::invalid_argument("vocabulary mismatch: source id " + std::to_string(id) +
                                    " in pair " + std::to_string(i + 1) + " is outside the model's " +
                                    std::to_string(cfg.v_src) + "-entry source vocabulary");
    for (int id : pairs[i].tgt)
      if (id < 0 || id >= cfg.v_tgt)
        throw std::invalid_argument("vocabulary mismatch: target id " + std::to_string(id) +
                                    " in pair " + std::to_string(i + 1) + " is outside the model's " +
                                    std::to_string(cfg.v_tgt) + "-entry target vocabulary");
  }
}

// Runs `settings.steps` optimizer steps over seeded, re-bucketed epochs and
// returns the per-step loss history. If `log` is given, one JSON object per
// step is written: {step, l_nmt, l_nal_x, l_nal_y, total, lr, tokens}.
template <class S>
std::vector<LossBreakdown<S>> run_training(TransformerModel<S>& model,
                                           const std::vector<EncodedPair>& pairs,
                                           const TrainSettings& settings,
                                           std::ostream* log = nullptr,
                                           std::ostream* warn = nullptr) {
  if (pairs.empty()) throw std::invalid_argument("run_training: no training pairs");
  check_vocab_bounds<S>(model.config(), pairs);
  Trainer<S> trainer(model, settings);
  std::vector<LossBreakdown<S>> history;
  history.reserve(static_cast<std::size_t>(settings.steps > 0 ? settings.steps : 0));
  std::uint64_t epoch = 0;
  while (trainer.steps_done() < settings.steps) {
    const std::uint64_t epoch_seed = derive_seed(settings.seed, "batch") + epoch;
    for (ParallelBatch& batch : make_batches(pairs, settings.batch_tokens, epoch_seed)) {
      if (trainer.steps_done() >= settings.steps) break;
      LossBreakdown<S> b = trainer.step(batch, warn);
      if (log) {
        nlohmann::json j;
        j["step"] = trainer.steps_done();
        j["l_nmt"] = static_cast<double>(b.l_nmt);
        j["l_nal_x"] = static_cast<double>(b.l_nal_x);
        j["l_nal_y"] = static_cast<double>(b.l_nal_y);
        j["total"] = static_cast<double>(b.total);
        j["lr"] = trainer.lr_at(trainer.steps_done());
        j["tokens"] = b.tokens;
        (*log) << j.dump() << '\n';
      }
      history.push_back(b);
    }
    ++epoch;
  }
  return history;
}

// Fine-tuning is a fresh training run on the loaded model: new optimizer
// state, restarted warmup, typically a lower peak learning rate.
template <class S>
std::vector<LossBreakdown<S>> fine_tune(TransformerModel<S>& model,
                                        const std::vector<EncodedPair>& pairs,
                                        const TrainSettings& settings,
                                        std::ostream* log = nullptr,
                                        std::ostream* warn = nullptr) {
  return run_training(model, pairs, settings, log, warn);
}

}  // namespace cer
