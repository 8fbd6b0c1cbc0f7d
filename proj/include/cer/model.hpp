#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cer/corpus.hpp"
#include "cer/ops.hpp"
#include "cer/perturb.hpp"
#include "cer/rng.hpp"
#include "cer/tensor.hpp"

namespace cer {

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 256;
  int d_ff_nal = -1;  // -1 means d_ff
  int n_layers = 2;
  double dropout = 0.4;
  double label_smoothing = 0.1;
  int v_src = 0;  // real source ids including specials
  int m_madeup = 10000;
  int v_tgt = 0;
  double lambda_x = 1.0;
  double lambda_y = 1.0;
  bool cer_encoder = true;
  bool cer_decoder = true;
  bool nal_active_at_test = true;
  bool include_nal = true;

  int nal_width() const { return d_ff_nal < 0 ? d_ff : d_ff_nal; }

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw std::invalid_argument("config: d_model must be a positive multiple of n_heads");
    if (d_ff < 1 || nal_width() < 1) throw std::invalid_argument("config: feed-forward widths must be positive");
    if (n_layers < 1) throw std::invalid_argument("config: n_layers must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("config: dropout must be in [0,1)");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw std::invalid_argument("config: label_smoothing must be in [0,1)");
    if (v_src <= Vocabulary::kSpecialCount || v_tgt <= Vocabulary::kSpecialCount)
      throw std::invalid_argument("config: vocabulary sizes must exceed the specials");
    if (m_madeup < 0) throw std::invalid_argument("config: made-up count must be >= 0");
    if (lambda_x < 0.0 || lambda_y < 0.0) throw std::invalid_argument("config: lambdas must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"d_model", d_model},
            {"n_heads", n_heads},
            {"d_ff", d_ff},
            {"d_ff_nal", d_ff_nal},
            {"n_layers", n_layers},
            {"dropout", dropout},
            {"label_smoothing", label_smoothing},
            {"v_src", v_src},
            {"m_madeup", m_madeup},
            {"v_tgt", v_tgt},
            {"lambda_x", lambda_x},
            {"lambda_y", lambda_y},
            {"cer_encoder", cer_encoder},
            {"cer_decoder", cer_decoder},
            {"nal_active_at_test", nal_active_at_test},
            {"include_nal", include_nal}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.d_ff_nal = j.value("d_ff_nal", c.d_ff_nal);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.dropout = j.value("dropout", c.dropout);
    c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
    c.v_src = j.value("v_src", c.v_src);
    c.m_madeup = j.value("m_madeup", c.m_madeup);
    c.v_tgt = j.value("v_tgt", c.v_tgt);
    c.lambda_x = j.value("lambda_x", c.lambda_x);
    c.lambda_y = j.value("lambda_y", c.lambda_y);
    c.cer_encoder = j.value("cer_encoder", c.cer_encoder);
    c.cer_decoder = j.value("cer_decoder", c.cer_decoder);
    c.nal_active_at_test = j.value("nal_active_at_test", c.nal_active_at_test);
    c.include_nal = j.value("include_nal", c.include_nal);
    return c;
  }
};

// Sinusoidal position table, rows 0..len-1.
template <class S>
Mat<S> sinusoidal_positions(Index len, Index d_model) {
  Mat<S> p(len, d_model);
  for (Index pos = 0; pos < len; ++pos) {
    for (Index i = 0; i < d_model; ++i) {
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(d_model));
      p(pos, i) = S(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return p;
}

constexpr double kMaskValue = -1e9;

// Additive key masks, (B*Lq) x Lk with 0 on visible keys.
template <class S>
Mat<S> pad_key_mask(const std::vector<long long>& key_lens, Index batch, Index q_len, Index k_len) {
  Mat<S> m = Mat<S>::Zero(batch * q_len, k_len);
  for (Index b = 0; b < batch; ++b)
    for (Index k = key_lens[static_cast<std::size_t>(b)]; k < k_len; ++k)
      m.block(b * q_len, k, q_len, 1).setConstant(S(kMaskValue));
  return m;
}

template <class S>
Mat<S> causal_pad_mask(const std::vector<long long>& key_lens, Index batch, Index len) {
  Mat<S> m = pad_key_mask<S>(key_lens, batch, len, len);
  for (Index b = 0; b < batch; ++b)
    for (Index q = 0; q < len; ++q)
      for (Index k = q + 1; k < len; ++k) m(b * len + q, k) = S(kMaskValue);
  return m;
}

template <class S>
struct AttnParams {
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class S>
struct LnParams {
  Tensor<S> gain, bias;
};

template <class S>
struct FfnParams {
  Tensor<S> w1, b1, w2, b2;
};

// Single-layer feed-forward noise adaptation map (no residual, no norm).
template <class S>
struct NalParams {
  Tensor<S> w1, b1, w2, b2;
};

template <class S>
struct EncoderLayerParams {
  AttnParams<S> attn;
  LnParams<S> ln1;
  FfnParams<S> ffn;
  LnParams<S> ln2;
  NalParams<S> nal;
};

template <class S>
struct DecoderLayerParams {
  AttnParams<S> self_attn;
  LnParams<S> ln1;
  AttnParams<S> cross;
  LnParams<S> ln2;
  FfnParams<S> ffn;
  LnParams<S> ln3;
  NalParams<S> nal;
};

template <class S>
struct EncoderResult {
  Tensor<S> states;                  // (B, Ls, d_model)
  std::vector<Tensor<S>> contexts;   // N self-attention sublayer outputs
};

template <class S>
struct DecoderResult {
  Tensor<S> logits;                  // (B, Lt, v_tgt)
  std::vector<Tensor<S>> contexts;   // N self-attention sublayer outputs
};

enum class Side { Encoder, Decoder };

template <class S>
class TransformerModel {
 public:
  TransformerModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng params(derive_seed(seed, "params"));
    Rng nal(derive_seed(seed, "nal"));
    const Index d = cfg_.d_model, ff = cfg_.d_ff, nw = cfg_.nal_width();

    src_embed_ = uniform_init(params, cfg_.v_src + cfg_.m_madeup, d, 0.1);
    tgt_embed_ = uniform_init(params, cfg_.v_tgt, d, 0.1);
    out_w_ = xavier_init(params, d, cfg_.v_tgt);
    out_b_ = Tensor<S>::zeros({1, static_cast<Index>(cfg_.v_tgt)}, true);

    for (int l = 0; l < cfg_.n_layers; ++l) {
      EncoderLayerParams<S> e;
      e.attn = init_attn(params, d);
      e.ln1 = init_ln(d);
      e.ffn = init_ffn(params, d, ff);
      e.ln2 = init_ln(d);
      enc_.push_back(std::move(e));
    }
    for (int l = 0; l < cfg_.n_layers; ++l) {
      DecoderLayerParams<S> dl;
      dl.self_attn = init_attn(params, d);
      dl.ln1 = init_ln(d);
      dl.cross = init_attn(params, d);
      dl.ln2 = init_ln(d);
      dl.ffn = init_ffn(params, d, ff);
      dl.ln3 = init_ln(d);
      dec_.push_back(std::move(dl));
    }
    if (cfg_.include_nal) {
      for (int l = 0; l < cfg_.n_layers; ++l) enc_[static_cast<std::size_t>(l)].nal = init_nal(nal, d, nw);
      for (int l = 0; l < cfg_.n_layers; ++l) dec_[static_cast<std::size_t>(l)].nal = init_nal(nal, d, nw);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }

  Tensor<S> src_embedding() const { return src_embed_; }
  Tensor<S> tgt_embedding() const { return tgt_embed_; }

  // Fixed, documented order; NAL entries present only when configured in.
  std::vector<std::pair<std::string, Tensor<S>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("src_embed", src_embed_);
    out.emplace_back("tgt_embed", tgt_embed_);
    out.emplace_back("out.w", out_w_);
    out.emplace_back("out.b", out_b_);
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      const std::string p = "enc.l" + std::to_string(l) + ".";
      push_attn(out, p + "attn.", enc_[l].attn);
      push_ln(out, p + "ln1.", enc_[l].ln1);
      push_ffn(out, p + "ffn.", enc_[l].ffn);
      push_ln(out, p + "ln2.", enc_[l].ln2);
    }
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      const std::string p = "dec.l" + std::to_string(l) + ".";
      push_attn(out, p + "self.", dec_[l].self_attn);
      push_ln(out, p + "ln1.", dec_[l].ln1);
      push_attn(out, p + "cross.", dec_[l].cross);
      push_ln(out, p + "ln2.", dec_[l].ln2);
      push_ffn(out, p + "ffn.", dec_[l].ffn);
      push_ln(out, p + "ln3.", dec_[l].ln3);
    }
    if (cfg_.include_nal) {
      for (std::size_t l = 0; l < enc_.size(); ++l)
        push_ffn_named(out, "enc.l" + std::to_string(l) + ".nal.", enc_[l].nal);
      for (std::size_t l = 0; l < dec_.size(); ++l)
        push_ffn_named(out, "dec.l" + std::to_string(l) + ".nal.", dec_[l].nal);
    }
    return out;
  }

  // Position rows, grown on demand (the table carries no parameters).
  const Mat<S>& positions(Index len) {
    if (pos_.rows() < len) pos_ = sinusoidal_positions<S>(len, cfg_.d_model);
    return pos_;
  }

  // Lookup x sqrt(d) + positions + dropout, with the perturbation plan's
  // overrides applied to the raw lookup rows (before scaling).
  Tensor<S> embed(Tape<S>* tp, const std::vector<int>& ids, Index batch, Index len, Side side,
                  const PerturbationPlan<S>& plan, Rng& drop_rng, bool train) {
    Tensor<S> table = side == Side::Encoder ? src_embed_ : tgt_embed_;
    const Index d = cfg_.d_model;

    const std::vector<int>* effective = &ids;
    std::vector<int> replaced;
    if (plan.kind == OverrideKind::ReplaceId && !plan.empty()) {
      replaced = ids;
      for (std::size_t i = 0; i < plan.positions.size(); ++i)
        replaced[static_cast<std::size_t>(plan.positions[i])] = plan.ids_after[i];
      effective = &replaced;
    }

    Tensor<S> x = gather_rows(tp, table, *effective, Shape{batch, len, d});
    if (plan.kind == OverrideKind::Constant && !plan.empty()) {
      x = scatter_replace_rows(tp, x, plan.positions, Tensor<S>::from_matrix(plan.constants));
    } else if (plan.kind == OverrideKind::TableMean && !plan.empty()) {
      Tensor<S> neighbor_rows = gather_rows(tp, table, plan.mean_ids);
      Tensor<S> means = group_mean_rows(tp, neighbor_rows, plan.m);
      x = scatter_replace_rows(tp, x, plan.positions, means);
    }
    x = scale(tp, x, S(std::sqrt(static_cast<double>(d))));
    x = add_positions(tp, x, positions(len));
    return dropout(tp, x, cfg_.dropout, drop_rng, train);
  }

  Tensor<S> embed(Tape<S>* tp, const std::vector<int>& ids, Index batch, Index len, Side side,
                  Rng& drop_rng, bool train) {
    return embed(tp, ids, batch, len, side, PerturbationPlan<S>{}, drop_rng, train);
  }

  Tensor<S> attention(Tape<S>* tp, const AttnParams<S>& p, Tensor<S> q_in, Tensor<S> kv_in,
                      const Mat<S>& mask, Rng& drop_rng, bool train,
                      std::vector<Tensor<S>>* attn_probe = nullptr) {
    const Index h = cfg_.n_heads;
    Tensor<S> q = split_heads(tp, add_bias(tp, matmul(tp, q_in, p.wq), p.bq), h);
    Tensor<S> k = split_heads(tp, add_bias(tp, matmul(tp, kv_in, p.wk), p.bk), h);
    Tensor<S> v = split_heads(tp, add_bias(tp, matmul(tp, kv_in, p.wv), p.bv), h);
    Tensor<S> scores = scale(tp, bmm(tp, q, k, true),
                             S(1.0 / std::sqrt(static_cast<double>(cfg_.d_model / cfg_.n_heads))));
    scores = add_attention_mask(tp, scores, mask, h);
    Tensor<S> probs = softmax_rows(tp, scores);
    if (attn_probe) attn_probe->push_back(probs);
    probs = dropout(tp, probs, cfg_.dropout, drop_rng, train);
    Tensor<S> ctx = merge_heads(tp, bmm(tp, probs, v));
    return add_bias(tp, matmul(tp, ctx, p.wo), p.bo);
  }

  Tensor<S> ffn_apply(Tape<S>* tp, const FfnParams<S>& p, Tensor<S> x) {
    Tensor<S> h = relu(tp, add_bias(tp, matmul(tp, x, p.w1), p.b1));
    return add_bias(tp, matmul(tp, h, p.w2), p.b2);
  }

  Tensor<S> nal_apply(Tape<S>* tp, Tensor<S> c, Side side, int layer) {
    if (!cfg_.include_nal) throw std::logic_error("nal_apply: model built without NAL");
    const NalParams<S>& p = side == Side::Encoder ? enc_[static_cast<std::size_t>(layer)].nal
                                                  : dec_[static_cast<std::size_t>(layer)].nal;
    Tensor<S> h = relu(tp, add_bias(tp, matmul(tp, c, p.w1), p.b1));
    return add_bias(tp, matmul(tp, h, p.w2), p.b2);
  }

  // Post-norm encoder. The self-attention sublayer output c_l is recorded per
  // layer; at train time it feeds the FFN sublayer directly (NAL stays off
  // the forward path), while an inference pass with the NAL active routes
  // NAL(c_l) into the FFN sublayer instead.
  EncoderResult<S> encoder_forward(Tape<S>* tp, Tensor<S> x, const Mat<S>& self_mask,
                                   Rng& drop_rng, bool train, bool nal_active = false,
                                   std::vector<Tensor<S>>* attn_probe = nullptr) {
    const bool use_nal = !train && nal_active && cfg_.cer_encoder && cfg_.include_nal;
    EncoderResult<S> r;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      EncoderLayerParams<S>& p = enc_[static_cast<std::size_t>(l)];
      Tensor<S> a = attention(tp, p.attn, x, x, self_mask, drop_rng, train, attn_probe);
      Tensor<S> c = layer_norm(tp, add(tp, x, dropout(tp, a, cfg_.dropout, drop_rng, train)),
                               p.ln1.gain, p.ln1.bias);
      r.contexts.push_back(c);
      Tensor<S> f_in = use_nal ? nal_apply(tp, c, Side::Encoder, l) : c;
      Tensor<S> f = ffn_apply(tp, p.ffn, f_in);
      x = layer_norm(tp, add(tp, f_in, dropout(tp, f, cfg_.dropout, drop_rng, train)),
                     p.ln2.gain, p.ln2.bias);
    }
    r.states = x;
    return r;
  }

  // Post-norm decoder with causal self-attention; NAL wiring mirrors the
  // encoder but is gated on cer_decoder, feeding the cross-attention sublayer.
  DecoderResult<S> decoder_forward(Tape<S>* tp, Tensor<S> y, Tensor<S> enc_states,
                                   const Mat<S>& self_mask, const Mat<S>& cross_mask,
                                   Rng& drop_rng, bool train, bool nal_active = false,
                                   std::vector<Tensor<S>>* attn_probe = nullptr) {
    const bool use_nal = !train && nal_active && cfg_.cer_decoder && cfg_.include_nal;
    DecoderResult<S> r;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      DecoderLayerParams<S>& p = dec_[static_cast<std::size_t>(l)];
      Tensor<S> a = attention(tp, p.self_attn, y, y, self_mask, drop_rng, train, attn_probe);
      Tensor<S> c = layer_norm(tp, add(tp, y, dropout(tp, a, cfg_.dropout, drop_rng, train)),
                               p.ln1.gain, p.ln1.bias);
      r.contexts.push_back(c);
      Tensor<S> q = use_nal ? nal_apply(tp, c, Side::Decoder, l) : c;
      Tensor<S> x =
          attention(tp, p.cross, q, enc_states, cross_mask, drop_rng, train, attn_probe);
      Tensor<S> d = layer_norm(tp, add(tp, q, dropout(tp, x, cfg_.dropout, drop_rng, train)),
                               p.ln2.gain, p.ln2.bias);
      Tensor<S> f = ffn_apply(tp, p.ffn, d);
      y = layer_norm(tp, add(tp, d, dropout(tp, f, cfg_.dropout, drop_rng, train)),
                     p.ln3.gain, p.ln3.bias);
    }
    r.logits = add_bias(tp, matmul(tp, y, out_w_), out_b_);
    return r;
  }

 private:
  static Tensor<S> uniform_init(Rng& rng, Index rows, Index cols, double bound) {
    Mat<S> m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = S(rng.uniform(-bound, bound));
    return Tensor<S>::from_matrix(std::move(m), true);
  }

  static Tensor<S> xavier_init(Rng& rng, Index fan_in, Index fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return uniform_init(rng, fan_in, fan_out, bound);
  }

  static AttnParams<S> init_attn(Rng& rng, Index d) {
    AttnParams<S> p;
    p.wq = xavier_init(rng, d, d);
    p.bq = Tensor<S>::zeros({1, d}, true);
    p.wk = xavier_init(rng, d, d);
    p.bk = Tensor<S>::zeros({1, d}, true);
    p.wv = xavier_init(rng, d, d);
    p.bv = Tensor<S>::zeros({1, d}, true);
    p.wo = xavier_init(rng, d, d);
    p.bo = Tensor<S>::zeros({1, d}, true);
    return p;
  }

  static LnParams<S> init_ln(Index d) {
    LnParams<S> p;
    Mat<S> ones = Mat<S>::Ones(1, d);
    p.gain = Tensor<S>::from_matrix(std::move(ones), true);
    p.bias = Tensor<S>::zeros({1, d}, true);
    return p;
  }

  static FfnParams<S> init_ffn(Rng& rng, Index d, Index ff) {
    FfnParams<S> p;
    p.w1 = xavier_init(rng, d, ff);
    p.b1 = Tensor<S>::zeros({1, ff}, true);
    p.w2 = xavier_init(rng, ff, d);
    p.b2 = Tensor<S>::zeros({1, d}, true);
    return p;
  }

  static NalParams<S> init_nal(Rng& rng, Index d, Index width) {
    NalParams<S> p;
    p.w1 = uniform_init(rng, d, width, 0.1);
    p.b1 = uniform_init(rng, 1, width, 0.1);
    p.w2 = uniform_init(rng, width, d, 0.1);
    p.b2 = uniform_init(rng, 1, d, 0.1);
    return p;
  }

  static void push_attn(std::vector<std::pair<std::string, Tensor<S>>>& out, const std::string& p,
                        const AttnParams<S>& a) {
    out.emplace_back(p + "wq", a.wq);
    out.emplace_back(p + "bq", a.bq);
    out.emplace_back(p + "wk", a.wk);
    out.emplace_back(p + "bk", a.bk);
    out.emplace_back(p + "wv", a.wv);
    out.emplace_back(p + "bv", a.bv);
    out.emplace_back(p + "wo", a.wo);
    out.emplace_back(p + "bo", a.bo);
  }

  static void push_ln(std::vector<std::pair<std::string, Tensor<S>>>& out, const std::string& p,
                      const LnParams<S>& l) {
    out.emplace_back(p + "gain", l.gain);
    out.emplace_back(p + "bias", l.bias);
  }

  static void push_ffn(std::vector<std::pair<std::string, Tensor<S>>>& out, const std::string& p,
                       const FfnParams<S>& f) {
    out.emplace_back(p + "w1", f.w1);
    out.emplace_back(p + "b1", f.b1);
    out.emplace_back(p + "w2", f.w2);
    out.emplace_back(p + "b2", f.b2);
  }

  static void push_ffn_named(std::vector<std::pair<std::string, Tensor<S>>>& out,
                             const std::string& p, const NalParams<S>& f) {
    out.emplace_back(p + "w1", f.w1);
    out.emplace_back(p + "b1", f.b1);
    out.emplace_back(p + "w2", f.w2);
    out.emplace_back(p + "b2", f.b2);
  }

  ModelConfig cfg_;
  Tensor<S> src_embed_, tgt_embed_, out_w_, out_b_;
  std::vector<EncoderLayerParams<S>> enc_;
  std::vector<DecoderLayerParams<S>> dec_;
  Mat<S> pos_;
};

}  // namespace cer
