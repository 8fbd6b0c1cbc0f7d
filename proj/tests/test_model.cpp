#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cer/checkpoint.hpp"
#include "cer/gradcheck.hpp"
#include "cer/model.hpp"

using namespace cer;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.n_layers = 2;
  c.dropout = 0.0;
  c.v_src = 12;
  c.m_madeup = 4;
  c.v_tgt = 11;
  return c;
}

struct TinyBatch {
  std::vector<int> src = {4, 5, 6, 7, 8, 9, 10, 0};  // B=2, Ls=4, second row has a pad
  std::vector<int> tgt = {1, 4, 5, 6, 2, 1, 7, 8, 2, 0};  // B=2, Lt=5
  std::vector<long long> src_lens = {4, 3};
  std::vector<long long> tgt_lens = {5, 4};
  Index batch = 2, src_len = 4, tgt_len = 5;
};

template <class S>
bool all_params_equal(const TransformerModel<S>& a, const TransformerModel<S>& b) {
  const auto pa = a.named_params();
  const auto pb = b.named_params();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first) return false;
    if (pa[i].second.value() != pb[i].second.value()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.v_tgt = 4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("config JSON round trip") {
  ModelConfig c = tiny_config();
  c.lambda_x = 0.5;
  c.cer_decoder = false;
  c.d_ff_nal = 32;
  ModelConfig r = ModelConfig::from_json(c.to_json());
  CHECK(r.to_json() == c.to_json());
  CHECK(r.nal_width() == 32);
  CHECK(tiny_config().nal_width() == 16);
}

TEST_CASE("sinusoidal positions") {
  Mat<double> p = sinusoidal_positions<double>(4, 6);
  CHECK(p(0, 0) == 0.0);
  CHECK(p(0, 1) == 1.0);
  CHECK(p(0, 2) == 0.0);
  CHECK(p(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-12));
  CHECK(p(1, 1) == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
  CHECK(p(1, 2) == doctest::Approx(std::sin(1.0 / std::pow(10000.0, 2.0 / 6.0))).epsilon(1e-12));
}

TEST_CASE("model init is seed-deterministic") {
  TransformerModel<double> a(tiny_config(), 42);
  TransformerModel<double> b(tiny_config(), 42);
  TransformerModel<double> c(tiny_config(), 43);
  CHECK(all_params_equal(a, b));
  CHECK_FALSE(all_params_equal(a, c));
}

TEST_CASE("NAL init draws do not disturb the main parameter stream") {
  ModelConfig with = tiny_config();
  ModelConfig without = tiny_config();
  without.include_nal = false;
  TransformerModel<double> a(with, 7);
  TransformerModel<double> b(without, 7);
  const auto pa = a.named_params();
  const auto pb = b.named_params();
  CHECK(pa.size() == pb.size() + 16);  // 2 sides x 2 layers x 4 NAL tensors
  for (std::size_t i = 0; i < pb.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second.value() == pb[i].second.value());
  }
}

TEST_CASE("embed: plain lookup is scaled and positioned") {
  TransformerModel<double> m(tiny_config(), 1);
  TinyBatch b;
  Rng drop(1);
  Tensor<double> x = m.embed(nullptr, b.src, b.batch, b.src_len, Side::Encoder, drop, false);
  CHECK(x.shape() == Shape{2, 4, 8});
  const Mat<double> pos = sinusoidal_positions<double>(4, 8);
  const Mat<double>& table = m.src_embedding().value();
  for (Index t = 0; t < 4; ++t) {
    Mat<double> expect = table.row(b.src[static_cast<std::size_t>(t)]) * std::sqrt(8.0) + pos.row(t);
    CHECK((x.value().row(t) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("embed: override makes the position independent of its id") {
  TransformerModel<double> m(tiny_config(), 2);
  TinyBatch b;
  PerturbationPlan<double> plan;
  plan.kind = OverrideKind::Constant;
  plan.positions = {1};
  plan.constants = Mat<double>::Constant(1, 8, 0.25);

  Rng d1(1), d2(1);
  Tensor<double> x1 = m.embed(nullptr, b.src, b.batch, b.src_len, Side::Encoder, plan, d1, false);
  std::vector<int> changed = b.src;
  changed[1] = 9;
  Tensor<double> x2 = m.embed(nullptr, changed, b.batch, b.src_len, Side::Encoder, plan, d2, false);
  CHECK((x1.value() - x2.value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("embed: constant-overridden table row gets zero gradient") {
  TransformerModel<double> m(tiny_config(), 3);
  std::vector<int> ids = {4, 5, 6};  // id 5 appears once, at the overridden slot
  PerturbationPlan<double> plan;
  plan.kind = OverrideKind::Constant;
  plan.positions = {1};
  plan.constants = Mat<double>::Constant(1, 8, 0.5);

  Rng drop(1);
  Tape<double> tape;
  Tensor<double> x = m.embed(&tape, ids, 1, 3, Side::Encoder, plan, drop, true);
  tape.backward(sum_all(&tape, mul(&tape, x, x)));
  CHECK(m.src_embedding().grad().row(5).cwiseAbs().maxCoeff() == 0.0);
  CHECK(m.src_embedding().grad().row(4).cwiseAbs().maxCoeff() > 0.0);

  auto fd = grad_check<double>(
      [&](Tape<double>* tp) {
        Rng d(1);
        Tensor<double> e = m.embed(tp, ids, 1, 3, Side::Encoder, plan, d, true);
        return sum_all(tp, mul(tp, e, e));
      },
      {{"src_embed", m.src_embedding()}}, 1e-5);
  CHECK(fd.max_rel_err < 1e-4);
}

TEST_CASE("embed: table-mean override routes gradient to neighbor rows") {
  TransformerModel<double> m(tiny_config(), 4);
  std::vector<int> ids = {4, 5, 6};
  PerturbationPlan<double> plan;
  plan.kind = OverrideKind::TableMean;
  plan.positions = {0};
  plan.mean_ids = {7, 8};
  plan.m = 2;

  Rng drop(1);
  Tape<double> tape;
  Tensor<double> x = m.embed(&tape, ids, 1, 3, Side::Encoder, plan, drop, true);
  tape.backward(sum_all(&tape, mul(&tape, x, x)));
  CHECK(m.src_embedding().grad().row(4).cwiseAbs().maxCoeff() == 0.0);
  CHECK(m.src_embedding().grad().row(7).cwiseAbs().maxCoeff() > 0.0);
  CHECK(m.src_embedding().grad().row(8).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("encoder: train mode records N contexts, attention rows sum to 1") {
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.3;
  TransformerModel<double> m(cfg, 5);
  TinyBatch b;
  Rng drop(2);
  Tape<double> tape;
  Tensor<double> x = m.embed(&tape, b.src, b.batch, b.src_len, Side::Encoder, drop, true);
  const Mat<double> mask = pad_key_mask<double>(b.src_lens, b.batch, b.src_len, b.src_len);
  std::vector<Tensor<double>> attn;
  auto r = m.encoder_forward(&tape, x, mask, drop, true, false, &attn);
  CHECK(r.contexts.size() == 2);
  CHECK(r.states.shape() == Shape{2, 4, 8});
  CHECK(attn.size() == 2);
  for (const auto& a : attn)
    for (Index row = 0; row < a.rows(); ++row)
      CHECK(std::abs(a.value().row(row).sum() - 1.0) < 1e-5);
}

TEST_CASE("encoder: inactive NAL path is bit-identical to a NAL-free model") {
  ModelConfig with = tiny_config();
  ModelConfig without = tiny_config();
  without.include_nal = false;
  TransformerModel<double> a(with, 11);
  TransformerModel<double> b(without, 11);
  TinyBatch tb;
  const Mat<double> mask = pad_key_mask<double>(tb.src_lens, tb.batch, tb.src_len, tb.src_len);

  Rng d1(1), d2(1);
  Tensor<double> xa = a.embed(nullptr, tb.src, tb.batch, tb.src_len, Side::Encoder, d1, false);
  Tensor<double> xb = b.embed(nullptr, tb.src, tb.batch, tb.src_len, Side::Encoder, d2, false);
  auto ra = a.encoder_forward(nullptr, xa, mask, d1, false, false);
  auto rb = b.encoder_forward(nullptr, xb, mask, d2, false, false);
  CHECK((ra.states.value() - rb.states.value()).cwiseAbs().maxCoeff() == 0.0);

  auto active = a.encoder_forward(nullptr, xa, mask, d1, false, true);
  CHECK((active.states.value() - ra.states.value()).cwiseAbs().maxCoeff() > 0.0);

  ModelConfig off = tiny_config();
  off.cer_encoder = false;
  TransformerModel<double> c(off, 11);
  Rng d3(1);
  Tensor<double> xc = c.embed(nullptr, tb.src, tb.batch, tb.src_len, Side::Encoder, d3, false);
  auto rc_active = c.encoder_forward(nullptr, xc, mask, d3, false, true);
  auto rc_off = c.encoder_forward(nullptr, xc, mask, d3, false, false);
  CHECK((rc_active.states.value() - rc_off.states.value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("repeated clean forwards yield identical contexts") {
  TransformerModel<double> m(tiny_config(), 13);
  TinyBatch b;
  const Mat<double> mask = pad_key_mask<double>(b.src_lens, b.batch, b.src_len, b.src_len);
  Rng d1(1), d2(1);
  Tensor<double> x1 = m.embed(nullptr, b.src, b.batch, b.src_len, Side::Encoder,
                              PerturbationPlan<double>{}, d1, true);
  Tensor<double> x2 = m.embed(nullptr, b.src, b.batch, b.src_len, Side::Encoder,
                              PerturbationPlan<double>{}, d2, true);
  auto r1 = m.encoder_forward(nullptr, x1, mask, d1, true);
  auto r2 = m.encoder_forward(nullptr, x2, mask, d2, true);
  for (std::size_t l = 0; l < r1.contexts.size(); ++l)
    CHECK((r1.contexts[l].value() - r2.contexts[l].value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("decoder: causal masking, contexts, NAL toggle") {
  TransformerModel<double> m(tiny_config(), 17);
  TinyBatch b;
  const Mat<double> enc_mask = pad_key_mask<double>(b.src_lens, b.batch, b.src_len, b.src_len);
  const Mat<double> self_mask = causal_pad_mask<double>(b.tgt_lens, b.batch, b.tgt_len);
  const Mat<double> cross = pad_key_mask<double>(b.src_lens, b.batch, b.tgt_len, b.src_len);

  Rng d(1);
  Tensor<double> x = m.embed(nullptr, b.src, b.batch, b.src_len, Side::Encoder, d, false);
  auto enc = m.encoder_forward(nullptr, x, enc_mask, d, false);

  auto run_dec = [&](const std::vector<int>& tgt, bool nal_active) {
    Rng dd(2);
    Tensor<double> y = m.embed(nullptr, tgt, b.batch, b.tgt_len, Side::Decoder, dd, false);
    return m.decoder_forward(nullptr, y, enc.states, self_mask, cross, dd, false, nal_active);
  };

  auto r1 = run_dec(b.tgt, false);
  CHECK(r1.contexts.size() == 2);
  CHECK(r1.logits.shape() == Shape{2, 5, 11});

  std::vector<int> mutated = b.tgt;
  mutated[3] = 9;  // position 3 of sentence 0
  auto r2 = run_dec(mutated, false);
  for (Index t = 0; t < 3; ++t)
    CHECK((r1.logits.value().row(t) - r2.logits.value().row(t)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((r1.logits.value().row(3) - r2.logits.value().row(3)).cwiseAbs().maxCoeff() > 0.0);

  auto active = run_dec(b.tgt, true);
  CHECK((active.logits.value() - r1.logits.value()).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("nal_apply: zeros, shape, identity embedding") {
  ModelConfig cfg = tiny_config();
  cfg.d_ff_nal = 12;
  TransformerModel<double> m(cfg, 19);
  Tensor<double> zero = Tensor<double>::zeros({1, 3, 8});
  auto params = m.named_params();
  for (auto& [name, t] : params)
    if (name.find("nal.b") != std::string::npos) t.value().setZero();
  Tensor<double> out = m.nal_apply(nullptr, zero, Side::Encoder, 0);
  CHECK(out.shape() == Shape{1, 3, 8});
  CHECK(out.value().cwiseAbs().maxCoeff() == 0.0);

  for (auto& [name, t] : params) {
    if (name.find("nal.w1") != std::string::npos) {
      t.value().setZero();
      for (Index i = 0; i < 8; ++i) t.value()(i, i) = 1.0;
    }
    if (name.find("nal.w2") != std::string::npos) {
      t.value().setZero();
      for (Index i = 0; i < 8; ++i) t.value()(i, i) = 1.0;
    }
  }
  Mat<double> nonneg = Mat<double>::Constant(6, 8, 0.0);
  for (Index i = 0; i < 6; ++i)
    for (Index j = 0; j < 8; ++j) nonneg(i, j) = static_cast<double>(i + j) * 0.1;
  Tensor<double> x = Tensor<double>::from_matrix(nonneg, Shape{2, 3, 8});
  Tensor<double> y = m.nal_apply(nullptr, x, Side::Encoder, 0);
  CHECK((y.value() - x.value()).cwiseAbs().maxCoeff() < 1e-12);

  ModelConfig bare = tiny_config();
  bare.include_nal = false;
  TransformerModel<double> nb(bare, 19);
  CHECK_THROWS_AS(nb.nal_apply(nullptr, zero, Side::Encoder, 0), std::logic_error);
}

TEST_CASE("NAL parameters get no gradient from the translation loss") {
  TransformerModel<double> m(tiny_config(), 23);
  TinyBatch b;
  const Mat<double> enc_mask = pad_key_mask<double>(b.src_lens, b.batch, b.src_len, b.src_len);
  const Mat<double> self_mask = causal_pad_mask<double>(b.tgt_lens, b.batch, b.tgt_len);
  const Mat<double> cross = pad_key_mask<double>(b.src_lens, b.batch, b.tgt_len, b.src_len);

  Rng d(3);
  Tape<double> tape;
  Tensor<double> x = m.embed(&tape, b.src, b.batch, b.src_len, Side::Encoder, d, true);
  auto enc = m.encoder_forward(&tape, x, enc_mask, d, true);
  Tensor<double> y = m.embed(&tape, b.tgt, b.batch, b.tgt_len, Side::Decoder, d, true);
  auto dec = m.decoder_forward(&tape, y, enc.states, self_mask, cross, d, true);

  std::vector<int> labels(b.tgt.size(), 0);
  std::vector<double> weights(b.tgt.size(), 0.0);
  for (Index i = 0; i < b.batch; ++i)
    for (long long t = 0; t + 1 < b.tgt_lens[static_cast<std::size_t>(i)]; ++t) {
      labels[static_cast<std::size_t>(i * b.tgt_len + t)] = b.tgt[static_cast<std::size_t>(i * b.tgt_len + t + 1)];
      weights[static_cast<std::size_t>(i * b.tgt_len + t)] = 1.0;
    }
  tape.backward(cross_entropy(&tape, dec.logits, labels, weights, 0.1));

  for (auto& [name, t] : m.named_params()) {
    if (name.find(".nal.") != std::string::npos) {
      CHECK_FALSE(t.grad_allocated());
    }
  }
  CHECK(m.tgt_embedding().grad_allocated());
}

TEST_CASE("gradcheck: one full encoder layer including NAL") {
  ModelConfig cfg = tiny_config();
  cfg.n_layers = 1;
  TransformerModel<double> m(cfg, 29);
  std::vector<int> ids = {4, 5, 6};
  std::vector<long long> lens = {3};
  const Mat<double> mask = pad_key_mask<double>(lens, 1, 3, 3);

  auto build = [&](Tape<double>* tp) {
    Rng d(1);
    Tensor<double> x = m.embed(tp, ids, 1, 3, Side::Encoder, d, false);
    auto r = m.encoder_forward(tp, x, mask, d, false);
    Tensor<double> reconstructed = m.nal_apply(tp, r.contexts[0], Side::Encoder, 0);
    return add(tp, sum_all(tp, mul(tp, r.states, r.states)),
               sum_all(tp, mul(tp, reconstructed, reconstructed)));
  };
  std::vector<std::pair<std::string, Tensor<double>>> leaves;
  for (auto& [name, t] : m.named_params())
    if (name == "src_embed" || name.find("enc.l0") != std::string::npos)
      leaves.emplace_back(name, t);
  auto report = grad_check<double>(build, leaves, 1e-5);
  for (const auto& e : report.leaves) {
    INFO("leaf ", e.name, " analytic ", e.analytic, " numeric ", e.numeric);
    CHECK(e.max_rel_err < 1e-4);
  }
}

TEST_CASE("pad extension leaves non-pad encoder rows bit-identical") {
  TransformerModel<double> m(tiny_config(), 31);
  TinyBatch b;
  std::vector<int> extended = {4, 5, 6, 7, 0, 0, 8, 9, 10, 0, 0, 0};  // Ls grown to 6
  const Mat<double> mask = pad_key_mask<double>(b.src_lens, b.batch, b.src_len, b.src_len);
  const Mat<double> mask_ext = pad_key_mask<double>(b.src_lens, b.batch, 6, 6);

  Rng d1(1), d2(1);
  Tensor<double> x = m.embed(nullptr, b.src, b.batch, b.src_len, Side::Encoder, d1, false);
  Tensor<double> xe = m.embed(nullptr, extended, b.batch, 6, Side::Encoder, d2, false);
  auto r = m.encoder_forward(nullptr, x, mask, d1, false);
  auto re = m.encoder_forward(nullptr, xe, mask_ext, d2, false);
  for (Index i = 0; i < b.batch; ++i)
    for (long long t = 0; t < b.src_lens[static_cast<std::size_t>(i)]; ++t) {
      const Index row = i * b.src_len + t;
      const Index row_e = i * 6 + t;
      CHECK((r.states.value().row(row) - re.states.value().row(row_e)).cwiseAbs().maxCoeff() ==
            0.0);
    }
}

TEST_CASE("checkpoint: save/load round trip preserves params and config") {
  ModelConfig cfg = tiny_config();
  cfg.lambda_y = 0.25;
  TransformerModel<float> m(cfg, 37);
  const auto path = (std::filesystem::temp_directory_path() / "cer_ckpt_rt.bin").string();
  save_checkpoint(path, m);
  TransformerModel<float> r = load_checkpoint<float>(path);
  CHECK(all_params_equal(m, r));
  CHECK(r.config().to_json() == m.config().to_json());
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint: corrupt files are rejected") {
  TransformerModel<float> m(tiny_config(), 41);
  const auto dir = std::filesystem::temp_directory_path();
  const auto good = (dir / "cer_ckpt_good.bin").string();
  save_checkpoint(good, m);

  const auto bad_magic = (dir / "cer_ckpt_magic.bin").string();
  {
    std::ifstream in(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes[0] = 'X';
    std::ofstream out(bad_magic, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(bad_magic), doctest::Contains("magic"),
                       std::runtime_error);

  const auto truncated = (dir / "cer_ckpt_trunc.bin").string();
  {
    std::ifstream in(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes.resize(bytes.size() - 4);
    std::ofstream out(truncated, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_checkpoint<float>(truncated), std::runtime_error);

  std::filesystem::remove(good);
  std::filesystem::remove(bad_magic);
  std::filesystem::remove(truncated);
}

TEST_CASE("checkpoint: name and shape sets are verified exactly") {
  const auto dir = std::filesystem::temp_directory_path();
  ModelConfig cfg = tiny_config();
  const auto path = (dir / "cer_ckpt_craft.bin").string();

  auto write_header = [&](std::ofstream& out, std::uint32_t params) {
    out.write(kCheckpointMagic, 4);
    detail::write_u32(out, kCheckpointVersion);
    const std::string j = cfg.to_json().dump();
    detail::write_u64(out, j.size());
    out.write(j.data(), static_cast<std::streamsize>(j.size()));
    detail::write_u32(out, params);
  };
  auto write_blob = [&](std::ofstream& out, const std::string& name, Index rows, Index cols) {
    detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(out, 2);
    detail::write_u64(out, static_cast<std::uint64_t>(rows));
    detail::write_u64(out, static_cast<std::uint64_t>(cols));
    const std::vector<float> zero(static_cast<std::size_t>(rows * cols), 0.0f);
    out.write(reinterpret_cast<const char*>(zero.data()),
              static_cast<std::streamsize>(zero.size() * sizeof(float)));
  };

  {
    std::ofstream out(path, std::ios::binary);
    write_header(out, 1);
    write_blob(out, "src_embed", 16, 8);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(path), doctest::Contains("missing parameter"),
                       std::runtime_error);

  {
    std::ofstream out(path, std::ios::binary);
    write_header(out, 1);
    write_blob(out, "src_embed", 16, 4);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(path), doctest::Contains("has shape"),
                       std::runtime_error);
  std::filesystem::remove(path);
}
