#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cer/bleu.hpp"
#include "cer/checkpoint.hpp"
#include "cer/decode.hpp"
#include "cer/objective_check.hpp"
#include "cer/robustness.hpp"
#include "cer/training.hpp"

namespace {

using Scalar = float;

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

// Multi-reference sets live in suffixed files ref.0, ref.1, ...; a plain file
// is the single-reference case.
std::vector<std::vector<std::string>> load_references(const std::string& path,
                                                      std::size_t n_hyps) {
  std::vector<std::vector<std::string>> refs(n_hyps);
  if (std::filesystem::exists(path)) {
    const auto lines = read_lines(path);
    if (lines.size() != n_hyps)
      throw std::runtime_error("reference file " + path + " has " +
                               std::to_string(lines.size()) + " lines, expected " +
                               std::to_string(n_hyps));
    for (std::size_t i = 0; i < n_hyps; ++i) refs[i].push_back(lines[i]);
    return refs;
  }
  for (int k = 0;; ++k) {
    const std::string candidate = path + "." + std::to_string(k);
    if (!std::filesystem::exists(candidate)) break;
    const auto lines = read_lines(candidate);
    if (lines.size() != n_hyps)
      throw std::runtime_error("reference file " + candidate + " has " +
                               std::to_string(lines.size()) + " lines, expected " +
                               std::to_string(n_hyps));
    for (std::size_t i = 0; i < n_hyps; ++i) refs[i].push_back(lines[i]);
  }
  if (refs.empty() || refs[0].empty())
    throw std::runtime_error("no reference file found at " + path + " (or " + path + ".0)");
  return refs;
}

struct CliConfig {
  cer::ModelConfig model;
  cer::TrainSettings train;
};

CliConfig load_config(const std::string& path) {
  CliConfig c;
  if (path.empty()) return c;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  nlohmann::json j;
  in >> j;
  if (j.contains("model")) c.model = cer::ModelConfig::from_json(j["model"]);
  if (j.contains("train")) {
    const auto& t = j["train"];
    c.train.steps = t.value("steps", c.train.steps);
    c.train.batch_tokens = t.value("batch_tokens", c.train.batch_tokens);
    c.train.warmup_steps = t.value("warmup_steps", c.train.warmup_steps);
    c.train.peak_lr_scale = t.value("peak_lr_scale", c.train.peak_lr_scale);
    c.train.disc_width = t.value("disc_width", c.train.disc_width);
  }
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    c.train.noise.src_strategy =
        cer::strategy_from_string(n.value("src_strategy", std::string("madeup")));
    c.train.noise.tgt_strategy =
        cer::strategy_from_string(n.value("tgt_strategy", std::string("semantics")));
    c.train.noise.sigma_x = n.value("sigma_x", c.train.noise.sigma_x);
    c.train.noise.sigma_y = n.value("sigma_y", c.train.noise.sigma_y);
    c.train.noise.m = n.value("m", c.train.noise.m);
    c.train.noise.gaussian_std = n.value("gaussian_std", c.train.noise.gaussian_std);
  }
  return c;
}

void save_bundle(const std::string& path, const cer::TransformerModel<Scalar>& model,
                 const cer::Vocabulary& src_vocab, const cer::Vocabulary& tgt_vocab) {
  cer::save_checkpoint(path, model);
  src_vocab.save(path + ".src.vocab");
  tgt_vocab.save(path + ".tgt.vocab");
}

struct Bundle {
  cer::TransformerModel<Scalar> model;
  cer::Vocabulary src_vocab;
  cer::Vocabulary tgt_vocab;
};

Bundle load_bundle(const std::string& path) {
  Bundle b{cer::load_checkpoint<Scalar>(path), cer::Vocabulary::load(path + ".src.vocab"),
           cer::Vocabulary::load(path + ".tgt.vocab")};
  const cer::ModelConfig& cfg = b.model.config();
  if (cfg.v_src != b.src_vocab.size() || cfg.m_madeup != b.src_vocab.madeup() ||
      cfg.v_tgt != b.tgt_vocab.size())
    throw std::runtime_error("vocabulary mismatch between " + path +
                             " and its sidecar vocab files");
  return b;
}

std::unique_ptr<std::ofstream> open_out(const std::string& path) {
  auto out = std::make_unique<std::ofstream>(path);
  if (!*out) throw std::runtime_error("cannot write " + path);
  return out;
}

void print_history_summary(const std::vector<cer::LossBreakdown<Scalar>>& history) {
  if (history.empty()) return;
  const auto& last = history.back();
  std::cout << "steps " << history.size() << "  l_nmt " << last.l_nmt << "  l_nal_x "
            << last.l_nal_x << "  l_nal_y " << last.l_nal_y << "  total " << last.total << "\n";
}

int cmd_train(const std::string& src, const std::string& tgt, const std::string& config,
              const std::string& variant_name, std::uint64_t seed, const std::string& out_path,
              long long steps, int vocab_size, const std::string& log_path) {
  CliConfig cfg = load_config(config);
  const cer::Variant variant = cer::variant_from_string(variant_name);
  cfg.train.variant = variant;
  cfg.train.seed = seed;
  if (steps >= 0) cfg.train.steps = steps;

  const cer::Vocabulary src_vocab =
      cer::Vocabulary::build(read_lines(src), vocab_size, cfg.model.m_madeup);
  const cer::Vocabulary tgt_vocab = cer::Vocabulary::build(read_lines(tgt), vocab_size, 0);
  cfg.model.v_src = src_vocab.size();
  cfg.model.m_madeup = src_vocab.madeup();
  cfg.model.v_tgt = tgt_vocab.size();
  cer::apply_variant(cfg.model, variant);
  cfg.model.validate();

  const auto pairs = cer::load_parallel_corpus(src, tgt, src_vocab, tgt_vocab, &std::cerr);
  cer::TransformerModel<Scalar> model(cfg.model, seed);

  const std::string log_target = log_path.empty() ? out_path + ".log.jsonl" : log_path;
  std::unique_ptr<std::ofstream> log_file;
  std::ostream* log = &std::cout;
  if (log_target != "-") {
    log_file = open_out(log_target);
    log = log_file.get();
  }
  const auto history = cer::run_training(model, pairs, cfg.train, log, &std::cerr);
  save_bundle(out_path, model, src_vocab, tgt_vocab);
  print_history_summary(history);
  return 0;
}

int cmd_finetune(const std::string& base, const std::string& src, const std::string& tgt,
                 const std::string& variant_name, std::uint64_t seed, const std::string& out_path,
                 long long steps, double peak_lr_scale, double lambda_x, double lambda_y,
                 const std::string& log_path) {
  Bundle b = load_bundle(base);
  const cer::Variant variant =
      variant_name.empty()
          ? (b.model.config().include_nal ? cer::Variant::CER : cer::Variant::Baseline)
          : cer::variant_from_string(variant_name);

  cer::ModelConfig cfg = b.model.config();
  cer::apply_variant(cfg, variant);
  if (variant != cer::Variant::Baseline) {
    if (lambda_x >= 0) cfg.lambda_x = lambda_x;
    if (lambda_y >= 0) cfg.lambda_y = lambda_y;
    if (cfg.lambda_x == 0.0 && cfg.lambda_y == 0.0) cfg.lambda_x = cfg.lambda_y = 1.0;
  }

  // a variant switch can add parameters (e.g. NAL on a baseline checkpoint);
  // those keep their fresh seed-derived init, everything else is copied over
  cer::TransformerModel<Scalar> model(cfg, seed);
  const auto base_params = b.model.named_params();
  for (auto& [name, tensor] : model.named_params())
    for (const auto& [base_name, base_tensor] : base_params)
      if (base_name == name) tensor.value() = base_tensor.value();

  const auto pairs = cer::load_parallel_corpus(src, tgt, b.src_vocab, b.tgt_vocab, &std::cerr);
  cer::TrainSettings st;
  st.variant = variant;
  st.seed = seed;
  st.steps = steps;
  st.peak_lr_scale = peak_lr_scale;

  const std::string log_target = log_path.empty() ? out_path + ".log.jsonl" : log_path;
  std::unique_ptr<std::ofstream> log_file;
  std::ostream* log = &std::cout;
  if (log_target != "-") {
    log_file = open_out(log_target);
    log = log_file.get();
  }
  const auto history = cer::fine_tune(model, pairs, st, log, &std::cerr);
  save_bundle(out_path, model, b.src_vocab, b.tgt_vocab);
  print_history_summary(history);
  return 0;
}

int cmd_translate(const std::string& model_path, const std::string& input,
                  const std::string& output, int nal_override, const cer::DecodeConfig& dcfg) {
  Bundle b = load_bundle(model_path);
  const bool nal_active =
      nal_override < 0 ? b.model.config().nal_active_at_test : nal_override > 0;
  std::unique_ptr<std::ofstream> out_file;
  std::ostream* out = &std::cout;
  if (!output.empty()) {
    out_file = open_out(output);
    out = out_file.get();
  }
  for (const std::string& line : read_lines(input)) {
    const std::vector<int> ids = b.src_vocab.encode(line);
    const std::vector<int> hyp = cer::decode(b.model, ids, dcfg, nal_active, &std::cerr);
    (*out) << b.tgt_vocab.decode(hyp) << '\n';
  }
  return 0;
}

int cmd_evaluate(const std::string& model_path, const std::string& src_path,
                 const std::string& hyp_path, const std::string& ref_path, int nal_override,
                 const cer::DecodeConfig& dcfg) {
  std::vector<std::string> hyps;
  if (!hyp_path.empty()) {
    hyps = read_lines(hyp_path);
  } else {
    if (model_path.empty() || src_path.empty())
      throw std::runtime_error("evaluate needs either --hyp or both --model and --src");
    Bundle b = load_bundle(model_path);
    const bool nal_active =
        nal_override < 0 ? b.model.config().nal_active_at_test : nal_override > 0;
    for (const std::string& line : read_lines(src_path)) {
      const std::vector<int> ids = b.src_vocab.encode(line);
      hyps.push_back(b.tgt_vocab.decode(cer::decode(b.model, ids, dcfg, nal_active, &std::cerr)));
    }
  }
  const auto refs = load_references(ref_path, hyps.size());
  std::printf("%.2f\n", cer::corpus_bleu(hyps, refs) * 100.0);
  return 0;
}

int cmd_ablate(const std::vector<std::string>& model_paths, std::vector<std::string> names,
               const std::string& src_path, const std::string& ref_path,
               const std::string& strategy_name, std::vector<double> rates,
               std::vector<std::uint64_t> seeds, int m, double gaussian_std,
               const std::string& json_path, const std::string& tsv_path,
               const cer::DecodeConfig& dcfg) {
  if (model_paths.empty()) throw std::runtime_error("ablate needs at least one --models entry");
  if (names.empty())
    for (const std::string& p : model_paths)
      names.push_back(std::filesystem::path(p).stem().string());
  if (names.size() != model_paths.size())
    throw std::runtime_error("ablate: --names count must match --models");

  std::vector<Bundle> bundles;
  bundles.reserve(model_paths.size());
  for (const std::string& p : model_paths) bundles.push_back(load_bundle(p));
  const auto src_vocab_bytes = read_lines(model_paths[0] + ".src.vocab");
  const auto tgt_vocab_bytes = read_lines(model_paths[0] + ".tgt.vocab");
  for (std::size_t i = 1; i < model_paths.size(); ++i) {
    if (read_lines(model_paths[i] + ".src.vocab") != src_vocab_bytes ||
        read_lines(model_paths[i] + ".tgt.vocab") != tgt_vocab_bytes)
      throw std::runtime_error("ablate: models do not share a vocabulary (" + model_paths[i] +
                               ")");
  }

  std::vector<std::vector<int>> srcs;
  for (const std::string& line : read_lines(src_path))
    srcs.push_back(bundles[0].src_vocab.encode(line));
  const auto refs = load_references(ref_path, srcs.size());

  std::vector<cer::RobustnessSystem<Scalar>> systems;
  for (std::size_t i = 0; i < bundles.size(); ++i)
    systems.push_back(cer::RobustnessSystem<Scalar>{
        names[i], &bundles[i].model, bundles[i].model.config().nal_active_at_test});

  const cer::RobustnessReport report = cer::robustness_eval<Scalar>(
      systems, srcs, refs, bundles[0].tgt_vocab, cer::strategy_from_string(strategy_name), rates,
      seeds, dcfg, m, gaussian_std, &std::cerr);

  if (!json_path.empty()) (*open_out(json_path)) << report.to_json().dump(2) << '\n';
  if (!tsv_path.empty()) (*open_out(tsv_path)) << report.to_tsv();
  std::cout << report.to_tsv();
  return 0;
}

int cmd_gradcheck() {
  using cer::Tape;
  using cer::Tensor;
  bool ok = true;
  auto report = [&](const std::string& name, double err, double tol) {
    const bool pass = err < tol;
    ok = ok && pass;
    std::printf("%-34s max rel err %.3e  %s\n", name.c_str(), err, pass ? "ok" : "FAIL");
  };

  {
    cer::Rng rng(7);
    cer::Mat<double> xm(5, 6), gm(1, 6), bm(1, 6);
    for (cer::Index i = 0; i < 5; ++i)
      for (cer::Index j = 0; j < 6; ++j) xm(i, j) = rng.uniform(-2.0, 2.0);
    for (cer::Index j = 0; j < 6; ++j) {
      gm(0, j) = rng.uniform(0.5, 1.5);
      bm(0, j) = rng.uniform(-0.5, 0.5);
    }
    Tensor<double> x = Tensor<double>::from_matrix(xm, true);
    Tensor<double> g = Tensor<double>::from_matrix(gm, true);
    Tensor<double> b = Tensor<double>::from_matrix(bm, true);
    auto res = cer::grad_check<double>(
        [&](Tape<double>* tp) {
          return cer::sum_all(
              tp, cer::softmax_rows(tp, cer::layer_norm(tp, cer::mul(tp, x, x), g, b)));
        },
        {{"x", x}, {"gain", g}, {"bias", b}}, 1e-5);
    report("softmax(layer_norm(x*x))", res.max_rel_err, 1e-4);
  }

  {
    cer::ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.n_layers = 1;
    cfg.dropout = 0.0;
    cfg.v_src = 12;
    cfg.m_madeup = 4;
    cfg.v_tgt = 12;
    cer::TransformerModel<double> model(cfg, 99);
    std::vector<cer::EncodedPair> pairs = {
        {{4, 5, 6}, {cer::Vocabulary::kBos, 7, 8, cer::Vocabulary::kEos}},
        {{7, 8}, {cer::Vocabulary::kBos, 4, 5, 6, cer::Vocabulary::kEos}},
    };
    cer::TrainSettings st;
    st.variant = cer::Variant::CER;
    auto check = cer::make_objective_check(model, cer::pack_batch(pairs), st, 5);
    const double at_point = check.builder(nullptr).item();
    report("objective twin value agreement",
           std::abs(at_point - check.reference_total) /
               std::max(1.0, std::abs(check.reference_total)),
           1e-12);
    std::vector<std::pair<std::string, Tensor<double>>> leaves;
    for (auto& [name, t] : model.named_params()) leaves.emplace_back(name, t);
    auto res = cer::grad_check<double>(check.builder, leaves, 1e-5);
    report("full objective vs central diff", res.max_rel_err, 1e-4);
  }

  std::puts(ok ? "gradcheck: all clear" : "gradcheck: FAILURES");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"context-enhanced reconstruction translation toolkit"};
  app.require_subcommand(1);

  std::string src, tgt, config, out_path, log_path;
  std::string base, model_path, input, output, hyp_path, ref_path;
  std::string train_variant = "cer", ft_variant;
  std::uint64_t seed = 1;
  long long train_steps = -1, ft_steps = 200;
  int vocab_size = 32000;
  double peak_lr_scale = 0.25, lambda_x = -1.0, lambda_y = -1.0;
  cer::DecodeConfig dcfg;
  int nal_override = -1;

  auto add_decode_flags = [&](CLI::App* cmd) {
    cmd->add_option("--beam", dcfg.beam, "beam size");
    cmd->add_option("--alpha", dcfg.alpha, "length penalty exponent");
    cmd->add_flag_callback("--nal-active", [&] { nal_override = 1; },
                           "force the noise adaptation layers on");
    cmd->add_flag_callback("--no-nal", [&] { nal_override = 0; },
                           "force the noise adaptation layers off");
  };

  CLI::App* train = app.add_subcommand("train", "train a model from a parallel corpus");
  train->add_option("--src", src, "source training file")->required();
  train->add_option("--tgt", tgt, "target training file")->required();
  train->add_option("--config", config, "JSON config (model/train/noise sections)");
  train->add_option("--variant", train_variant, "baseline|cer|cer-inactive|cer-con|cer-d");
  train->add_option("--seed", seed, "RNG seed");
  train->add_option("--steps", train_steps, "override config step count");
  train->add_option("--vocab-size", vocab_size, "max vocabulary size incl. specials");
  train->add_option("--out", out_path, "output checkpoint path")->required();
  train->add_option("--log", log_path, "JSON step log path ('-' for stdout)");

  CLI::App* finetune = app.add_subcommand("finetune", "fine-tune from a checkpoint");
  finetune->add_option("--base", base, "base checkpoint")->required();
  finetune->add_option("--src", src, "source fine-tuning file")->required();
  finetune->add_option("--tgt", tgt, "target fine-tuning file")->required();
  finetune->add_option("--variant", ft_variant, "training variant (default: follow checkpoint)");
  finetune->add_option("--seed", seed, "RNG seed");
  finetune->add_option("--steps", ft_steps, "fine-tuning steps");
  finetune->add_option("--peak-lr-scale", peak_lr_scale, "peak LR multiplier");
  finetune->add_option("--lambda-x", lambda_x, "source reconstruction weight");
  finetune->add_option("--lambda-y", lambda_y, "target reconstruction weight");
  finetune->add_option("--out", out_path, "output checkpoint path")->required();
  finetune->add_option("--log", log_path, "JSON step log path ('-' for stdout)");

  CLI::App* translate = app.add_subcommand("translate", "decode a source file");
  translate->add_option("--model", model_path, "checkpoint")->required();
  translate->add_option("--input", input, "source text file")->required();
  translate->add_option("--output", output, "hypothesis file (default stdout)");
  add_decode_flags(translate);

  CLI::App* evaluate = app.add_subcommand("evaluate", "decode and score BLEU (x100)");
  evaluate->add_option("--model", model_path, "checkpoint");
  evaluate->add_option("--src", src, "source test file");
  evaluate->add_option("--hyp", hyp_path, "score an existing hypothesis file instead");
  evaluate->add_option("--ref", ref_path, "reference file (or prefix of ref.0, ref.1, ...)")
      ->required();
  add_decode_flags(evaluate);

  CLI::App* ablate = app.add_subcommand("ablate", "noise-rate robustness comparison");
  std::vector<std::string> model_paths, names;
  std::vector<double> rates = {0.0, 0.05, 0.1, 0.2};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string strategy_name = "madeup";
  int m = 3;
  double gaussian_std = 0.01;
  std::string json_path, tsv_path;
  ablate->add_option("--models", model_paths, "checkpoints to compare")->required();
  ablate->add_option("--names", names, "system names (default: file stems)");
  ablate->add_option("--src", src, "source test file")->required();
  ablate->add_option("--ref", ref_path, "reference file")->required();
  ablate->add_option("--strategy", strategy_name, "noise strategy");
  ablate->add_option("--rates", rates, "noise rates");
  ablate->add_option("--seeds", seeds, "noise seeds");
  ablate->add_option("--m", m, "semantic neighbor count");
  ablate->add_option("--gaussian-std", gaussian_std, "gaussian noise std");
  ablate->add_option("--json", json_path, "write per-seed points as JSON");
  ablate->add_option("--tsv", tsv_path, "write aggregated TSV");
  ablate->add_option("--beam", dcfg.beam, "beam size");
  ablate->add_option("--alpha", dcfg.alpha, "length penalty exponent");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "run gradient fidelity checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train)
      return cmd_train(src, tgt, config, train_variant, seed, out_path, train_steps, vocab_size,
                       log_path);
    if (*finetune)
      return cmd_finetune(base, src, tgt, ft_variant, seed, out_path, ft_steps, peak_lr_scale,
                          lambda_x, lambda_y, log_path);
    if (*translate) return cmd_translate(model_path, input, output, nal_override, dcfg);
    if (*evaluate) return cmd_evaluate(model_path, src, hyp_path, ref_path, nal_override, dcfg);
    if (*ablate)
      return cmd_ablate(model_paths, names, src, ref_path, strategy_name, rates, seeds, m,
                        gaussian_std, json_path, tsv_path, dcfg);
    if (*gradcheck) return cmd_gradcheck();
  } catch (const std::exception& e) {
    std::cerr << "cer: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
