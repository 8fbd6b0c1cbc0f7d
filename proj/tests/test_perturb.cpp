#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>
#include <sstream>

#include "cer/perturb.hpp"

using namespace cer;

namespace {

std::vector<int> sentence_ids(Rng& rng, std::size_t n, int v_real) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < n; ++i)
    ids.push_back(Vocabulary::kSpecialCount +
                  static_cast<int>(rng.uniform_int(
                      static_cast<std::uint64_t>(v_real - Vocabulary::kSpecialCount))));
  return ids;
}

Mat<double> random_table(Rng& rng, Index rows, Index cols) {
  Mat<double> t(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) t(i, j) = rng.uniform(-1.0, 1.0);
  return t;
}

// O(V) reference scan for the neighbor search.
std::vector<int> brute_force_neighbors(int id, const Mat<double>& table, int m, int v_real) {
  std::vector<std::pair<double, int>> scored;
  for (int j = Vocabulary::kSpecialCount; j < v_real; ++j) {
    if (j == id || table.row(j).norm() == 0.0) continue;
    scored.emplace_back(table.row(id).dot(table.row(j)) / (table.row(id).norm() * table.row(j).norm()),
                        j);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> out;
  for (int i = 0; i < m; ++i) out.push_back(scored[static_cast<std::size_t>(i)].second);
  return out;
}

}  // namespace

TEST_CASE("spec validation") {
  PerturbationSpec s;
  s.sigma = -0.1;
  CHECK_THROWS_AS(s.validate(100), std::invalid_argument);
  s.sigma = 1.1;
  CHECK_THROWS_AS(s.validate(100), std::invalid_argument);
  s.sigma = 0.5;
  s.m = 0;
  CHECK_THROWS_AS(s.validate(100), std::invalid_argument);
  s.m = 3;
  s.gaussian_std = 0.0;
  CHECK_THROWS_AS(s.validate(100), std::invalid_argument);
  s.gaussian_std = 0.01;
  s.strategy = Strategy::Semantics;
  s.m = 100;
  CHECK_THROWS_AS(s.validate(100), std::invalid_argument);
  s.m = 3;
  CHECK_NOTHROW(s.validate(100));
}

TEST_CASE("strategy names round-trip, unknown rejected") {
  for (Strategy s : {Strategy::None, Strategy::Madeup, Strategy::Semantics, Strategy::Dropout,
                     Strategy::Gaussian, Strategy::Random})
    CHECK(strategy_from_string(to_string(s)) == s);
  CHECK_THROWS_AS(strategy_from_string("typo"), std::invalid_argument);
}

TEST_CASE("sample_positions: degenerate rates and special exclusion") {
  std::vector<int> ids = {Vocabulary::kBos, 5, 6, Vocabulary::kUnk, 7, Vocabulary::kEos,
                          Vocabulary::kPad, Vocabulary::kPad};
  Rng r0(1);
  CHECK(sample_positions(ids, 20, 0.0, r0).empty());
  Rng r1(1);
  CHECK(sample_positions(ids, 20, 1.0, r1) == std::vector<Index>{1, 2, 4});
}

TEST_CASE("sample_positions: Bernoulli rate over 100k eligible tokens") {
  Rng gen(99);
  std::vector<int> ids = sentence_ids(gen, 120000, 50);
  Rng rng(7);
  const auto picked = sample_positions(ids, 50, 0.1, rng);
  const double rate = static_cast<double>(picked.size()) / static_cast<double>(ids.size());
  CHECK(rate >= 0.097);
  CHECK(rate <= 0.103);
}

TEST_CASE("sample_positions: pad suffix does not shift the draw stream") {
  Rng gen(3);
  std::vector<int> ids = sentence_ids(gen, 64, 30);
  std::vector<int> padded = ids;
  padded.insert(padded.end(), 16, Vocabulary::kPad);
  Rng r1(11), r2(11);
  CHECK(sample_positions(ids, 30, 0.4, r1) == sample_positions(padded, 30, 0.4, r2));
}

TEST_CASE("sample_positions: same seed, same plan") {
  Rng gen(5);
  std::vector<int> ids = sentence_ids(gen, 500, 40);
  Rng r1(21), r2(21);
  CHECK(sample_positions(ids, 40, 0.3, r1) == sample_positions(ids, 40, 0.3, r2));
}

TEST_CASE("apply_madeup: range, identity on empty, uniform slots") {
  const int v = 20, m = 10;
  Rng gen(8);
  std::vector<int> ids = sentence_ids(gen, 10000, v);

  Rng r0(1);
  CHECK(apply_madeup(ids, {}, v, m, r0) == ids);

  std::vector<Index> all(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) all[i] = static_cast<Index>(i);
  Rng r1(2);
  const auto noisy = apply_madeup(ids, all, v, m, r1);
  std::vector<int> slot_count(m, 0);
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    CHECK(noisy[i] >= v);
    CHECK(noisy[i] < v + m);
    CHECK(noisy[i] != ids[i]);
    ++slot_count[static_cast<std::size_t>(noisy[i] - v)];
  }
  const double expect = 10000.0 / m;
  const double sd = std::sqrt(10000.0 * (1.0 / m) * (1.0 - 1.0 / m));
  for (int c : slot_count) CHECK(std::abs(c - expect) <= 3.0 * sd);

  Rng r2(3);
  CHECK_THROWS_AS(apply_madeup(ids, all, v, 0, r2), std::invalid_argument);
}

TEST_CASE("top_m_neighbors: two candidates leave only the other") {
  Mat<double> t = Mat<double>::Zero(6, 2);
  t.row(4) << 1.0, 0.0;
  t.row(5) << 0.0, 1.0;
  CHECK(top_m_neighbors(4, t, 1, 6) == std::vector<int>{5});
}

TEST_CASE("top_m_neighbors: worked four-word table") {
  Mat<double> t = Mat<double>::Zero(8, 2);
  t.row(4) << 1.0, 0.0;    // a
  t.row(5) << 0.9, 0.1;    // b
  t.row(6) << 0.0, 1.0;    // c
  t.row(7) << -1.0, 0.0;   // d
  CHECK(top_m_neighbors(4, t, 2, 8) == std::vector<int>{5, 6});

  Mat<double> mean = semantic_perturb_embedding(4, t, 2, 8);
  CHECK(mean(0, 0) == doctest::Approx(0.45).epsilon(1e-12));
  CHECK(mean(0, 1) == doctest::Approx(0.55).epsilon(1e-12));

  Mat<double> scaled = t * 2.5;
  CHECK(top_m_neighbors(4, scaled, 2, 8) == std::vector<int>{5, 6});
}

TEST_CASE("top_m_neighbors: ties break toward the lower id") {
  Mat<double> t = Mat<double>::Zero(8, 2);
  t.row(4) << 1.0, 0.0;
  t.row(5) << 0.0, 1.0;
  t.row(6) << 0.0, 2.0;  // same direction as 5
  t.row(7) << -1.0, 0.0;
  CHECK(top_m_neighbors(4, t, 1, 8) == std::vector<int>{5});
}

TEST_CASE("top_m_neighbors: zero-norm rows excluded with warning") {
  Mat<double> t = Mat<double>::Zero(7, 2);
  t.row(4) << 1.0, 0.0;
  t.row(6) << 0.5, 0.5;  // row 5 stays zero
  std::ostringstream warn;
  CHECK(top_m_neighbors(4, t, 1, 7, &warn) == std::vector<int>{6});
  CHECK(warn.str().find("zero-norm row 5") != std::string::npos);
  CHECK_THROWS_AS(top_m_neighbors(4, t, 2, 7), std::invalid_argument);
}

TEST_CASE("top_m_neighbors: matches brute force on random tables") {
  for (int trial = 0; trial < 25; ++trial) {
    Rng rng(3000 + static_cast<std::uint64_t>(trial));
    const Index rows = 10 + static_cast<Index>(rng.uniform_int(190));
    const Index cols = 2 + static_cast<Index>(rng.uniform_int(15));
    Mat<double> t = random_table(rng, rows, cols);
    const int v_real = static_cast<int>(rows);
    const int id = Vocabulary::kSpecialCount +
                   static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(rows - 4)));
    const int m = 1 + static_cast<int>(rng.uniform_int(3));
    CHECK(top_m_neighbors(id, t, m, v_real) == brute_force_neighbors(id, t, m, v_real));
  }
}

TEST_CASE("apply_strategy: none gives an empty plan") {
  PerturbationSpec spec;
  spec.strategy = Strategy::None;
  Mat<double> t = Mat<double>::Zero(10, 4);
  Rng rng(1);
  CHECK(apply_strategy<double>({4, 5, 6}, spec, t, 10, 2, rng).empty());
}

TEST_CASE("apply_strategy: dropout overrides are zero vectors") {
  PerturbationSpec spec;
  spec.strategy = Strategy::Dropout;
  spec.sigma = 1.0;
  Rng gen(4);
  Mat<double> t = random_table(gen, 12, 6);
  Rng rng(2);
  auto plan = apply_strategy<double>({4, 7, 9}, spec, t, 12, 0, rng);
  CHECK(plan.kind == OverrideKind::Constant);
  CHECK(plan.positions.size() == 3);
  CHECK(plan.constants.rows() == 3);
  CHECK(plan.constants.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("apply_strategy: gaussian noise has the configured scale") {
  PerturbationSpec spec;
  spec.strategy = Strategy::Gaussian;
  spec.sigma = 1.0;
  spec.gaussian_std = 0.05;
  Rng gen(6);
  const Index dim = 64;
  Mat<double> t = random_table(gen, 30, dim);
  std::vector<int> ids = sentence_ids(gen, 200, 30);
  Rng rng(9);
  auto plan = apply_strategy<double>(ids, spec, t, 30, 0, rng);
  REQUIRE(plan.positions.size() == ids.size());

  double sum = 0.0, sq = 0.0;
  const double n = static_cast<double>(plan.constants.rows() * dim);
  for (Index i = 0; i < plan.constants.rows(); ++i) {
    const int id = ids[static_cast<std::size_t>(plan.positions[static_cast<std::size_t>(i)])];
    for (Index d = 0; d < dim; ++d) {
      const double delta = plan.constants(i, d) - t(id, d);
      sum += delta;
      sq += delta * delta;
    }
  }
  const double std = std::sqrt(sq / n - (sum / n) * (sum / n));
  CHECK(std == doctest::Approx(spec.gaussian_std).epsilon(0.05));
}

TEST_CASE("apply_strategy: random replacements stay in the real range and differ") {
  PerturbationSpec spec;
  spec.strategy = Strategy::Random;
  spec.sigma = 1.0;
  Rng gen(10);
  Mat<double> t = Mat<double>::Zero(25, 4);
  std::vector<int> ids = sentence_ids(gen, 2000, 25);
  Rng rng(12);
  auto plan = apply_strategy<double>(ids, spec, t, 25, 0, rng);
  REQUIRE(plan.ids_after.size() == plan.positions.size());
  for (std::size_t i = 0; i < plan.positions.size(); ++i) {
    CHECK(plan.ids_after[i] >= Vocabulary::kSpecialCount);
    CHECK(plan.ids_after[i] < 25);
    CHECK(plan.ids_after[i] != ids[static_cast<std::size_t>(plan.positions[i])]);
  }
}

TEST_CASE("apply_strategy: madeup plans replace exactly the selected slots") {
  PerturbationSpec spec;
  spec.strategy = Strategy::Madeup;
  spec.sigma = 0.3;
  Rng gen(14);
  Mat<double> t = Mat<double>::Zero(40, 4);
  std::vector<int> ids = sentence_ids(gen, 400, 20);
  ids[0] = Vocabulary::kBos;
  ids[399] = Vocabulary::kPad;

  Rng r1(33), r2(33);
  auto p1 = apply_strategy<double>(ids, spec, t, 20, 16, r1);
  auto p2 = apply_strategy<double>(ids, spec, t, 20, 16, r2);
  CHECK(p1.positions == p2.positions);
  CHECK(p1.ids_after == p2.ids_after);

  std::vector<int> noisy = ids;
  for (std::size_t i = 0; i < p1.positions.size(); ++i)
    noisy[static_cast<std::size_t>(p1.positions[i])] = p1.ids_after[i];
  std::size_t differing = 0;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (noisy[i] != ids[i]) ++differing;
  CHECK(differing == p1.positions.size());
  for (int id : p1.ids_after) {
    CHECK(id >= 20);
    CHECK(id < 36);
  }
  std::set<Index> unique(p1.positions.begin(), p1.positions.end());
  CHECK(unique.size() == p1.positions.size());
  CHECK(unique.count(0) == 0);
  CHECK(unique.count(399) == 0);

  Rng r3(5);
  CHECK_THROWS_AS(apply_strategy<double>(ids, spec, t, 20, 0, r3), std::invalid_argument);
}

TEST_CASE("apply_strategy: semantics stores m neighbor ids per position") {
  PerturbationSpec spec;
  spec.strategy = Strategy::Semantics;
  spec.sigma = 1.0;
  spec.m = 3;
  Rng gen(15);
  Mat<double> t = random_table(gen, 30, 8);
  std::vector<int> ids = {5, 9, 14};
  Rng rng(16);
  auto plan = apply_strategy<double>(ids, spec, t, 30, 0, rng);
  CHECK(plan.kind == OverrideKind::TableMean);
  CHECK(plan.m == 3);
  REQUIRE(plan.mean_ids.size() == 9);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::vector<int> expect = brute_force_neighbors(ids[i], t, 3, 30);
    for (int k = 0; k < 3; ++k) {
      CHECK(plan.mean_ids[i * 3 + static_cast<std::size_t>(k)] ==
            expect[static_cast<std::size_t>(k)]);
      CHECK(plan.mean_ids[i * 3 + static_cast<std::size_t>(k)] != ids[i]);
    }
  }
}
