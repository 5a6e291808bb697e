// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "filter_oracles.hpp"
#include "genq/common/binary_io.hpp"
#include "genq/common/rng.hpp"
#include "genq/datasrc/synth.hpp"
#include "genq/filter/pipeline.hpp"
#include "genq/nnkit/train.hpp"

using namespace genq;
using filter::EnergyForm;
using nn::TensorD;
using nn::TensorF;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("genq_test_" + name)).string();
}

std::vector<std::uint64_t> iota_ids(std::size_t n) {
  std::vector<std::uint64_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

TensorF repeat_image(const TensorF& images, nn::Index row, nn::Index count) {
  return images.gather(std::vector<nn::Index>(static_cast<std::size_t>(count), row));
}

const nn::Model& trained_cnn() {
  static const nn::Model model = [] {
    const auto train = data::synth_balanced(2000, 11);
    nn::TrainOptions opts;
    opts.epochs = 3;
    return nn::train_float(nn::Model::tiny_cnn(3), train.images, train.labels, opts).model;
  }();
  return model;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

TEST_CASE("energy score examples and errors") {
  CHECK(filter::energy_score(std::vector<float>(10, 0.0F)) == doctest::Approx(-10.0).epsilon(1e-15));
  CHECK(filter::energy_score(std::vector<float>{1.0F, 2.0F}) == doctest::Approx(-(std::exp(-1.0) + std::exp(-2.0))));
  CHECK(filter::energy_score(std::vector<float>{1.0F, 2.0F}) == doctest::Approx(-0.503215).epsilon(1e-6));
  CHECK(filter::energy_score(std::vector<float>(2, 0.0F), 2.0) == doctest::Approx(-4.0));
  CHECK(filter::energy_score(std::vector<float>(10, 0.0F), 1.0, EnergyForm::logsumexp) ==
        doctest::Approx(-std::log(10.0)));
  CHECK_THROWS_AS(filter::energy_score(std::vector<float>{1.0F, NAN}), ScoringError);
  CHECK_THROWS_AS(filter::energy_score(std::vector<float>{1.0F, INFINITY}), ScoringError);
  CHECK_THROWS_AS(filter::energy_score(std::vector<float>{1.0F, 2.0F}, 0.0), ContractError);
  CHECK_THROWS_AS(filter::energy_score(std::vector<float>{1.0F}), ContractError);
  CHECK(filter::parse_energy_form("logsumexp") == EnergyForm::logsumexp);
  CHECK_THROWS_AS(filter::parse_energy_form("lse"), ContractError);
}

TEST_CASE("energy score matches the definition and is increasing in every logit") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double alpha = rng.uniform(0.2, 4.0);
    std::vector<float> f(10);
    std::vector<double> fd(10);
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = static_cast<float>(rng.uniform(-4.0, 4.0));
      fd[i] = f[i];
    }
    const double e = filter::energy_score(f, alpha);
    CHECK(e < 0.0);
    CHECK(testing::close_rel(e, testing::naive_energy(fd, alpha), 1e-12));
    CHECK(testing::close_rel(filter::energy_score(f, alpha, EnergyForm::logsumexp),
                             testing::naive_energy_logsumexp(fd, alpha), 1e-12));
    const auto k = static_cast<std::size_t>(rng.uniform_int(10));
    std::vector<float> g = f;
    g[k] += 0.5F;
    CHECK(filter::energy_score(g, alpha) > e);
  }
}

TEST_CASE("per-sample energies identify failing samples") {
  nn::Model m = nn::Model::tiny_cnn(0);
  TensorF x = data::synth_balanced(4, 1).images;
  const auto e = filter::energy_scores(m, x);
  const TensorF logits = m.logits(x);
  for (nn::Index i = 0; i < 4; ++i) {
    CHECK(e[static_cast<std::size_t>(i)] ==
          filter::energy_score(std::span<const float>(logits.data().data() + i * 10, 10)));
  }
  x[3 * 3 * 32 * 32 + 5] = NAN;
  const std::vector<std::uint64_t> ids{10, 11, 12, 13};
  try {
    (void)filter::energy_scores(m, x, 1.0, EnergyForm::sum_exp, ids);
    FAIL("expected ScoringError");
  } catch (const ScoringError& err) {
    CHECK(std::string(err.what()).find("sample 13") != std::string::npos);
  }
}

TEST_CASE("bn distance") {
  nn::BatchStats a{{0.0, 0.0}, {1.0, 1.0}};
  nn::BatchStats b{{3.0, 4.0}, {1.0, 1.0}};
  CHECK(filter::bn_distance(std::vector{a}, std::vector{a}) == 0.0);
  CHECK(filter::bn_distance(std::vector{b}, std::vector{a}) == doctest::Approx(5.0));
  nn::BatchStats c{{0.0}, {3.0}};
  nn::BatchStats d{{0.0}, {1.0}};
  CHECK(filter::bn_distance(std::vector{b, c}, std::vector{a, d}) == doctest::Approx(7.0));
  CHECK(filter::bn_distance(std::vector{a, d}, std::vector{b, c}) == filter::bn_distance(std::vector{b, c}, std::vector{a, d}));
  CHECK_THROWS_AS(filter::bn_distance(std::vector{a}, std::vector{c}), ContractError);
  CHECK_THROWS_AS(filter::bn_distance(std::vector{a}, std::vector{a, a}), ContractError);

  const nn::Model m = nn::Model::tiny_cnn(5);
  const TensorF x = data::synth_balanced(6, 2).images;
  const auto observed = filter::observed_stats(m, x);
  const auto ref = filter::running_stats(m);
  CHECK(filter::bn_distance(observed, ref) > 0.0);
  const auto naive = testing::naive_bn_distance(testing::naive_batch_stats(m, x, {0, 1, 2, 3, 4, 5}),
                                                testing::naive_running_stats(m));
  CHECK(testing::close_rel(filter::bn_distance(observed, ref), naive, 1e-9));
}

TEST_CASE("bn sensitivity") {
  const nn::Model& m = trained_cnn();
  SUBCASE("identical images have zero sensitivity") {
    const TensorF pool = data::synth_balanced(10, 4).images;
    for (nn::Index row = 0; row < 10; ++row) {
      const TensorF batch = repeat_image(pool, row, 8);
      for (const double s : filter::bn_sensitivities(batch, m)) CHECK(std::abs(s) <= 1e-6);
      CHECK(std::abs(filter::bn_sensitivity(batch, m, 0)) <= 1e-6);
    }
  }
  SUBCASE("single-pass sensitivities agree with leave-one-out recomputation") {
    for (const nn::Index b : {2, 5, 9}) {
      const TensorF batch = data::synth_balanced(b, static_cast<std::uint64_t>(b)).images;
      const auto fast = filter::bn_sensitivities(batch, m);
      for (nn::Index i = 0; i < b; ++i) {
        const double two_pass = filter::bn_sensitivity(batch, m, i);
        const double naive = testing::naive_bn_sensitivity(m, batch, i);
        CHECK(testing::close_rel(fast[static_cast<std::size_t>(i)], naive, 1e-6, 1e-9));
        CHECK(testing::close_rel(two_pass, naive, 1e-6, 1e-9));
      }
    }
  }
  SUBCASE("permuting the batch permutes sensitivities") {
    const TensorF batch = data::synth_balanced(7, 8).images;
    const std::vector<nn::Index> perm{3, 0, 6, 1, 5, 2, 4};
    const auto s = filter::bn_sensitivities(batch, m);
    const auto p = filter::bn_sensitivities(batch.gather(perm), m);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      CHECK(p[i] == doctest::Approx(s[static_cast<std::size_t>(perm[i])]).epsilon(1e-9));
    }
  }
  SUBCASE("preconditions") {
    const TensorF one = data::synth_balanced(1, 1).images;
    CHECK_THROWS_AS(filter::bn_sensitivities(one, m), ContractError);
    CHECK_THROWS_AS(filter::bn_sensitivity(one, m, 0), ContractError);
    CHECK_THROWS_AS(filter::bn_sensitivities(data::synth_balanced(3, 1).images, nn::Model::tiny_vit(0)),
                    ContractError);
  }
}

TEST_CASE("patch similarity") {
  const TensorD g = filter::patch_similarity(TensorF({2, 2}, {1.0F, 0.0F, 1.0F, 1.0F}));
  CHECK(g.at(0, 1) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(g.at(0, 0) == 1.0);
  CHECK(filter::patch_similarity(TensorF({2, 2}, {1.0F, 0.0F, 0.0F, 3.0F})).at(0, 1) == 0.0);
  try {
    (void)filter::patch_similarity(TensorF({3, 2}, {1.0F, 0.0F, 0.0F, 0.0F, 1.0F, 1.0F}));
    FAIL("expected ScoringError");
  } catch (const ScoringError& e) {
    CHECK(std::string(e.what()).find("patch 1") != std::string::npos);
  }

  Rng rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    TensorF o({6, 5});
    std::vector<std::vector<double>> rows(6, std::vector<double>(5));
    for (nn::Index i = 0; i < 6; ++i) {
      for (nn::Index j = 0; j < 5; ++j) {
        o.at(i, j) = static_cast<float>(rng.normal());
        rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = o.at(i, j);
      }
    }
    const TensorD gamma = filter::patch_similarity(o);
    const auto naive = testing::naive_similarity(rows);
    for (nn::Index i = 0; i < 6; ++i) {
      CHECK(gamma.at(i, i) == 1.0);
      for (nn::Index j = 0; j < 6; ++j) {
        CHECK(gamma.at(i, j) == gamma.at(j, i));
        CHECK(std::abs(gamma.at(i, j)) <= 1.0);
        CHECK(gamma.at(i, j) == doctest::Approx(naive[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("patch entropy") {
  const TensorD constant = TensorD::full({5, 5}, 0.3);
  const auto point = filter::patch_entropy(constant);
  CHECK(point.bandwidth == filter::kMinBandwidth);
  CHECK(point.value == doctest::Approx(testing::naive_entropy(std::vector<double>(25, 0.3), 1e-3)).epsilon(1e-9));
  // Up to the +-3h truncation of the grid this is the kernel's own entropy.
  const double kernel = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * 1e-6);
  CHECK(point.value == doctest::Approx(kernel).epsilon(0.01));

  Rng rng(23);
  TensorF o({8, 4});
  for (auto& v : o.data()) v = static_cast<float>(rng.normal());
  const TensorD spread = filter::patch_similarity(o);
  const double h = filter::scott_bandwidth(std::vector<double>(spread.data().begin(), spread.data().end()));
  CHECK(filter::patch_entropy(spread).value > filter::patch_entropy(constant, h).value);

  // Patch order does not matter.
  const std::vector<nn::Index> perm{7, 2, 5, 0, 1, 6, 3, 4};
  CHECK(filter::patch_entropy(filter::patch_similarity(o.gather(perm))).value ==
        doctest::Approx(filter::patch_entropy(spread).value).epsilon(1e-12));

  // Against the untruncated oracle.
  for (int trial = 0; trial < 30; ++trial) {
    TensorF p({10, 3});
    for (auto& v : p.data()) v = static_cast<float>(rng.normal(0.5, 1.0));
    const TensorD gamma = filter::patch_similarity(p);
    const std::vector<double> values(gamma.data().begin(), gamma.data().end());
    const auto r = filter::patch_entropy(gamma);
    CHECK(r.bandwidth == doctest::Approx(testing::naive_scott(values)).epsilon(1e-12));
    CHECK(testing::close_rel(r.value, testing::naive_entropy(values, testing::naive_scott(values)), 1e-9));
  }
  CHECK_THROWS_AS(filter::patch_entropy(TensorD::full({1, 1}, 1.0)), ContractError);
  CHECK_THROWS_AS(filter::patch_entropy(TensorD::full({2, 3}, 1.0)), DimensionError);
}

TEST_CASE("selection rules") {
  const std::vector<double> scores{-3.0, -1.0, -2.0};
  const std::vector<int> labels{0, 0, 0};
  CHECK(filter::keep_lowest_per_class(scores, labels, iota_ids(3), 1.0 / 3.0) == std::vector<bool>{true, false, true});
  CHECK(filter::keep_count(10, 0.7) == 3);
  CHECK(filter::keep_count(10, 0.0) == 10);
  CHECK(filter::keep_count(7, 0.5) == 4);
  CHECK_THROWS_AS(filter::keep_count(10, 1.0), ContractError);
  CHECK_THROWS_AS(filter::keep_count(10, -0.1), ContractError);

  // Full-sort oracle on random pools with deliberate ties.
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 20 + rng.uniform_int(60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    std::vector<std::uint64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.uniform_int(8));
      y[i] = static_cast<int>(rng.uniform_int(3));
      ids[i] = 1000 - 7 * i;
    }
    const double r = rng.uniform(0.0, 0.95);
    const auto kept = filter::keep_lowest_per_class(s, y, ids, r);
    const auto kept_high = filter::keep_highest_per_class(s, y, ids, r);
    for (int c = 0; c < 3; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < n; ++i) {
        if (y[i] == c) members.push_back(i);
      }
      if (members.empty()) continue;
      auto by = [&](bool low) {
        std::vector<std::size_t> m = members;
        std::stable_sort(m.begin(), m.end(), [&](std::size_t a, std::size_t b) {
          return low ? std::make_pair(s[a], ids[a]) < std::make_pair(s[b], ids[b])
                     : std::make_pair(-s[a], ids[a]) < std::make_pair(-s[b], ids[b]);
        });
        return m;
      };
      const auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(members.size()) * (1.0 - r) - 1e-9));
      const auto low = by(true);
      const auto high = by(false);
      for (std::size_t j = 0; j < low.size(); ++j) {
        CHECK(kept[low[j]] == (j < k));
        CHECK(kept_high[high[j]] == (j < k));
      }
    }
  }

  // Ten per class at r = 0.5 keeps five, each no worse than any dropped one.
  std::vector<double> s(30);
  std::vector<int> y(30);
  for (std::size_t i = 0; i < 30; ++i) {
    s[i] = rng.normal();
    y[i] = static_cast<int>(i % 3);
  }
  const auto kept = filter::keep_lowest_per_class(s, y, iota_ids(30), 0.5);
  for (int c = 0; c < 3; ++c) {
    double worst_kept = -1e9;
    double best_dropped = 1e9;
    int count = 0;
    for (std::size_t i = 0; i < 30; ++i) {
      if (y[i] != c) continue;
      if (kept[i]) {
        ++count;
        worst_kept = std::max(worst_kept, s[i]);
      } else {
        best_dropped = std::min(best_dropped, s[i]);
      }
    }
    CHECK(count == 5);
    CHECK(worst_kept <= best_dropped);
  }
  CHECK(filter::keep_lowest_per_class(s, y, iota_ids(30), 0.0) == std::vector<bool>(30, true));

  // Batches: 4 of 5 and the trailing single sample joins its predecessor.
  const std::vector<double> b{0.5, 0.1, 0.9, 0.3, 0.2, 0.8, 0.0, 0.4, 0.7};
  CHECK(filter::drop_highest_per_batch(b, iota_ids(9), 0.5, 4) ==
        std::vector<bool>{false, true, false, true, true, false, true, false, false});
  CHECK(filter::drop_highest_per_batch(std::vector<double>(6, 0.0), iota_ids(6), 0.5, 6) ==
        std::vector<bool>{true, true, true, false, false, false});
}

TEST_CASE("stage filters and routing") {
  const nn::Model& cnn = trained_cnn();
  const nn::Model vit = nn::Model::tiny_vit(2);
  const data::Dataset pool = data::synth_balanced(40, 6);

  SUBCASE("bn filter drops the most sensitive images of a hand-checked batch") {
    const data::Dataset four = pool.head(4);
    std::vector<double> s;
    for (nn::Index i = 0; i < 4; ++i) s.push_back(testing::naive_bn_sensitivity(cnn, four.images, i));
    std::vector<std::size_t> order{0, 1, 2, 3};
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    const auto report = filter::bn_filter(four, {}, cnn, 0.5, 64);
    CHECK(!report.samples[order[0]].kept);
    CHECK(!report.samples[order[1]].kept);
    CHECK(report.samples[order[2]].kept);
    CHECK(report.samples[order[3]].kept);
    CHECK(report.bn_batch == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(testing::close_rel(report.samples[i].stage2_score, s[i], 1e-6, 1e-9));
  }
  SUBCASE("identical pool keeps the lowest ids") {
    data::Dataset same = pool.head(6);
    same.images = repeat_image(pool.images, 0, 6);
    const auto report = filter::bn_filter(same, {}, cnn, 0.5, 64);
    CHECK(report.kept_ids() == std::vector<std::uint64_t>{0, 1, 2});
    CHECK(filter::bn_filter(pool, {}, cnn, 0.0, 16).kept_ids() == iota_ids(40));
  }
  SUBCASE("patch filter keeps the spread sample") {
    // A flat image gives nearly identical patches; a noisy one gives diverse patches.
    data::Dataset two = pool.head(2);
    two.labels = {4, 4};
    for (nn::Index k = 0; k < 3 * 32 * 32; ++k) two.images[k] = 0.5F;
    Rng rng(1);
    for (nn::Index k = 3 * 32 * 32; k < 2 * 3 * 32 * 32; ++k) two.images[k] = static_cast<float>(rng.uniform());
    const auto report = filter::patch_filter(two, {}, vit, 0.5);
    CHECK(report.samples[1].stage2_score > report.samples[0].stage2_score);
    CHECK(report.kept_ids() == std::vector<std::uint64_t>{1});
    CHECK(filter::patch_filter(pool, {}, vit, 0.0).kept_ids() == iota_ids(40));

    const auto r = filter::patch_filter(pool, {}, vit, 0.5);
    double kept = 0;
    double dropped = 0;
    for (const auto& s : r.samples) (s.kept ? kept : dropped) += s.stage2_score;
    CHECK(kept / 20 >= dropped / 20);
  }
  SUBCASE("routing") {
    CHECK_THROWS_AS(filter::patch_filter(pool, {}, cnn, 0.5), RoutingError);
    CHECK_THROWS_AS(filter::bn_filter(pool, {}, vit, 0.5), RoutingError);
    CHECK(filter::run_pipeline(pool, cnn).stage2 == filter::SecondStage::bn_sensitivity);
    CHECK(filter::run_pipeline(pool, vit).stage2 == filter::SecondStage::patch_entropy);
  }
}

TEST_CASE("two-stage pipeline") {
  const nn::Model& cnn = trained_cnn();
  const nn::Model vit = nn::Model::tiny_vit(2);
  const data::Dataset pool = data::synth_balanced(400, 7);

  filter::PipelineOptions none;
  none.r1 = 0.0;
  none.r2 = 0.0;
  CHECK(filter::run_pipeline(pool, cnn, none).kept_ids() == iota_ids(400));

  const auto vit_report = filter::run_pipeline(pool, vit);
  std::vector<int> per_class(10, 0);
  for (const auto& s : vit_report.samples) per_class[static_cast<std::size_t>(s.label)] += s.kept;
  CHECK(per_class == std::vector<int>(10, 10));
  CHECK(filter::run_pipeline(pool, cnn).kept_ids().size() == 100);

  // Deterministic, and the score table covers every candidate.
  const auto a = filter::run_pipeline(pool, cnn);
  const auto b = filter::run_pipeline(pool, cnn);
  CHECK(a.kept_ids() == b.kept_ids());
  for (const auto& s : a.samples) {
    CHECK(std::isfinite(s.energy));
    if (s.kept) CHECK(std::isfinite(s.stage2_score));
  }

  // Re-filtering the kept set keeps a lowest-energy prefix of it.
  filter::PipelineOptions energy_only;
  energy_only.r2 = 0.0;
  const auto first = filter::run_pipeline(pool, cnn, energy_only);
  const auto kept_ids = first.kept_ids();
  const data::Dataset kept = filter::kept_subset(pool, first);
  const auto second = filter::run_pipeline(kept, cnn, energy_only, kept_ids);
  for (int c = 0; c < 10; ++c) {
    double worst_kept = -1e300;
    double best_dropped = 1e300;
    for (const auto& s : second.samples) {
      if (s.label != c) continue;
      (s.kept ? worst_kept : best_dropped) = s.kept ? std::max(worst_kept, s.energy) : std::min(best_dropped, s.energy);
    }
    CHECK(worst_kept <= best_dropped);
  }
  for (const auto id : second.kept_ids()) CHECK(std::find(kept_ids.begin(), kept_ids.end(), id) != kept_ids.end());
  CHECK(second.kept_ids().size() == 100);
}

TEST_CASE("corrupted candidates score higher energy") {
  const nn::Model& cnn = trained_cnn();
  const data::Dataset clean = data::synth_balanced(200, 31);
  double previous = mean(filter::energy_scores(cnn, clean.images));
  for (int severity = 1; severity <= 5; severity += 2) {
    const double e = mean(filter::energy_scores(cnn, data::corrupt(clean, severity, 4).images));
    CHECK(e > previous);
    previous = e;
  }

  std::vector<data::Dataset> parts{clean, data::corrupt(data::synth_balanced(200, 32), 5, 9)};
  const data::Dataset pool = data::concat(parts);
  filter::PipelineOptions opts;
  opts.r2 = 0.0;
  const auto report = filter::run_pipeline(pool, cnn, opts);
  int clean_kept = 0;
  for (const auto id : report.kept_ids()) clean_kept += id < 200;
  CHECK(clean_kept >= 0.8 * static_cast<double>(report.kept_ids().size()));
}

TEST_CASE("report files") {
  const data::Dataset pool = data::synth_balanced(30, 2);
  const std::vector<std::uint64_t> ids = [] {
    std::vector<std::uint64_t> v(30);
    for (std::size_t i = 0; i < 30; ++i) v[i] = 500 + i;
    return v;
  }();
  const auto report = filter::run_pipeline(pool, trained_cnn(), {}, ids);
  const std::string csv = temp_path("report.csv");
  const std::string json = temp_path("report.json");
  const std::string manifest = temp_path("manifest.txt");
  filter::write_report_csv(report, csv);
  filter::write_report_json(report, json);
  filter::write_manifest(report, manifest);

  const std::string text = io::read_file(csv);
  CHECK(text.rfind("sample_id,class,energy,stage2_score,kept\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 31);
  CHECK(filter::read_manifest(manifest) == report.kept_ids());
  const std::string side = io::read_file(json);
  CHECK(side.find("\"stage2\": \"bn_sensitivity\"") != std::string::npos);
  CHECK(side.find("\"model_hash\"") != std::string::npos);

  io::write_file(manifest, "3\nx7\n");
  CHECK_THROWS_AS(filter::read_manifest(manifest), FormatError);
  for (const auto& p : {csv, json, manifest}) std::filesystem::remove(p);
}
