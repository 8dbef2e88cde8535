// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "taskadapter/errors.hpp"
#include "taskadapter/matching.hpp"
#include "test_support.hpp"

using namespace taskadapter;
using namespace tatest;

namespace {

double brute_cosine(const Var& a, std::size_t ia, const Var& b, std::size_t ib, std::size_t d) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t e = 0; e < d; ++e) {
    dot += a.at(ia * d + e) * b.at(ib * d + e);
    na += a.at(ia * d + e) * a.at(ia * d + e);
    nb += b.at(ib * d + e) * b.at(ib * d + e);
  }
  return na == 0 || nb == 0 ? 0.0 : dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("prototypes average the shots of each class") {
  const Var support = Var::constant({4, 1, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const PrototypeSet p = compute_prototypes(support, {0, 1, 0, 1}, 2);
  CHECK(p.prototypes.shape() == Shape{2, 1, 2});
  CHECK(p.prototypes.at(0) == doctest::Approx(3.0));
  CHECK(p.prototypes.at(3) == doctest::Approx(6.0));
  const PrototypeSet one = compute_prototypes(Var::constant({2, 1, 2}, {1, 2, 3, 4}), {1, 0}, 2);
  CHECK(one.prototypes.at(0) == 3.0);
  CHECK(one.prototypes.at(2) == 1.0);
  CHECK_THROWS_AS(compute_prototypes(support, {0, 0, 0, 0}, 2), ContractError);
  CHECK_THROWS_AS(compute_prototypes(support, {0, 0, 0, 1}, 2), ContractError);
  Rng rng(1);
  const Var s = random_var({6, 3, 4}, rng);
  const Var shuffled = take(s, 0, {4, 1, 2, 3, 0, 5});
  const PrototypeSet a = compute_prototypes(s, {0, 1, 1, 0, 0, 1}, 2);
  const PrototypeSet b = compute_prototypes(shuffled, {0, 1, 1, 0, 0, 1}, 2);
  CHECK(max_abs_diff(a.prototypes, b.prototypes) < 1e-12);
}

TEST_CASE("proto_metric equals a brute-force loop over frames") {
  Rng rng(2);
  const Var q = random_var({3, 4, 5}, rng);
  const PrototypeSet p{random_var({2, 4, 5}, rng)};
  const ScoreMatrix s = proto_metric(q, p);
  CHECK(s.kind == ScoreKind::visual);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      double expected = 0;
      for (std::size_t t = 0; t < 4; ++t) expected += brute_cosine(q, i * 4 + t, p.prototypes, c * 4 + t, 5) / 4;
      CHECK(std::abs(s.scores.at(i * 2 + c) - expected) < 1e-10);
    }
  }
}

TEST_CASE("proto_metric hand cases") {
  const Var q = Var::constant({1, 2, 2}, {1, 0, 0, 1});
  CHECK(proto_metric(q, {Var::constant({1, 2, 2}, {1, 0, 0, 1})}).scores.item() == doctest::Approx(1.0));
  CHECK(proto_metric(q, {Var::constant({1, 2, 2}, {2, 0, 1, 0})}).scores.item() == doctest::Approx(0.5));
  CHECK(proto_metric(q, {Var::constant({1, 2, 2}, {0, 1, 1, 0})}).scores.item() == doctest::Approx(0.0));
  CHECK(proto_metric(q, {Var::constant({1, 2, 2}, {0, 0, 0, 1})}).scores.item() == doctest::Approx(0.5));
  CHECK_THROWS_AS(proto_metric(q, {Var::zeros({1, 3, 2})}), ContractError);
}

TEST_CASE("Bi-MHM ignores frame order where proto_metric does not") {
  const Var q = Var::constant({1, 2, 2}, {1, 0, 0, 1});
  const PrototypeSet reversed{Var::constant({1, 2, 2}, {0, 1, 1, 0})};
  CHECK(bimhm_metric(q, reversed).scores.item() == doctest::Approx(1.0));
  CHECK(proto_metric(q, reversed).scores.item() < 1.0);
  Rng rng(3);
  const Var q1 = random_var({2, 1, 4}, rng);
  const PrototypeSet p1{random_var({3, 1, 4}, rng)};
  CHECK(max_abs_diff(bimhm_metric(q1, p1).scores, proto_metric(q1, p1).scores) < 1e-15);
  const Var qs = random_var({4, 3, 4}, rng);
  const PrototypeSet ps{random_var({2, 3, 4}, rng)};
  const Var bs = bimhm_metric(qs, ps).scores;
  for (double v : bs.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("crossmodal scores apply stage_match to every pair") {
  Rng rng(4);
  const Var seg = random_var({2, 3, 4}, rng);
  const Var sem = random_var({3, 3, 4}, rng);
  const ScoreMatrix s = crossmodal_scores(seg, sem);
  CHECK(s.kind == ScoreKind::crossmodal);
  for (std::size_t q = 0; q < 2; ++q)
    for (std::size_t c = 0; c < 3; ++c) {
      const double expected = stage_match(select(seg, 0, q), select(sem, 0, c)).item();
      CHECK(std::abs(s.scores.at(q * 3 + c) - expected) < 1e-14);
    }
}

TEST_CASE("product fusion hand case and normalisation") {
  // softmax(log p / 1) recovers p, so pass log-probabilities with unit temperature.
  const ScoreMatrix v{Var::constant({1, 2}, {std::log(0.6), std::log(0.4)}), ScoreKind::visual};
  const ScoreMatrix x{Var::constant({1, 2}, {std::log(0.25), std::log(0.75)}), ScoreKind::crossmodal};
  const FusedScores f = fuse_scores(v, x, 1.0, 1.0);
  CHECK(f.probabilities.at(0) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(f.probabilities.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(fuse_scores(v, x, 0.0, 1.0), ConfigError);
  CHECK_THROWS_AS(fuse_scores(v, x, 1.0, -0.1), ConfigError);

  Rng rng(5);
  const ScoreMatrix rv{random_var({5, 4}, rng), ScoreKind::visual};
  const ScoreMatrix rx{random_var({5, 4}, rng), ScoreKind::crossmodal};
  for (auto mode : {FusionMode::probability, FusionMode::raw}) {
    const FusedScores rf = fuse_scores(rv, rx, 0.07, 0.07, mode);
    for (std::size_t r = 0; r < 5; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < 4; ++c) {
        CHECK(rf.probabilities.at(r * 4 + c) > 0.0);
        sum += rf.probabilities.at(r * 4 + c);
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("fusion argmax invariances") {
  Rng rng(6);
  const ScoreMatrix v{random_var({4, 5}, rng, false, 0.3), ScoreKind::visual};
  const ScoreMatrix uniform{Var::constant({4, 5}, std::vector<double>(20, 0.2)), ScoreKind::crossmodal};
  CHECK(predictions(fuse_scores(v, uniform, 0.07, 0.07).probabilities) == predictions(v.scores));
  const ScoreMatrix x{random_var({4, 5}, rng, false, 0.3), ScoreKind::crossmodal};
  const ScoreMatrix shifted{add_broadcast(v.scores, Var::constant({5}, std::vector<double>(5, 0.4))),
                            ScoreKind::visual};
  CHECK(predictions(fuse_scores(v, x, 0.07, 0.07).probabilities) ==
        predictions(fuse_scores(shifted, x, 0.07, 0.07).probabilities));
  const std::vector<std::size_t> swap{1, 0, 2, 3, 4};
  const FusedScores base = fuse_scores(v, x, 0.07, 0.07);
  const FusedScores swapped = fuse_scores({take(v.scores, 1, swap)}, {take(x.scores, 1, swap)}, 0.07, 0.07);
  CHECK(max_abs_diff(take(base.probabilities, 1, swap), swapped.probabilities) == 0.0);
}

TEST_CASE("episode loss hand cases") {
  const FusedScores uniform{Var::constant({2, 5}, std::vector<double>(10, 0.2))};
  CHECK(episode_loss(uniform, {0, 3}).item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  const FusedScores quarter{Var::constant({1, 4}, {0.25, 0.25, 0.25, 0.25})};
  CHECK(episode_loss(quarter, {2}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const FusedScores perfect{Var::constant({1, 2}, {1.0, 0.0})};
  CHECK(episode_loss(perfect, {0}).item() == doctest::Approx(0.0));
  CHECK(episode_loss(perfect, {1}).item() == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(episode_loss(perfect, {2}), ContractError);
  CHECK(accuracy(Var::constant({2, 2}, {0.9, 0.1, 0.3, 0.7}), {0, 0}) == doctest::Approx(0.5));
}

TEST_CASE("scoring gradients match finite differences") {
  Rng rng(7);
  Var q = random_var({3, 4, 4}, rng, true);
  Var s = random_var({3, 4, 4}, rng, true);
  Var sem = random_var({3, 3, 4}, rng, true);
  for (auto metric : {MetricKind::proto, MetricKind::bimhm}) {
    auto loss = [&] {
      const PrototypeSet p = compute_prototypes(s, {0, 1, 2}, 3);
      const ScoreMatrix v = visual_scores(metric, q, p);
      const ScoreMatrix x = crossmodal_scores(segment_stages(slice(q, 1, 0, 3)), sem);
      return episode_loss(fuse_scores(v, x, 0.5, 0.5), {0, 1, 2});
    };
    for (Var* t : {&q, &s, &sem}) CHECK(check_gradient(*t, loss).relative_error < 1e-6);
  }
}
