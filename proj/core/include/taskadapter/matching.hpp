// SPDX-License-Identifier: Apache-2.0
//
// Visual metrics over class prototypes, cross-modal stage scores, product
// fusion of the two class distributions, and the episode loss.

#pragma once

#include <cstddef>
#include <vector>

#include "taskadapter/autograd.hpp"

namespace taskadapter {

/// Per-class mean of support features, [C, T, D_joint].
struct PrototypeSet {
  Var prototypes;
};

enum class ScoreKind { visual, crossmodal };

/// [Q, C] scores.
struct ScoreMatrix {
  Var scores;
  ScoreKind kind = ScoreKind::visual;
};

enum class MetricKind { proto, bimhm };
enum class FusionMode { probability, raw };

/// Row-normalized class probabilities [Q, C].
struct FusedScores {
  Var probabilities;
};

inline constexpr double kDefaultTemperature = 0.07;
inline constexpr double kProbabilityFloor = 1e-12;

/// support [C*K, T, D] with labels in [0, C); every class needs the same number of shots.
PrototypeSet compute_prototypes(const Var& support, const std::vector<int>& labels, std::size_t ways);

/// Mean over t of cosine(query[q, t], proto[c, t]).
ScoreMatrix proto_metric(const Var& query, const PrototypeSet& prototypes);

/// Bidirectional mean of per-frame best matches.
ScoreMatrix bimhm_metric(const Var& query, const PrototypeSet& prototypes);

ScoreMatrix visual_scores(MetricKind metric, const Var& query, const PrototypeSet& prototypes);

/// segments [Q, 3, D], semantics [C, 3, D] -> stage_match for every pair.
ScoreMatrix crossmodal_scores(const Var& segments, const Var& semantics);

/// probability: normalize(softmax(V / tau_v) * softmax(X / tau_t)).
/// raw: softmax((V * X) / tau_v).
FusedScores fuse_scores(const ScoreMatrix& visual, const ScoreMatrix& crossmodal, double tau_visual,
                        double tau_text, FusionMode mode = FusionMode::probability);

/// Mean negative log probability of the true class.
Var episode_loss(const FusedScores& fused, const std::vector<int>& labels);

/// Row argmax of a [Q, C] tensor.
std::vector<int> predictions(const Var& scores);

/// Fraction of rows whose argmax equals the label.
double accuracy(const Var& scores, const std::vector<int>& labels);

}  // namespace taskadapter
