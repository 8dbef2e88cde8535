// SPDX-License-Identifier: Apache-2.0

#include "taskadapter/matching.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "taskadapter/alignment.hpp"
#include "taskadapter/errors.hpp"
#include "taskadapter/logging.hpp"

namespace taskadapter {

namespace {

void check_metric_inputs(const Var& query, const PrototypeSet& prototypes) {
  const Var& p = prototypes.prototypes;
  if (query.rank() != 3 || p.rank() != 3 || query.dim(1) != p.dim(1) || query.dim(2) != p.dim(2)) {
    throw ContractError("metric expects query [Q, T, D] and prototypes [C, T, D], got " +
                        shape_string(query.shape()) + " and " + shape_string(p.shape()));
  }
}

// cos[q, c, t, t'] between query frame t and prototype frame t'.
Var pair_cosines(const Var& query, const Var& prototypes) {
  const std::size_t q = query.dim(0);
  const std::size_t c = prototypes.dim(0);
  const std::size_t t = query.dim(1);
  Var a = broadcast_axis(broadcast_axis(query, 1, c), 3, t);        // [Q, C, T, T', D]
  Var b = broadcast_axis(broadcast_axis(prototypes, 0, q), 2, t);   // [Q, C, T, T', D]
  return cosine_last(a, b);
}

void warn_zero_rows(const Var& x, const char* metric) {
  const std::size_t d = x.dim(x.rank() - 1);
  const auto values = x.values();
  std::size_t zeros = 0;
  for (std::size_t r = 0; r * d < values.size(); ++r) {
    const auto row = values.subspan(r * d, d);
    zeros += std::all_of(row.begin(), row.end(), [](double v) { return v == 0.0; });
  }
  if (zeros > 0) log_warning(std::string(metric) + ": " + std::to_string(zeros) + " zero-norm rows score 0");
}

}  // namespace

PrototypeSet compute_prototypes(const Var& support, const std::vector<int>& labels, std::size_t ways) {
  if (support.rank() != 3 || support.dim(0) != labels.size()) {
    throw ContractError("support features [C*K, T, D] must match the label count");
  }
  std::vector<std::size_t> counts(ways, 0);
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= ways) {
      throw ContractError("support label " + std::to_string(label) + " outside [0, " + std::to_string(ways) + ")");
    }
    ++counts[static_cast<std::size_t>(label)];
  }
  for (std::size_t c = 0; c < ways; ++c) {
    if (counts[c] == 0) throw ContractError("class " + std::to_string(c) + " has no support video");
    if (counts[c] != counts[0]) throw ContractError("every class needs the same number of shots");
  }
  const std::size_t n = labels.size();
  std::vector<double> weights(ways * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    weights[c * n + i] = 1.0 / static_cast<double>(counts[c]);
  }
  return {combine_along(support, 0, ways, weights)};
}

ScoreMatrix proto_metric(const Var& query, const PrototypeSet& prototypes) {
  check_metric_inputs(query, prototypes);
  const std::size_t c = prototypes.prototypes.dim(0);
  const std::size_t q = query.dim(0);
  Var a = broadcast_axis(query, 1, c);
  Var b = broadcast_axis(prototypes.prototypes, 0, q);
  warn_zero_rows(query, "proto_metric");
  warn_zero_rows(prototypes.prototypes, "proto_metric");
  Var cosines = cosine_last(a, b);  // [Q, C, T]
  return {mean_along(cosines, 2), ScoreKind::visual};
}

ScoreMatrix bimhm_metric(const Var& query, const PrototypeSet& prototypes) {
  check_metric_inputs(query, prototypes);
  warn_zero_rows(query, "bimhm_metric");
  warn_zero_rows(prototypes.prototypes, "bimhm_metric");
  Var cosines = pair_cosines(query, prototypes.prototypes);  // [Q, C, T, T']
  Var query_to_proto = mean_along(max_along(cosines, 3), 2);
  Var proto_to_query = mean_along(max_along(cosines, 2), 2);
  return {scale(add(query_to_proto, proto_to_query), 0.5), ScoreKind::visual};
}

ScoreMatrix visual_scores(MetricKind metric, const Var& query, const PrototypeSet& prototypes) {
  return metric == MetricKind::proto ? proto_metric(query, prototypes) : bimhm_metric(query, prototypes);
}

ScoreMatrix crossmodal_scores(const Var& segments, const Var& semantics) {
  if (segments.rank() != 3 || semantics.rank() != 3 || segments.dim(1) != 3 || semantics.dim(1) != 3 ||
      segments.dim(2) != semantics.dim(2)) {
    throw ContractError("crossmodal scores expect segments [Q, 3, D] and semantics [C, 3, D]");
  }
  const std::size_t q = segments.dim(0);
  const std::size_t c = semantics.dim(0);
  Var a = broadcast_axis(segments, 1, c);
  Var b = broadcast_axis(semantics, 0, q);
  warn_zero_rows(segments, "stage_match");
  Var cosines = cosine_last(a, b);  // [Q, C, 3]
  return {mean_along(cosines, 2), ScoreKind::crossmodal};
}

FusedScores fuse_scores(const ScoreMatrix& visual, const ScoreMatrix& crossmodal, double tau_visual,
                        double tau_text, FusionMode mode) {
  if (!(tau_visual > 0.0) || !(tau_text > 0.0)) throw ConfigError("fusion temperatures must be positive");
  if (visual.scores.shape() != crossmodal.scores.shape() || visual.scores.rank() != 2) {
    throw ContractError("fusion expects two [Q, C] score matrices of the same shape");
  }
  if (mode == FusionMode::raw) {
    return {softmax_last(scale(mul(visual.scores, crossmodal.scores), 1.0 / tau_visual))};
  }
  Var p_visual = softmax_last(scale(visual.scores, 1.0 / tau_visual));
  Var p_text = softmax_last(scale(crossmodal.scores, 1.0 / tau_text));
  return {normalize_sum_last(mul(p_visual, p_text))};
}

Var episode_loss(const FusedScores& fused, const std::vector<int>& labels) {
  const Var& p = fused.probabilities;
  if (p.rank() != 2 || p.dim(0) != labels.size()) throw ContractError("one label per query row is required");
  std::vector<std::size_t> columns;
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= p.dim(1)) {
      throw ContractError("query label " + std::to_string(label) + " outside [0, C)");
    }
    columns.push_back(static_cast<std::size_t>(label));
  }
  Var picked = pick_columns(p, columns);
  for (double v : picked.values()) {
    if (v < kProbabilityFloor) log_warning("episode_loss: true-class probability clamped at 1e-12");
  }
  return scale(mean_all(log_clamped(picked, kProbabilityFloor)), -1.0);
}

std::vector<int> predictions(const Var& scores) {
  if (scores.rank() != 2) throw ContractError("predictions expect a [Q, C] matrix");
  const std::size_t cols = scores.dim(1);
  const auto values = scores.values();
  std::vector<int> out;
  for (std::size_t r = 0; r < scores.dim(0); ++r) {
    const auto row = values.subspan(r * cols, cols);
    out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

double accuracy(const Var& scores, const std::vector<int>& labels) {
  const auto predicted = predictions(scores);
  if (predicted.size() != labels.size() || labels.empty()) throw ContractError("accuracy needs one label per row");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace taskadapter
