#pragma once

// Test-side oracles. Everything here is deliberately independent of the
// implementation paths it checks: plain loops, no kernels, no evaluation
// module code.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cmil/matrix.hpp"

namespace oracle {

// --------------------------------------------------------------------------
// Central finite differences over a flat parameter vector.

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline GradCheckResult compare_gradients(
    std::vector<double>& params,
    const std::function<double()>& loss,
    const std::vector<double>& analytic_grad, double step = 1e-4) {
  GradCheckResult result;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + step;
    const double up = loss();
    params[i] = saved - step;
    const double down = loss();
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double denom =
        std::max({1.0, std::abs(numeric), std::abs(analytic_grad[i])});
    const double rel = std::abs(numeric - analytic_grad[i]) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_index = i;
      result.analytic = analytic_grad[i];
      result.numeric = numeric;
    }
  }
  return result;
}

// --------------------------------------------------------------------------
// Brute-force retrieval metrics. Works on raw embedding vectors and

struct BruteCandidate {
  std::vector<double> embedding;
  bool is_gallery = false;
  std::string identity;  // empty for distractors
};

inline double brute_distance(const std::vector<double>& u,
                             const std::vector<double>& v, bool euclidean) {
  if (euclidean) {
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i)
      acc += (u[i] - v[i]) * (u[i] - v[i]);
    return std::sqrt(acc);
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) return 1.0;
  return 1.0 - dot / (std::sqrt(nu) * std::sqrt(nv));
}

struct BruteMetrics {
  double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0, map = 0.0;
};

/// Full sort per query, precision walk per relevant item. Lists include
/// distractors; only same-identity gallery items count as relevant.
inline BruteMetrics brute_force_metrics(
    const std::vector<std::pair<std::vector<double>, std::string>>& queries,
    const std::vector<BruteCandidate>& candidates, bool euclidean) {
  BruteMetrics out;
  std::size_t r1 = 0, r5 = 0, r10 = 0;
  double ap_sum = 0.0;
  for (const auto& [qvec, qid] : queries) {
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t c = 0; c < candidates.size(); ++c)
      scored.emplace_back(
          brute_distance(qvec, candidates[c].embedding, euclidean), c);
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) {
                       return a.first < b.first;
                     });
    std::size_t relevant_total = 0;
    for (const auto& cand : candidates)
      if (cand.is_gallery && cand.identity == qid) ++relevant_total;

    std::size_t hits = 0;
    double ap = 0.0;
    bool hit1 = false, hit5 = false, hit10 = false;
    for (std::size_t rank = 0; rank < scored.size(); ++rank) {
      const auto& cand = candidates[scored[rank].second];
      const bool rel = cand.is_gallery && cand.identity == qid;
      if (rel) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
        if (rank < 1) hit1 = true;
        if (rank < 5) hit5 = true;
        if (rank < 10) hit10 = true;
      }
    }
    r1 += hit1;
    r5 += hit5;
    r10 += hit10;
    ap_sum += ap / static_cast<double>(relevant_total);
  }
  const double nq = static_cast<double>(queries.size());
  out.rank1 = r1 / nq;
  out.rank5 = r5 / nq;
  out.rank10 = r10 / nq;
  out.map = ap_sum / nq;
  return out;
}

}  // namespace oracle
