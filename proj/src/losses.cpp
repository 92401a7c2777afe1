#include "cmil/losses.hpp"

#include <atomic>
#include <cmath>

#include "cmil/error.hpp"

namespace cmil::losses {

namespace {

std::atomic<std::uint64_t> g_zero_vector_warnings{0};
std::atomic<std::uint64_t> g_clamped_probability_warnings{0};

constexpr double kProbClamp = 1e-12;

double norm2(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace

void LossConfig::validate() const {
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0)
    throw ConfigError("loss weights must be nonnegative");
  if (alpha == 0.0 && beta == 0.0)
    throw ConfigError(
        "at least one of alpha, beta must be positive (no training signal)");
  if (m_triplet < 0.0 || m_align < 0.0)
    throw ConfigError("margins must be nonnegative");
}

std::uint64_t zero_vector_warnings() { return g_zero_vector_warnings.load(); }
void reset_zero_vector_warnings() { g_zero_vector_warnings.store(0); }

std::uint64_t clamped_probability_warnings() {
  return g_clamped_probability_warnings.load();
}
void reset_clamped_probability_warnings() {
  g_clamped_probability_warnings.store(0);
}

double distance(std::span<const double> u, std::span<const double> v,
                DistanceKind kind) {
  if (u.size() != v.size())
    throw ValidationError("distance operands must share a dimension");
  if (kind == DistanceKind::kEuclidean) {
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double d = u[i] - v[i];
      acc += d * d;
    }
    return std::sqrt(acc);
  }
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) {
    g_zero_vector_warnings.fetch_add(1);
    return 1.0;  // orthogonal convention
  }
  double dot = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
  return 1.0 - dot / (nu * nv);
}

void distance_backward(std::span<const double> u, std::span<const double> v,
                       DistanceKind kind, double coeff, std::span<double> du,
                       std::span<double> dv) {
  if (kind == DistanceKind::kEuclidean) {
    double d = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double diff = u[i] - v[i];
      d += diff * diff;
    }
    d = std::sqrt(d);
    if (d == 0.0) return;  // subgradient 0 at the apex
    for (std::size_t i = 0; i < u.size(); ++i) {
      const double g = coeff * (u[i] - v[i]) / d;
      du[i] += g;
      dv[i] -= g;
    }
    return;
  }
  const double nu = norm2(u);
  const double nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) return;  // constant branch, zero gradient
  double dot = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
  // d = 1 - dot / (nu * nv)
  for (std::size_t i = 0; i < u.size(); ++i) {
    du[i] += coeff * (-(v[i] / (nu * nv)) + dot * u[i] / (nu * nu * nu * nv));
    dv[i] += coeff * (-(u[i] / (nu * nv)) + dot * v[i] / (nv * nv * nv * nu));
  }
}

double identity_loss(const Matrix& probs, const std::vector<int>& labels) {
  if (probs.rows() != labels.size())
    throw ValidationError("probability rows != labels");
  if (probs.rows() == 0) throw ValidationError("empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= probs.cols())
      throw ValidationError("label index out of range");
    double p = probs(i, static_cast<std::size_t>(label));
    if (p < kProbClamp) {
      p = kProbClamp;
      g_clamped_probability_warnings.fetch_add(1);
    }
    acc += -std::log(p);
  }
  return acc / static_cast<double>(probs.rows());
}

namespace {

template <typename Fn>
void for_each_valid_triplet(const std::vector<int>& labels, Fn&& fn) {
  const std::size_t n = labels.size();
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t neg = 0; neg < n; ++neg) {
        if (labels[neg] == labels[a]) continue;
        fn(a, p, neg);
      }
    }
  }
}

}  // namespace

std::pair<double, std::size_t> triplet_loss_batch_all(
    const Matrix& reps, const std::vector<int>& labels,
    const LossConfig& cfg) {
  if (reps.rows() != labels.size())
    throw ValidationError("representation rows != labels");
  double total = 0.0;
  std::size_t count = 0;
  for_each_valid_triplet(labels, [&](std::size_t a, std::size_t p,
                                     std::size_t n) {
    const double d_ap = distance(reps.row(a), reps.row(p), cfg.distance);
    const double d_an = distance(reps.row(a), reps.row(n), cfg.distance);
    total += std::max(d_ap - d_an + cfg.m_triplet, 0.0);
    ++count;
  });
  if (count == 0)
    throw SamplerError(
        "no valid triplet in batch (sampler contract violated)");
  return {total / static_cast<double>(count), count};
}

void triplet_loss_backward(const Matrix& reps, const std::vector<int>& labels,
                           const LossConfig& cfg, double coeff,
                           Matrix& grad_reps) {
  std::size_t count = 0;
  for_each_valid_triplet(labels,
                         [&](std::size_t, std::size_t, std::size_t) {
                           ++count;
                         });
  if (count == 0)
    throw SamplerError(
        "no valid triplet in batch (sampler contract violated)");
  const double scale = coeff / static_cast<double>(count);
  for_each_valid_triplet(labels, [&](std::size_t a, std::size_t p,
                                     std::size_t n) {
    const double d_ap = distance(reps.row(a), reps.row(p), cfg.distance);
    const double d_an = distance(reps.row(a), reps.row(n), cfg.distance);
    if (d_ap - d_an + cfg.m_triplet <= 0.0) return;  // inactive hinge
    distance_backward(reps.row(a), reps.row(p), cfg.distance, scale,
                      grad_reps.row(a), grad_reps.row(p));
    distance_backward(reps.row(a), reps.row(n), cfg.distance, -scale,
                      grad_reps.row(a), grad_reps.row(n));
  });
}

double alignment_loss(std::span<const double> rep, const Matrix& crop_embs,
                      const LossConfig& cfg) {
  if (crop_embs.rows() == 0)
    throw ValidationError("alignment loss needs at least one crop embedding");
  double best = distance(rep, crop_embs.row(0), cfg.distance);
  for (std::size_t j = 1; j < crop_embs.rows(); ++j)
    best = std::min(best, distance(rep, crop_embs.row(j), cfg.distance));
  return std::max(best - cfg.m_align, 0.0);
}

void alignment_loss_backward(std::span<const double> rep,
                             const Matrix& crop_embs, const LossConfig& cfg,
                             double coeff, std::span<double> grad_rep,
                             Matrix& grad_crop_embs) {
  if (crop_embs.rows() == 0)
    throw ValidationError("alignment loss needs at least one crop embedding");
  double best = distance(rep, crop_embs.row(0), cfg.distance);
  std::size_t best_j = 0;
  for (std::size_t j = 1; j < crop_embs.rows(); ++j) {
    const double d = distance(rep, crop_embs.row(j), cfg.distance);
    if (d < best) {
      best = d;
      best_j = j;
    }
  }
  if (best - cfg.m_align <= 0.0) return;  // inactive hinge
  distance_backward(rep, crop_embs.row(best_j), cfg.distance, coeff,
                    grad_rep, grad_crop_embs.row(best_j));
}

BatchLossReport total_loss(const Matrix& reps,
                           const std::vector<Matrix>& crop_embs,
                           const Matrix& probs,
                           const std::vector<int>& labels,
                           const LossConfig& cfg) {
  cfg.validate();
  if (crop_embs.size() != reps.rows())
    throw ValidationError("crop embedding groups != representation rows");

  BatchLossReport report;
  auto [triplet, count] = triplet_loss_batch_all(reps, labels, cfg);
  report.triplet = triplet;
  report.num_valid_triplets = count;
  report.ce = identity_loss(probs, labels);
  double align = 0.0;
  for (std::size_t i = 0; i < reps.rows(); ++i)
    align += alignment_loss(reps.row(i), crop_embs[i], cfg);
  report.align = align / static_cast<double>(reps.rows());
  report.total = cfg.alpha * report.triplet + cfg.beta * report.ce +
                 cfg.gamma * report.align;
  return report;
}

}  // namespace cmil::losses
