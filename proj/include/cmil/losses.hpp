#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cmil/distance.hpp"
#include "cmil/matrix.hpp"

namespace cmil::losses {

struct LossConfig {
  double alpha = 1.0;   // triplet weight
  double beta = 1.0;    // cross-entropy weight
  double gamma = 0.0;   // alignment weight
  double m_triplet = 0.3;
  double m_align = 0.3;
  DistanceKind distance = DistanceKind::kCosine;

  void validate() const;
};

struct BatchLossReport {
  double total = 0.0;
  double triplet = 0.0;
  double ce = 0.0;
  double align = 0.0;  // computed even when gamma == 0
  std::size_t num_valid_triplets = 0;
};

/// Count of cosine-distance evaluations that hit a zero vector (distance
/// defined as 1 in that case). Process-wide, resettable for tests.
std::uint64_t zero_vector_warnings();
void reset_zero_vector_warnings();

/// Count of clamped log-probabilities in identity_loss.
std::uint64_t clamped_probability_warnings();
void reset_clamped_probability_warnings();

double distance(std::span<const double> u, std::span<const double> v,
                DistanceKind kind);

/// d distance/du and /dv, each scaled by coeff and accumulated.
void distance_backward(std::span<const double> u, std::span<const double> v,
                       DistanceKind kind, double coeff, std::span<double> du,
                       std::span<double> dv);

/// Mean over rows of -log p[label]; probabilities clamped at 1e-12.
double identity_loss(const Matrix& probs, const std::vector<int>& labels);

/// Batch-all triplet loss: mean hinge over every valid (anchor, positive,
/// negative) index triple. Throws when no valid triplet exists.
std::pair<double, std::size_t> triplet_loss_batch_all(
    const Matrix& reps, const std::vector<int>& labels,
    const LossConfig& cfg);

/// Accumulates coeff * dLoss/dreps into grad_reps.
void triplet_loss_backward(const Matrix& reps, const std::vector<int>& labels,
                           const LossConfig& cfg, double coeff,
                           Matrix& grad_reps);

/// max(0, min_j d(r, z_j) - m_align).
double alignment_loss(std::span<const double> rep, const Matrix& crop_embs,
                      const LossConfig& cfg);

void alignment_loss_backward(std::span<const double> rep,
                             const Matrix& crop_embs, const LossConfig& cfg,
                             double coeff, std::span<double> grad_rep,
                             Matrix& grad_crop_embs);

/// Combined loss over one batch: reps are the sub-bag representations,
/// crop_embs[i] the embeddings accumulated into reps row i, probs the
/// classifier output, labels the sub-bag class indices.
BatchLossReport total_loss(const Matrix& reps,
                           const std::vector<Matrix>& crop_embs,
                           const Matrix& probs,
                           const std::vector<int>& labels,
                           const LossConfig& cfg);

}  // namespace cmil::losses
