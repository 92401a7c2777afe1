#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmil/distance.hpp"
#include "cmil/matrix.hpp"
#include "cmil/rng.hpp"

namespace cmil::models {

enum class ExtractorKind { kToyMlp, kToyCnn, kExternal };

std::string to_string(ExtractorKind kind);
ExtractorKind extractor_kind_from_string(const std::string& s);

struct ExtractorConfig {
  ExtractorKind kind = ExtractorKind::kToyMlp;
  std::vector<std::size_t> input_shape;  // {In} or {C, H, W} for toy_cnn
  std::size_t embed_dim = 16;
  std::vector<std::size_t> hidden_sizes = {32, 32};
  bool feature_norm = false;

  std::size_t input_size() const;
};

enum class AccumulatorKind { kMean, kMax, kSum, kSetTransformer };

std::string to_string(AccumulatorKind kind);
AccumulatorKind accumulator_kind_from_string(const std::string& s);

struct AccumulatorConfig {
  AccumulatorKind kind = AccumulatorKind::kMean;
  std::size_t st_layers = 2;
  std::size_t st_heads = 4;
  std::size_t st_hidden = 0;  // 0 means embed_dim
  std::uint64_t seed = 0;
};

struct ModelParameters {
  Vec theta;  // extractor
  Vec phi;    // accumulator (empty for mean/max/sum)
  Vec psi;    // classifier head
};

struct CropEmbedding {
  Vec vector;
  std::string crop_id;
};

struct BagRepresentation {
  Vec vector;
  std::string source_bag_id;
};

/// Crop feature extractor f. Maps each input row independently to an
/// embed_dim vector; no cross-crop interaction.
class Extractor {
 public:
  explicit Extractor(ExtractorConfig cfg);

  const ExtractorConfig& config() const { return cfg_; }
  std::size_t param_count() const;
  void init_params(std::span<double> theta, Rng& rng) const;

  struct Cache {
    std::vector<Matrix> layer_inputs;  // input to each linear stage
    Matrix pre_norm;                   // pre-normalization embeddings
    Matrix conv_act;                   // toy_cnn: tanh(conv), N x (F*H*W)
    Matrix pooled;                     // toy_cnn: N x F
  };

  /// inputs: N x input_size -> N x embed_dim.
  Matrix forward(const Matrix& inputs, std::span<const double> theta,
                 Cache* cache = nullptr) const;

  /// Accumulates dLoss/dtheta into grad_theta (not zeroed here).
  void backward(const Matrix& inputs, const Cache& cache,
                const Matrix& grad_output, std::span<const double> theta,
                std::span<double> grad_theta) const;

 private:
  ExtractorConfig cfg_;
  std::vector<std::size_t> layer_dims_;  // mlp: in, h..., embed_dim
};

/// Permutation-invariant accumulation g of a set of crop embeddings into
/// one bag representation. mean/max/sum are parameter-free; the set
/// transformer is two self-attention blocks followed by pooling by
/// multihead attention with one learned seed vector.
class Accumulator {
 public:
  Accumulator(AccumulatorConfig cfg, std::size_t embed_dim);

  const AccumulatorConfig& config() const { return cfg_; }
  std::size_t embed_dim() const { return dim_; }
  std::size_t param_count() const;
  void init_params(std::span<double> phi, Rng& rng) const;

  struct MhaCache {
    Matrix q, k, v;               // projected
    std::vector<Matrix> attn;     // per head softmax weights
    Matrix concat;                // merged head outputs
  };
  struct BlockCache {
    MhaCache mha;
    Matrix residual;  // input + attention
    Matrix ff_act;    // tanh hidden activations
  };
  struct Cache {
    std::vector<Matrix> layer_inputs;  // X0 .. X_layers
    std::vector<BlockCache> blocks;
    BlockCache pma;
    std::vector<std::size_t> max_rows;  // kMax: argmax row per column
  };

  /// embeddings: n x embed_dim (n >= 1) -> embed_dim vector.
  Vec forward(const Matrix& embeddings, std::span<const double> phi,
              Cache* cache = nullptr) const;

  /// grad_embeddings must be n x embed_dim and is accumulated into, as is
  /// grad_phi.
  void backward(const Matrix& embeddings, const Cache& cache,
                std::span<const double> grad_output,
                std::span<const double> phi, std::span<double> grad_phi,
                Matrix& grad_embeddings) const;

 private:
  AccumulatorConfig cfg_;
  std::size_t dim_;
  std::size_t hidden_;
  std::size_t head_dim_;
};

/// One affine map embed_dim -> num_classes; classify_bag applies softmax.
class ClassifierHead {
 public:
  ClassifierHead(std::size_t embed_dim, std::size_t num_classes);

  std::size_t num_classes() const { return classes_; }
  std::size_t param_count() const;
  void init_params(std::span<double> psi, Rng& rng) const;

  Matrix logits(const Matrix& reps, std::span<const double> psi) const;
  Matrix probabilities(const Matrix& reps, std::span<const double> psi) const;

  void backward(const Matrix& reps, const Matrix& grad_logits,
                std::span<const double> psi, std::span<double> grad_psi,
                Matrix& grad_reps) const;

 private:
  std::size_t dim_;
  std::size_t classes_;
};

// Spec-level convenience wrappers over the batched forward paths.

std::vector<CropEmbedding> extract_features(
    const Matrix& inputs, const std::vector<std::string>& crop_ids,
    std::span<const double> theta, const Extractor& extractor);

BagRepresentation accumulate(const std::vector<CropEmbedding>& embeddings,
                             std::span<const double> phi,
                             const Accumulator& accumulator,
                             const std::string& source_bag_id = {});

Vec classify_bag(const BagRepresentation& rep, std::span<const double> psi,
                 const ClassifierHead& head);

/// Everything needed to embed and evaluate: configs plus trained weights.
struct ModelBundle {
  ExtractorConfig extractor;
  AccumulatorConfig accumulator;
  DistanceKind distance = DistanceKind::kCosine;
  std::vector<std::string> class_labels;  // class index -> bag label
  ModelParameters params;
};

ModelBundle make_initialized_bundle(const ExtractorConfig& ext,
                                    const AccumulatorConfig& acc,
                                    DistanceKind distance,
                                    const std::vector<std::string>& labels,
                                    std::uint64_t seed);

void save_checkpoint(const ModelBundle& bundle, const std::string& path);
ModelBundle load_checkpoint(const std::string& path);

}  // namespace cmil::models
