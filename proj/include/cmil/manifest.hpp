#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmil/matrix.hpp"

namespace cmil::data {

/// Crop payload: either a path to an external asset or an inline feature
/// vector. One dataset uses exactly one of the two modalities.
struct DataRef {
  std::optional<std::string> path;
  std::optional<Vec> vector;

  bool is_path() const { return path.has_value(); }
  bool is_vector() const { return vector.has_value(); }

  friend bool operator==(const DataRef&, const DataRef&) = default;
};

struct CropRecord {
  std::string crop_id;
  std::string source_image_id;
  std::string bag_id;
  DataRef data_ref;
  std::optional<std::string> true_identity;  // diagnostics / eval only
  std::optional<std::string> camera_id;

  friend bool operator==(const CropRecord&, const CropRecord&) = default;
};

struct BagRecord {
  std::string bag_id;
  std::string label;
  std::vector<std::string> crop_ids;

  friend bool operator==(const BagRecord&, const BagRecord&) = default;
};

struct DatasetManifest {
  std::vector<BagRecord> bags;
  std::vector<CropRecord> crops;
  std::map<std::string, std::string> metadata;

  /// Count of distinct bag labels.
  std::size_t num_identities() const;
  /// Distinct labels in first-appearance order.
  std::vector<std::string> labels() const;

  const BagRecord* find_bag(const std::string& bag_id) const;
  const CropRecord* find_crop(const std::string& crop_id) const;

  friend bool operator==(const DatasetManifest&,
                         const DatasetManifest&) = default;
};

/// Synthetic weak-label construction: every crop is kept in its correct bag
/// and duplicated `duplication_factor` times into bags with a different
/// label, which drives the mislabeled fraction to k/(k+1).
struct NoiseSpec {
  int duplication_factor = 1;  // k >= 1
  std::uint64_t seed = 0;

  double target_noise() const {
    return static_cast<double>(duplication_factor) /
           (duplication_factor + 1.0);
  }
};

struct BagStatistics {
  double mean_bag_size = 0.0;
  std::size_t min_bag_size = 0;
  std::size_t max_bag_size = 0;
  // Noise fields are filled only when every crop carries true_identity.
  bool has_noise = false;
  double mean_noise = 0.0;  // fraction of crops mislabeled, crop-weighted
  std::vector<double> per_bag_noise;
};

struct Violation {
  std::string entity;  // offending id
  std::string rule;
  std::string message;
};

/// Empty iff all manifest invariants hold.
std::vector<Violation> validate_manifest(const DatasetManifest& m);

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& m, const std::string& path);

/// Canonical JSON form (also the on-disk format).
std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

/// Duplicates each crop of a strongly labeled manifest (bag label == true
/// identity for all crops) k times into uniformly chosen bags with a
/// different label. Duplicate ids get a "#dupN" suffix.
DatasetManifest generate_synthetic_weak_labels(const DatasetManifest& strong,
                                               const NoiseSpec& spec);

BagStatistics compute_bag_statistics(const DatasetManifest& m);

/// Splits by bag label: all bags of one identity land on one side.
/// Deterministic under seed; each side receives at least one label.
std::pair<DatasetManifest, DatasetManifest> split_dataset(
    const DatasetManifest& m, double train_fraction, double val_fraction,
    std::uint64_t seed);

/// Inline-vector crops stacked into a matrix, rows in crop-list order.
struct FeatureTable {
  Matrix features;                        // num_crops x dim
  std::map<std::string, std::size_t> row_of_crop;

  std::span<const double> row_for(const std::string& crop_id) const;
};

/// Fails for path-modality datasets: compute paths need inline vectors.
FeatureTable build_feature_table(const DatasetManifest& m);

}  // namespace cmil::data
