#pragma once

// Shared dataset builders for the unit and acceptance suites.

#include <string>
#include <vector>

#include "cmil/manifest.hpp"
#include "cmil/rng.hpp"

namespace testutil {

using cmil::Rng;
using cmil::Vec;
using cmil::data::BagRecord;
using cmil::data::CropRecord;
using cmil::data::DatasetManifest;

/// Strongly labeled manifest: `bags_per_identity` bags per identity, each
/// with `crops_per_bag` crops drawn from a Gaussian cluster around that
/// identity's center. Bag label == true identity everywhere.
inline DatasetManifest gaussian_strong_manifest(std::size_t num_identities,
                                                std::size_t bags_per_identity,
                                                std::size_t crops_per_bag,
                                                std::size_t dim, double sigma,
                                                std::uint64_t seed) {
  DatasetManifest m;
  Rng rng(seed);
  std::vector<Vec> centers(num_identities, Vec(dim));
  for (auto& c : centers)
    for (auto& x : c) x = rng.gaussian();

  for (std::size_t id = 0; id < num_identities; ++id) {
    const std::string identity = "id" + std::to_string(id);
    for (std::size_t b = 0; b < bags_per_identity; ++b) {
      BagRecord bag;
      bag.bag_id = identity + "_bag" + std::to_string(b);
      bag.label = identity;
      for (std::size_t c = 0; c < crops_per_bag; ++c) {
        CropRecord crop;
        crop.crop_id = bag.bag_id + "_crop" + std::to_string(c);
        crop.source_image_id = "img_" + crop.crop_id;
        crop.bag_id = bag.bag_id;
        Vec v(dim);
        for (std::size_t d = 0; d < dim; ++d)
          v[d] = centers[id][d] + sigma * rng.gaussian();
        crop.data_ref.vector = std::move(v);
        crop.true_identity = identity;
        bag.crop_ids.push_back(crop.crop_id);
        m.crops.push_back(std::move(crop));
      }
      m.bags.push_back(std::move(bag));
    }
  }
  return m;
}

/// Arbitrary-shape random manifest for property tests: labels with 1..4
/// bags each, bag sizes 1..max_bag_size, vector crops of width dim.
inline DatasetManifest random_manifest(std::size_t num_labels,
                                       std::size_t max_bag_size,
                                       std::size_t dim, Rng& rng) {
  DatasetManifest m;
  for (std::size_t l = 0; l < num_labels; ++l) {
    const std::string label = "L" + std::to_string(l);
    const std::size_t bags = 1 + rng.bounded(4);
    for (std::size_t b = 0; b < bags; ++b) {
      BagRecord bag;
      bag.bag_id = label + "b" + std::to_string(b);
      bag.label = label;
      const std::size_t size = 1 + rng.bounded(max_bag_size);
      for (std::size_t c = 0; c < size; ++c) {
        CropRecord crop;
        crop.crop_id = bag.bag_id + "c" + std::to_string(c);
        crop.source_image_id = "src" + crop.crop_id;
        crop.bag_id = bag.bag_id;
        Vec v(dim);
        for (auto& x : v) x = rng.gaussian();
        crop.data_ref.vector = std::move(v);
        crop.true_identity = label;
        bag.crop_ids.push_back(crop.crop_id);
        m.crops.push_back(std::move(crop));
      }
      m.bags.push_back(std::move(bag));
    }
  }
  return m;
}

inline cmil::Matrix random_matrix(std::size_t rows, std::size_t cols,
                                  Rng& rng, double scale = 1.0) {
  cmil::Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      m(i, j) = scale * rng.gaussian();
  return m;
}

}  // namespace testutil
