#pragma once

#include <string>

#include "cmil/error.hpp"

namespace cmil {

enum class DistanceKind { kEuclidean, kCosine };

inline std::string to_string(DistanceKind kind) {
  return kind == DistanceKind::kEuclidean ? "euclidean" : "cosine";
}

inline DistanceKind distance_from_string(const std::string& s) {
  if (s == "euclidean") return DistanceKind::kEuclidean;
  if (s == "cosine") return DistanceKind::kCosine;
  throw ConfigError("unknown distance '" + s + "' (euclidean|cosine)");
}

}  // namespace cmil
