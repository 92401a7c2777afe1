#include "cmil/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "cmil/error.hpp"
#include "cmil/rng.hpp"

namespace cmil::data {

using ordered_json = nlohmann::ordered_json;

std::size_t DatasetManifest::num_identities() const {
  std::set<std::string> distinct;
  for (const auto& bag : bags) distinct.insert(bag.label);
  return distinct.size();
}

std::vector<std::string> DatasetManifest::labels() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& bag : bags) {
    if (seen.insert(bag.label).second) out.push_back(bag.label);
  }
  return out;
}

const BagRecord* DatasetManifest::find_bag(const std::string& bag_id) const {
  for (const auto& bag : bags)
    if (bag.bag_id == bag_id) return &bag;
  return nullptr;
}

const CropRecord* DatasetManifest::find_crop(
    const std::string& crop_id) const {
  for (const auto& crop : crops)
    if (crop.crop_id == crop_id) return &crop;
  return nullptr;
}

std::vector<Violation> validate_manifest(const DatasetManifest& m) {
  std::vector<Violation> out;
  const auto add = [&out](const std::string& entity, const std::string& rule,
                          const std::string& message) {
    out.push_back({entity, rule, message});
  };

  std::unordered_map<std::string, const CropRecord*> crop_index;
  for (const auto& crop : m.crops) {
    if (!crop_index.emplace(crop.crop_id, &crop).second)
      add(crop.crop_id, "crop_id_unique",
          "duplicate crop_id '" + crop.crop_id + "'");
  }
  std::unordered_map<std::string, const BagRecord*> bag_index;
  for (const auto& bag : m.bags) {
    if (!bag_index.emplace(bag.bag_id, &bag).second)
      add(bag.bag_id, "bag_id_unique",
          "duplicate bag_id '" + bag.bag_id + "'");
  }

  for (const auto& bag : m.bags) {
    if (bag.label.empty())
      add(bag.bag_id, "label_nonempty",
          "bag '" + bag.bag_id + "' has an empty label");
    if (bag.crop_ids.empty())
      add(bag.bag_id, "crop_ids_nonempty",
          "bag '" + bag.bag_id + "' has no crops");
    std::unordered_set<std::string> seen;
    for (const auto& cid : bag.crop_ids) {
      if (!seen.insert(cid).second)
        add(bag.bag_id, "crop_ids_unique",
            "bag '" + bag.bag_id + "' lists crop '" + cid + "' twice");
      auto it = crop_index.find(cid);
      if (it == crop_index.end()) {
        add(cid, "crop_exists",
            "bag '" + bag.bag_id + "' references missing crop '" + cid + "'");
      } else if (it->second->bag_id != bag.bag_id) {
        add(cid, "bag_backreference",
            "crop '" + cid + "' is listed in bag '" + bag.bag_id +
                "' but points at bag '" + it->second->bag_id + "'");
      }
    }
  }

  bool any_path = false;
  bool any_vector = false;
  std::optional<std::size_t> dim;
  for (const auto& crop : m.crops) {
    auto it = bag_index.find(crop.bag_id);
    if (it == bag_index.end()) {
      add(crop.crop_id, "bag_exists",
          "crop '" + crop.crop_id + "' references missing bag '" +
              crop.bag_id + "'");
    } else {
      const auto& ids = it->second->crop_ids;
      if (std::find(ids.begin(), ids.end(), crop.crop_id) == ids.end())
        add(crop.crop_id, "bag_membership",
            "crop '" + crop.crop_id + "' points at bag '" + crop.bag_id +
                "' which does not list it");
    }
    if (crop.data_ref.is_path() == crop.data_ref.is_vector())
      add(crop.crop_id, "data_ref_modality",
          "crop '" + crop.crop_id +
              "' must carry exactly one of path or vector");
    any_path |= crop.data_ref.is_path();
    any_vector |= crop.data_ref.is_vector();
    if (crop.data_ref.is_vector()) {
      const std::size_t n = crop.data_ref.vector->size();
      if (!dim) dim = n;
      if (*dim != n)
        add(crop.crop_id, "data_ref_shape",
            "crop '" + crop.crop_id + "' has vector length " +
                std::to_string(n) + ", expected " + std::to_string(*dim));
    }
  }
  if (any_path && any_vector)
    add("<dataset>", "data_ref_modality",
        "dataset mixes path and vector data_refs");

  return out;
}

namespace {

ordered_json manifest_to_ordered_json(const DatasetManifest& m) {
  ordered_json j;
  j["bags"] = ordered_json::array();
  for (const auto& bag : m.bags) {
    ordered_json jb;
    jb["bag_id"] = bag.bag_id;
    jb["label"] = bag.label;
    jb["crop_ids"] = bag.crop_ids;
    j["bags"].push_back(std::move(jb));
  }
  j["crops"] = ordered_json::array();
  for (const auto& crop : m.crops) {
    ordered_json jc;
    jc["crop_id"] = crop.crop_id;
    jc["source_image_id"] = crop.source_image_id;
    jc["bag_id"] = crop.bag_id;
    ordered_json ref;
    if (crop.data_ref.is_path()) {
      ref["path"] = *crop.data_ref.path;
    } else if (crop.data_ref.is_vector()) {
      ref["vector"] = *crop.data_ref.vector;
    }
    jc["data_ref"] = std::move(ref);
    if (crop.true_identity) jc["true_identity"] = *crop.true_identity;
    if (crop.camera_id) jc["camera_id"] = *crop.camera_id;
    j["crops"].push_back(std::move(jc));
  }
  j["metadata"] = ordered_json::object();
  for (const auto& [k, v] : m.metadata) j["metadata"][k] = v;
  return j;
}

int line_of_byte(const std::string& text, std::size_t byte) {
  int line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

std::string required_string(const ordered_json& j, const char* key,
                            const char* context) {
  if (!j.contains(key) || !j[key].is_string())
    throw ParseError(std::string(context) + " is missing string field '" +
                     key + "'");
  return j[key].get<std::string>();
}

}  // namespace

std::string manifest_to_json(const DatasetManifest& m) {
  return manifest_to_ordered_json(m).dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("manifest parse error at line " +
                         std::to_string(line_of_byte(text, e.byte)) + ": " +
                         e.what(),
                     line_of_byte(text, e.byte));
  }
  if (!j.is_object() || !j.contains("bags") || !j.contains("crops"))
    throw ParseError("manifest must be an object with 'bags' and 'crops'");

  DatasetManifest m;
  for (const auto& jb : j["bags"]) {
    BagRecord bag;
    bag.bag_id = required_string(jb, "bag_id", "bag");
    bag.label = required_string(jb, "label", "bag");
    if (!jb.contains("crop_ids") || !jb["crop_ids"].is_array())
      throw ParseError("bag '" + bag.bag_id + "' is missing crop_ids");
    for (const auto& cid : jb["crop_ids"])
      bag.crop_ids.push_back(cid.get<std::string>());
    m.bags.push_back(std::move(bag));
  }
  for (const auto& jc : j["crops"]) {
    CropRecord crop;
    crop.crop_id = required_string(jc, "crop_id", "crop");
    crop.source_image_id = required_string(jc, "source_image_id", "crop");
    crop.bag_id = required_string(jc, "bag_id", "crop");
    if (!jc.contains("data_ref") || !jc["data_ref"].is_object())
      throw ParseError("crop '" + crop.crop_id + "' is missing data_ref");
    const auto& ref = jc["data_ref"];
    if (ref.contains("path")) crop.data_ref.path = ref["path"].get<std::string>();
    if (ref.contains("vector")) crop.data_ref.vector = ref["vector"].get<Vec>();
    if (jc.contains("true_identity"))
      crop.true_identity = jc["true_identity"].get<std::string>();
    if (jc.contains("camera_id"))
      crop.camera_id = jc["camera_id"].get<std::string>();
    m.crops.push_back(std::move(crop));
  }
  if (j.contains("metadata")) {
    for (const auto& [k, v] : j["metadata"].items())
      m.metadata[k] = v.get<std::string>();
  }

  const auto violations = validate_manifest(m);
  if (!violations.empty()) {
    std::ostringstream oss;
    oss << "manifest failed validation (" << violations.size()
        << " violation(s)); first: [" << violations.front().entity << "] "
        << violations.front().message;
    throw ValidationError(oss.str());
  }
  return m;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return manifest_from_json(buf.str());
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest '" + path + "'");
  out << manifest_to_json(m);
}

DatasetManifest generate_synthetic_weak_labels(const DatasetManifest& strong,
                                               const NoiseSpec& spec) {
  if (spec.duplication_factor < 1)
    throw ConfigError("duplication_factor must be >= 1");
  for (const auto& crop : strong.crops) {
    if (!crop.true_identity)
      throw ValidationError("crop '" + crop.crop_id +
                            "' lacks true_identity; need a strong manifest");
  }
  if (strong.num_identities() < 2)
    throw ValidationError(
        "need at least 2 distinct identities to assign duplicates to a "
        "different label");

  DatasetManifest out = strong;
  std::unordered_map<std::string, std::size_t> bag_pos;
  for (std::size_t i = 0; i < out.bags.size(); ++i)
    bag_pos[out.bags[i].bag_id] = i;

  Rng rng(spec.seed);
  const std::size_t original_count = strong.crops.size();
  for (std::size_t i = 0; i < original_count; ++i) {
    const CropRecord& src = strong.crops[i];
    // Candidate target bags: any bag whose label differs from the crop's
    // true identity. Uniform over bags, per the construction.
    std::vector<std::size_t> candidates;
    for (std::size_t b = 0; b < strong.bags.size(); ++b)
      if (strong.bags[b].label != *src.true_identity) candidates.push_back(b);
    if (candidates.empty())
      throw ValidationError("no bag with a different label exists for crop '" +
                            src.crop_id + "'");
    for (int d = 1; d <= spec.duplication_factor; ++d) {
      CropRecord dup = src;
      dup.crop_id = src.crop_id + "#dup" + std::to_string(d);
      const std::size_t target =
          candidates[rng.bounded(candidates.size())];
      dup.bag_id = strong.bags[target].bag_id;
      out.bags[bag_pos[dup.bag_id]].crop_ids.push_back(dup.crop_id);
      out.crops.push_back(std::move(dup));
    }
  }
  return out;
}

BagStatistics compute_bag_statistics(const DatasetManifest& m) {
  BagStatistics stats;
  if (m.bags.empty()) return stats;

  std::size_t total = 0;
  stats.min_bag_size = m.bags.front().crop_ids.size();
  stats.max_bag_size = stats.min_bag_size;
  for (const auto& bag : m.bags) {
    const std::size_t n = bag.crop_ids.size();
    total += n;
    stats.min_bag_size = std::min(stats.min_bag_size, n);
    stats.max_bag_size = std::max(stats.max_bag_size, n);
  }
  stats.mean_bag_size = static_cast<double>(total) / m.bags.size();

  stats.has_noise = !m.crops.empty() &&
                    std::all_of(m.crops.begin(), m.crops.end(),
                                [](const CropRecord& c) {
                                  return c.true_identity.has_value();
                                });
  if (!stats.has_noise) return stats;

  std::unordered_map<std::string, const CropRecord*> crop_index;
  for (const auto& crop : m.crops) crop_index[crop.crop_id] = &crop;

  std::size_t mislabeled = 0;
  std::size_t counted = 0;
  for (const auto& bag : m.bags) {
    std::size_t bag_mislabeled = 0;
    for (const auto& cid : bag.crop_ids) {
      const CropRecord* crop = crop_index.at(cid);
      if (*crop->true_identity != bag.label) ++bag_mislabeled;
    }
    stats.per_bag_noise.push_back(
        bag.crop_ids.empty()
            ? 0.0
            : static_cast<double>(bag_mislabeled) / bag.crop_ids.size());
    mislabeled += bag_mislabeled;
    counted += bag.crop_ids.size();
  }
  stats.mean_noise =
      counted == 0 ? 0.0 : static_cast<double>(mislabeled) / counted;
  return stats;
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(
    const DatasetManifest& m, double train_fraction, double val_fraction,
    std::uint64_t seed) {
  if (train_fraction <= 0.0 || val_fraction <= 0.0)
    throw ConfigError("split fractions must be positive");
  if (std::abs(train_fraction + val_fraction - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");

  std::vector<std::string> labels = m.labels();
  std::sort(labels.begin(), labels.end());
  if (labels.size() < 2)
    throw ValidationError(
        "cannot split by label: a side would receive zero labels");

  Rng rng(seed);
  rng.shuffle(labels);

  // Round half away from zero, then clamp so both sides keep >= 1 label.
  const double want = train_fraction * static_cast<double>(labels.size());
  std::size_t n_train = static_cast<std::size_t>(std::llround(want));
  n_train = std::clamp<std::size_t>(n_train, 1, labels.size() - 1);

  std::unordered_set<std::string> train_labels(labels.begin(),
                                               labels.begin() + n_train);

  DatasetManifest train, val;
  train.metadata = m.metadata;
  val.metadata = m.metadata;
  std::unordered_set<std::string> train_bags, val_bags;
  for (const auto& bag : m.bags) {
    if (train_labels.count(bag.label)) {
      train.bags.push_back(bag);
      train_bags.insert(bag.bag_id);
    } else {
      val.bags.push_back(bag);
      val_bags.insert(bag.bag_id);
    }
  }
  for (const auto& crop : m.crops) {
    if (train_bags.count(crop.bag_id)) {
      train.crops.push_back(crop);
    } else {
      val.crops.push_back(crop);
    }
  }
  return {std::move(train), std::move(val)};
}

std::span<const double> FeatureTable::row_for(
    const std::string& crop_id) const {
  auto it = row_of_crop.find(crop_id);
  if (it == row_of_crop.end())
    throw ValidationError("unknown crop_id '" + crop_id + "'");
  return features.row(it->second);
}

FeatureTable build_feature_table(const DatasetManifest& m) {
  if (m.crops.empty()) throw ValidationError("manifest has no crops");
  if (!m.crops.front().data_ref.is_vector())
    throw ValidationError(
        "path data_refs need an external feature pipeline; compute "
        "operations require inline vectors");
  const std::size_t dim = m.crops.front().data_ref.vector->size();
  FeatureTable table;
  table.features = Matrix(m.crops.size(), dim);
  for (std::size_t i = 0; i < m.crops.size(); ++i) {
    const auto& crop = m.crops[i];
    if (!crop.data_ref.is_vector() || crop.data_ref.vector->size() != dim)
      throw ValidationError("crop '" + crop.crop_id +
                            "' does not match the dataset feature shape");
    table.features.set_row(i, *crop.data_ref.vector);
    table.row_of_crop[crop.crop_id] = i;
  }
  return table;
}

}  // namespace cmil::data
