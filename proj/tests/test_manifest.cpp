#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cmil/error.hpp"
#include "cmil/manifest.hpp"
#include "testutil.hpp"

using namespace cmil;
using namespace cmil::data;

namespace {

DatasetManifest two_bag_manifest() {
  DatasetManifest m;
  m.bags.push_back({"b1", "alice", {"c1", "c2"}});
  m.bags.push_back({"b2", "bob", {"c3"}});
  CropRecord c1{"c1", "img1", "b1", {}, "alice", std::nullopt};
  c1.data_ref.vector = Vec{1.0, 2.0};
  CropRecord c2{"c2", "img2", "b1", {}, "bob", "cam0"};
  c2.data_ref.vector = Vec{3.0, 4.0};
  CropRecord c3{"c3", "img3", "b2", {}, "bob", std::nullopt};
  c3.data_ref.vector = Vec{5.0, 6.0};
  m.crops = {c1, c2, c3};
  m.metadata["source"] = "unit-test";
  return m;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("well-formed manifest round-trips through a file") {
  const DatasetManifest m = two_bag_manifest();
  const std::string path = temp_path("cmil_manifest_roundtrip.json");
  save_manifest(m, path);
  const DatasetManifest loaded = load_manifest(path);
  CHECK(loaded.bags.size() == 2);
  CHECK(loaded == m);
  CHECK(loaded.num_identities() == 2);
  std::remove(path.c_str());
}

TEST_CASE("missing crop reference is named in the error") {
  DatasetManifest m = two_bag_manifest();
  m.bags[1].crop_ids.push_back("c9");
  const auto violations = validate_manifest(m);
  REQUIRE(!violations.empty());
  bool found = false;
  for (const auto& v : violations)
    if (v.entity == "c9" && v.rule == "crop_exists") found = true;
  CHECK(found);

  const std::string path = temp_path("cmil_manifest_badref.json");
  {
    std::ofstream out(path);
    out << manifest_to_json(m);
  }
  CHECK_THROWS_WITH_AS(load_manifest(path),
                       doctest::Contains("c9"), ValidationError);
  std::remove(path.c_str());
}

TEST_CASE("save-load-save is byte stable on a random 100-bag manifest") {
  Rng rng(123);
  const DatasetManifest m = testutil::random_manifest(25, 6, 3, rng);
  REQUIRE(m.bags.size() >= 25);
  const std::string s1 = manifest_to_json(m);
  const DatasetManifest loaded = manifest_from_json(s1);
  const std::string s2 = manifest_to_json(loaded);
  CHECK(s1 == s2);
  CHECK(loaded == m);
}

TEST_CASE("parse errors carry a line number") {
  const std::string path = temp_path("cmil_manifest_parse.json");
  {
    std::ofstream out(path);
    out << "{\n  \"bags\": [\n  oops\n";
  }
  try {
    load_manifest(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line == 3);
  }
  std::remove(path.c_str());
}

TEST_CASE("validator catches the spec'd violations") {
  SUBCASE("valid") { CHECK(validate_manifest(two_bag_manifest()).empty()); }
  SUBCASE("empty crop_ids") {
    DatasetManifest m = two_bag_manifest();
    m.bags.push_back({"b3", "carol", {}});
    const auto v = validate_manifest(m);
    REQUIRE(v.size() == 1);
    CHECK(v[0].rule == "crop_ids_nonempty");
  }
  SUBCASE("duplicate crop ids") {
    DatasetManifest m = two_bag_manifest();
    CropRecord dup = m.crops[2];
    m.crops.push_back(dup);
    int count = 0;
    for (const auto& v : validate_manifest(m))
      if (v.rule == "crop_id_unique") ++count;
    CHECK(count == 1);
  }
  SUBCASE("empty label") {
    DatasetManifest m = two_bag_manifest();
    m.bags[0].label = "";
    bool found = false;
    for (const auto& v : validate_manifest(m))
      if (v.rule == "label_nonempty") found = true;
    CHECK(found);
  }
  SUBCASE("mixed modality") {
    DatasetManifest m = two_bag_manifest();
    m.crops[0].data_ref.vector.reset();
    m.crops[0].data_ref.path = "a.png";
    bool found = false;
    for (const auto& v : validate_manifest(m))
      if (v.rule == "data_ref_modality") found = true;
    CHECK(found);
  }
}

TEST_CASE("noise generator hits its target fraction exactly") {
  Rng rng(5);
  const DatasetManifest strong =
      testutil::gaussian_strong_manifest(20, 1, 50, 4, 0.1, 99);
  REQUIRE(strong.crops.size() == 1000);

  for (int kk : {1, 2, 3}) {
    NoiseSpec spec;
    spec.duplication_factor = kk;
    spec.seed = 7 + kk;
    const double target = static_cast<double>(kk) / (kk + 1.0);
    CHECK(spec.target_noise() == doctest::Approx(target));

    const DatasetManifest weak = generate_synthetic_weak_labels(strong, spec);
    CHECK(validate_manifest(weak).empty());
    CHECK(weak.crops.size() == strong.crops.size() * (kk + 1));

    const BagStatistics stats = compute_bag_statistics(weak);
    REQUIRE(stats.has_noise);
    CHECK(std::abs(stats.mean_noise - target) <= 0.02);
  }
}

TEST_CASE("duplicates never land in a bag matching their identity") {
  const DatasetManifest strong =
      testutil::gaussian_strong_manifest(5, 2, 10, 3, 0.1, 3);
  NoiseSpec spec;
  spec.duplication_factor = 2;
  spec.seed = 11;
  const DatasetManifest weak = generate_synthetic_weak_labels(strong, spec);
  for (const auto& crop : weak.crops) {
    if (crop.crop_id.find("#dup") == std::string::npos) continue;
    const BagRecord* bag = weak.find_bag(crop.bag_id);
    REQUIRE(bag != nullptr);
    CHECK(bag->label != *crop.true_identity);
  }
}

TEST_CASE("noise generation requires a second identity") {
  const DatasetManifest strong =
      testutil::gaussian_strong_manifest(1, 2, 5, 3, 0.1, 3);
  NoiseSpec spec;
  spec.duplication_factor = 1;
  CHECK_THROWS_AS(generate_synthetic_weak_labels(strong, spec),
                  ValidationError);
}

TEST_CASE("bag statistics: sizes and per-bag noise") {
  DatasetManifest m;
  m.bags.push_back({"b1", "x", {"c1", "c2"}});
  m.bags.push_back({"b2", "x", {"c3", "c4", "c5", "c6"}});
  const auto mk = [](const std::string& id, const std::string& bag,
                     const std::string& truth) {
    CropRecord c{id, "img", bag, {}, truth, std::nullopt};
    c.data_ref.vector = Vec{0.0};
    return c;
  };
  m.crops = {mk("c1", "b1", "x"), mk("c2", "b1", "x"),
             mk("c3", "b2", "x"), mk("c4", "b2", "x"),
             mk("c5", "b2", "x"), mk("c6", "b2", "y")};
  const BagStatistics stats = compute_bag_statistics(m);
  CHECK(stats.mean_bag_size == doctest::Approx(3.0));
  CHECK(stats.min_bag_size == 2);
  CHECK(stats.max_bag_size == 4);
  REQUIRE(stats.has_noise);
  CHECK(stats.per_bag_noise[0] == doctest::Approx(0.0));
  CHECK(stats.per_bag_noise[1] == doctest::Approx(0.25));
}

TEST_CASE("noise fields absent without true identities") {
  DatasetManifest m = two_bag_manifest();
  m.crops[1].true_identity.reset();
  const BagStatistics stats = compute_bag_statistics(m);
  CHECK(!stats.has_noise);
  CHECK(stats.per_bag_noise.empty());
}

TEST_CASE("split_dataset: disjoint labels, preserved bags, determinism") {
  Rng rng(21);
  const DatasetManifest m = testutil::random_manifest(10, 5, 3, rng);
  const auto [train, val] = split_dataset(m, 0.8, 0.2, 17);

  std::set<std::string> train_labels, val_labels;
  for (const auto& b : train.bags) train_labels.insert(b.label);
  for (const auto& b : val.bags) val_labels.insert(b.label);
  CHECK(train_labels.size() == 8);
  CHECK(val_labels.size() == 2);
  for (const auto& l : val_labels) CHECK(!train_labels.count(l));
  CHECK(train.bags.size() + val.bags.size() == m.bags.size());
  CHECK(train.crops.size() + val.crops.size() == m.crops.size());
  CHECK(validate_manifest(train).empty());
  CHECK(validate_manifest(val).empty());

  const auto [train2, val2] = split_dataset(m, 0.8, 0.2, 17);
  CHECK(train2 == train);
  CHECK(val2 == val);
}

TEST_CASE("split rounding keeps at least one label per side") {
  for (std::size_t labels = 2; labels <= 12; ++labels) {
    Rng rng(labels);
    const DatasetManifest m = testutil::random_manifest(labels, 3, 2, rng);
    const auto [train, val] = split_dataset(m, 0.99, 0.01, 5);
    std::set<std::string> tl, vl;
    for (const auto& b : train.bags) tl.insert(b.label);
    for (const auto& b : val.bags) vl.insert(b.label);
    CHECK(tl.size() >= 1);
    CHECK(vl.size() >= 1);
    CHECK(tl.size() + vl.size() == labels);
  }
}

TEST_CASE("split fraction validation") {
  Rng rng(3);
  const DatasetManifest m = testutil::random_manifest(4, 3, 2, rng);
  CHECK_THROWS_AS(split_dataset(m, 0.7, 0.2, 1), ConfigError);
  CHECK_THROWS_AS(split_dataset(m, 1.0, 0.0, 1), ConfigError);
}
