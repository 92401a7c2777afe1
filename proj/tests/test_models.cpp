#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "cmil/error.hpp"
#include "cmil/models.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace cmil;
using namespace cmil::models;

namespace {

ExtractorConfig mlp_config(std::size_t in, std::size_t dim,
                           bool feature_norm = false) {
  ExtractorConfig cfg;
  cfg.kind = ExtractorKind::kToyMlp;
  cfg.input_shape = {in};
  cfg.embed_dim = dim;
  cfg.hidden_sizes = {6, 5};
  cfg.feature_norm = feature_norm;
  return cfg;
}

AccumulatorConfig st_config(std::size_t heads = 2) {
  AccumulatorConfig cfg;
  cfg.kind = AccumulatorKind::kSetTransformer;
  cfg.st_layers = 2;
  cfg.st_heads = heads;
  return cfg;
}

/// A scalar readout sum(w .* r) to drive gradient checks through the
/// accumulator; w fixed per test.
double weighted_readout(const Vec& r, const Vec& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) acc += r[i] * w[i];
  return acc;
}

}  // namespace

TEST_CASE("extractor determinism and feature_norm") {
  Rng rng(1);
  const auto cfg = mlp_config(5, 4, true);
  Extractor ext(cfg);
  Vec theta(ext.param_count());
  ext.init_params(theta, rng);

  const Matrix x = testutil::random_matrix(7, 5, rng);
  const Matrix z1 = ext.forward(x, theta);
  const Matrix z2 = ext.forward(x, theta);
  for (std::size_t i = 0; i < z1.size(); ++i)
    CHECK(z1.data()[i] == z2.data()[i]);

  for (std::size_t i = 0; i < z1.rows(); ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < z1.cols(); ++j)
      norm += z1(i, j) * z1(i, j);
    CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-6);
  }

  // Identical inputs map to identical embeddings.
  Matrix same(2, 5);
  same.set_row(0, x.row(3));
  same.set_row(1, x.row(3));
  const Matrix zs = ext.forward(same, theta);
  for (std::size_t j = 0; j < zs.cols(); ++j)
    CHECK(zs(0, j) == zs(1, j));
}

TEST_CASE("zero-parameter mlp maps to the zero vector pre-norm") {
  const auto cfg = mlp_config(3, 4, false);
  Extractor ext(cfg);
  Vec theta(ext.param_count(), 0.0);
  Rng rng(2);
  const Matrix x = testutil::random_matrix(2, 3, rng);
  const Matrix z = ext.forward(x, theta);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z.data()[i] == 0.0);
}

TEST_CASE("extractor rejects shape mismatches") {
  Extractor ext(mlp_config(5, 4));
  Rng rng(3);
  Vec theta(ext.param_count());
  ext.init_params(theta, rng);
  const Matrix bad = testutil::random_matrix(2, 6, rng);
  CHECK_THROWS_AS(ext.forward(bad, theta), ValidationError);
}

TEST_CASE("mean / max / sum accumulators: exact values") {
  AccumulatorConfig cfg;
  Matrix z(2, 2);
  z(0, 0) = 1.0;
  z(0, 1) = 1.0;
  z(1, 0) = 3.0;
  z(1, 1) = 3.0;

  cfg.kind = AccumulatorKind::kMean;
  Accumulator mean(cfg, 2);
  CHECK(mean.forward(z, {}) == Vec{2.0, 2.0});

  Matrix z2(2, 2);
  z2(0, 0) = 1.0;
  z2(0, 1) = 4.0;
  z2(1, 0) = 3.0;
  z2(1, 1) = 2.0;
  cfg.kind = AccumulatorKind::kMax;
  Accumulator mx(cfg, 2);
  CHECK(mx.forward(z2, {}) == Vec{3.0, 4.0});

  cfg.kind = AccumulatorKind::kSum;
  Accumulator sum(cfg, 2);
  CHECK(sum.forward(z, {}) == Vec{4.0, 4.0});

  // Singleton sets pass through unchanged.
  Matrix single(1, 2);
  single(0, 0) = -1.5;
  single(0, 1) = 2.5;
  for (auto kind :
       {AccumulatorKind::kMean, AccumulatorKind::kMax, AccumulatorKind::kSum}) {
    cfg.kind = kind;
    Accumulator acc(cfg, 2);
    CHECK(acc.forward(single, {}) == Vec{-1.5, 2.5});
  }

  cfg.kind = AccumulatorKind::kMean;
  Accumulator empty_check(cfg, 2);
  Matrix empty(0, 2);
  CHECK_THROWS_AS(empty_check.forward(empty, {}), ValidationError);
}

TEST_CASE("permutation invariance: 50 permutations per accumulator") {
  Rng rng(4);
  const std::size_t dim = 6;
  const Matrix z = testutil::random_matrix(11, dim, rng);

  std::vector<std::size_t> perm(z.rows());
  std::iota(perm.begin(), perm.end(), 0);

  for (auto kind : {AccumulatorKind::kMean, AccumulatorKind::kMax,
                    AccumulatorKind::kSum, AccumulatorKind::kSetTransformer}) {
    AccumulatorConfig cfg = st_config();
    cfg.kind = kind;
    Accumulator acc(cfg, dim);
    Vec phi(acc.param_count());
    acc.init_params(phi, rng);
    const Vec base = acc.forward(z, phi);
    const double tol =
        kind == AccumulatorKind::kSetTransformer ? 1e-5 : 1e-12;
    for (int t = 0; t < 50; ++t) {
      rng.shuffle(perm);
      Matrix shuffled(z.rows(), dim);
      for (std::size_t i = 0; i < z.rows(); ++i)
        shuffled.set_row(i, z.row(perm[i]));
      const Vec r = acc.forward(shuffled, phi);
      for (std::size_t j = 0; j < dim; ++j)
        CHECK(std::abs(r[j] - base[j]) <= tol);
    }
  }
}

TEST_CASE("set transformer: duplicated element equals singleton") {
  Rng rng(5);
  const std::size_t dim = 6;
  Accumulator acc(st_config(), dim);
  Vec phi(acc.param_count());
  acc.init_params(phi, rng);

  for (int t = 0; t < 10; ++t) {
    Matrix v(1, dim);
    for (std::size_t j = 0; j < dim; ++j) v(0, j) = rng.gaussian();
    Matrix vv(2, dim);
    vv.set_row(0, v.row(0));
    vv.set_row(1, v.row(0));
    const Vec r1 = acc.forward(v, phi);
    const Vec r2 = acc.forward(vv, phi);
    for (std::size_t j = 0; j < dim; ++j)
      CHECK(std::abs(r1[j] - r2[j]) <= 1e-5);
  }
}

TEST_CASE("set transformer gradients match finite differences") {
  Rng rng(6);
  const std::size_t dim = 4;
  AccumulatorConfig cfg = st_config(2);
  Accumulator acc(cfg, dim);
  Vec phi(acc.param_count());
  acc.init_params(phi, rng);

  const Matrix z = testutil::random_matrix(3, dim, rng);
  Vec readout(dim);
  for (auto& w : readout) w = rng.gaussian();

  const auto loss = [&]() {
    return weighted_readout(acc.forward(z, phi), readout);
  };

  // Analytic gradient w.r.t. phi.
  Accumulator::Cache cache;
  acc.forward(z, phi, &cache);
  Vec grad_phi(phi.size(), 0.0);
  Matrix grad_z(z.rows(), dim, 0.0);
  acc.backward(z, cache, readout, phi, grad_phi, grad_z);

  const auto result = oracle::compare_gradients(phi, loss, grad_phi);
  CAPTURE(result.worst_index);
  CAPTURE(result.analytic);
  CAPTURE(result.numeric);
  CHECK(result.max_rel_error <= 1e-4);

  // And w.r.t. the input embeddings.
  Vec z_flat(z.data(), z.data() + z.size());
  const auto loss_z = [&]() {
    Matrix zz(z.rows(), z.cols());
    std::copy(z_flat.begin(), z_flat.end(), zz.data());
    return weighted_readout(acc.forward(zz, phi), readout);
  };
  Vec grad_z_flat(grad_z.data(), grad_z.data() + grad_z.size());
  const auto rz = oracle::compare_gradients(z_flat, loss_z, grad_z_flat);
  CHECK(rz.max_rel_error <= 1e-4);
}

TEST_CASE("extractor gradients match finite differences") {
  Rng rng(7);
  for (bool feature_norm : {false, true}) {
    const auto cfg = mlp_config(5, 4, feature_norm);
    Extractor ext(cfg);
    Vec theta(ext.param_count());
    ext.init_params(theta, rng);
    const Matrix x = testutil::random_matrix(3, 5, rng);
    const Matrix readout = testutil::random_matrix(3, 4, rng);

    const auto loss = [&]() {
      const Matrix z = ext.forward(x, theta);
      double acc = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i)
        acc += z.data()[i] * readout.data()[i];
      return acc;
    };

    Extractor::Cache cache;
    ext.forward(x, theta, &cache);
    Vec grad(theta.size(), 0.0);
    ext.backward(x, cache, readout, theta, grad);

    const auto result = oracle::compare_gradients(theta, loss, grad);
    CAPTURE(feature_norm);
    CHECK(result.max_rel_error <= 1e-4);
  }
}

TEST_CASE("toy_cnn forward shape and gradient check") {
  Rng rng(8);
  ExtractorConfig cfg;
  cfg.kind = ExtractorKind::kToyCnn;
  cfg.input_shape = {2, 4, 4};
  cfg.embed_dim = 3;
  cfg.hidden_sizes = {3};
  Extractor ext(cfg);
  Vec theta(ext.param_count());
  ext.init_params(theta, rng);

  const Matrix x = testutil::random_matrix(2, 2 * 4 * 4, rng);
  const Matrix z = ext.forward(x, theta);
  CHECK(z.rows() == 2);
  CHECK(z.cols() == 3);

  const Matrix readout = testutil::random_matrix(2, 3, rng);
  const auto loss = [&]() {
    const Matrix zz = ext.forward(x, theta);
    double acc = 0.0;
    for (std::size_t i = 0; i < zz.size(); ++i)
      acc += zz.data()[i] * readout.data()[i];
    return acc;
  };
  Extractor::Cache cache;
  ext.forward(x, theta, &cache);
  Vec grad(theta.size(), 0.0);
  ext.backward(x, cache, readout, theta, grad);
  const auto result = oracle::compare_gradients(theta, loss, grad);
  CHECK(result.max_rel_error <= 1e-4);
}

TEST_CASE("external extractor is the identity on vector crops") {
  ExtractorConfig cfg;
  cfg.kind = ExtractorKind::kExternal;
  cfg.input_shape = {4};
  cfg.embed_dim = 4;
  Extractor ext(cfg);
  CHECK(ext.param_count() == 0);
  Rng rng(9);
  const Matrix x = testutil::random_matrix(3, 4, rng);
  const Matrix z = ext.forward(x, {});
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(z.data()[i] == x.data()[i]);

  ExtractorConfig bad = cfg;
  bad.embed_dim = 5;
  CHECK_THROWS_AS(Extractor{bad}, ConfigError);
}

TEST_CASE("classifier head: softmax properties") {
  const std::size_t dim = 4, classes = 5;
  ClassifierHead head(dim, classes);
  Rng rng(10);

  SUBCASE("zero parameters give the uniform distribution") {
    Vec psi(head.param_count(), 0.0);
    const Matrix r = testutil::random_matrix(3, dim, rng);
    const Matrix p = head.probabilities(r, psi);
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j)
        CHECK(p(i, j) == doctest::Approx(1.0 / classes).epsilon(1e-12));
  }

  SUBCASE("rows sum to one and logit shifts cancel") {
    Vec psi(head.param_count());
    head.init_params(psi, rng);
    const Matrix r = testutil::random_matrix(4, dim, rng);
    const Matrix p = head.probabilities(r, psi);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < p.cols(); ++j) {
        CHECK(p(i, j) > 0.0);
        sum += p(i, j);
      }
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
    //

    Vec shifted = psi;
    for (std::size_t c = 0; c < classes; ++c)
      shifted[classes * dim + c] += 3.25;  // constant added to every logit
    const Matrix p2 = head.probabilities(r, shifted);
    for (std::size_t i = 0; i < p.size(); ++i)
      CHECK(p2.data()[i] == doctest::Approx(p.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("spec-level wrappers carry ids") {
  Rng rng(11);
  const auto cfg = mlp_config(4, 4);
  Extractor ext(cfg);
  Vec theta(ext.param_count());
  ext.init_params(theta, rng);
  const Matrix x = testutil::random_matrix(3, 4, rng);
  const auto embs = extract_features(x, {"a", "b", "c"}, theta, ext);
  REQUIRE(embs.size() == 3);
  CHECK(embs[1].crop_id == "b");

  Accumulator acc(AccumulatorConfig{}, 4);
  const auto rep = models::accumulate(embs, {}, acc, "bag7");
  CHECK(rep.source_bag_id == "bag7");
  CHECK(rep.vector.size() == 4);

  ClassifierHead head(4, 3);
  Vec psi(head.param_count());
  head.init_params(psi, rng);
  const Vec probs = classify_bag(rep, psi, head);
  double sum = 0.0;
  for (double p : probs) sum += p;
  CHECK(std::abs(sum - 1.0) <= 1e-9);
}

TEST_CASE("checkpoint round-trips exactly") {
  const auto cfg = mlp_config(4, 4, true);
  AccumulatorConfig acc = st_config();
  const auto bundle = make_initialized_bundle(
      cfg, acc, DistanceKind::kCosine, {"alice", "bob"}, 42);

  const std::string path =
      (std::filesystem::temp_directory_path() / "cmil_ckpt.json").string();
  save_checkpoint(bundle, path);
  const auto loaded = load_checkpoint(path);
  CHECK(loaded.params.theta == bundle.params.theta);
  CHECK(loaded.params.phi == bundle.params.phi);
  CHECK(loaded.params.psi == bundle.params.psi);
  CHECK(loaded.class_labels == bundle.class_labels);
  CHECK(loaded.distance == bundle.distance);
  CHECK(loaded.extractor.feature_norm == bundle.extractor.feature_norm);
  std::remove(path.c_str());

  // Same seed, same initialization.
  const auto again = make_initialized_bundle(cfg, acc, DistanceKind::kCosine,
                                             {"alice", "bob"}, 42);
  CHECK(again.params.theta == bundle.params.theta);
  CHECK(again.params.phi == bundle.params.phi);
}

TEST_CASE("set transformer config validation") {
  AccumulatorConfig cfg = st_config(5);  // 5 does not divide 6
  CHECK_THROWS_AS(Accumulator(cfg, 6), ConfigError);
}
