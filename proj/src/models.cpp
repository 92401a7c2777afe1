#include "cmil/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cmil/error.hpp"
#include "cmil/kernels.hpp"

namespace cmil::models {

namespace {

namespace k = cmil::kernels;

/// Sequential views into a flat parameter array. init, forward and
/// backward walk parameters in the same order through one of these.
template <typename T>
class Cursor {
 public:
  explicit Cursor(std::span<T> buf) : buf_(buf) {}

  std::span<T> take(std::size_t n) {
    if (off_ + n > buf_.size())
      throw NumericError("parameter buffer exhausted");
    auto out = buf_.subspan(off_, n);
    off_ += n;
    return out;
  }

  std::size_t consumed() const { return off_; }

 private:
  std::span<T> buf_;
  std::size_t off_ = 0;
};

Matrix as_matrix(std::span<const double> data, std::size_t rows,
                 std::size_t cols) {
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

void add_into(std::span<double> dst, const Matrix& src) {
  const double* p = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += p[i];
}

void add_into(std::span<double> dst, const Vec& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// y = x * W^T + b with W stored row-major (out x in).
Matrix linear_forward(const Matrix& x, std::span<const double> w,
                      std::span<const double> b, std::size_t in,
                      std::size_t out) {
  Matrix wm = as_matrix(w, out, in);
  Matrix y = k::matmul_nt(x, wm);
  k::add_bias_rows(y, b);
  return y;
}

/// Accumulates dW, db; returns dX when requested.
Matrix linear_backward(const Matrix& x, const Matrix& dy,
                       std::span<const double> w, std::span<double> dw,
                       std::span<double> db, std::size_t in, std::size_t out,
                       bool want_dx) {
  add_into(dw, k::matmul_tn(dy, x));
  add_into(db, k::colsum(dy));
  if (!want_dx) return {};
  Matrix wm = as_matrix(w, out, in);
  return k::matmul_nn(dy, wm);
}

void init_uniform_fan_in(std::span<double> w, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : w) v = rng.uniform(-bound, bound);
}

void init_linear(Cursor<double>& cur, std::size_t in, std::size_t out,
                 Rng& rng) {
  init_uniform_fan_in(cur.take(out * in), in, rng);
  auto b = cur.take(out);
  std::fill(b.begin(), b.end(), 0.0);
}

std::size_t linear_count(std::size_t in, std::size_t out) {
  return out * in + out;
}

/// dL/d(pre-normalization) for row-wise L2 normalization.
Matrix l2_normalize_backward(const Matrix& pre_norm, const Matrix& grad,
                             double eps = 1e-12) {
  Matrix out(grad.rows(), grad.cols());
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    const auto u = pre_norm.row(i);
    const auto g = grad.row(i);
    double norm = 0.0;
    for (double v : u) norm += v * v;
    norm = std::max(std::sqrt(norm), eps);
    double zg = 0.0;
    for (std::size_t j = 0; j < u.size(); ++j)
      zg += (u[j] / norm) * g[j];
    for (std::size_t j = 0; j < u.size(); ++j)
      out(i, j) = (g[j] - (u[j] / norm) * zg) / norm;
  }
  return out;
}

}  // namespace

std::string to_string(ExtractorKind kind) {
  switch (kind) {
    case ExtractorKind::kToyMlp:
      return "toy_mlp";
    case ExtractorKind::kToyCnn:
      return "toy_cnn";
    case ExtractorKind::kExternal:
      return "external";
  }
  return "?";
}

ExtractorKind extractor_kind_from_string(const std::string& s) {
  if (s == "toy_mlp") return ExtractorKind::kToyMlp;
  if (s == "toy_cnn") return ExtractorKind::kToyCnn;
  if (s == "external") return ExtractorKind::kExternal;
  throw ConfigError("unknown extractor kind '" + s + "'");
}

std::string to_string(AccumulatorKind kind) {
  switch (kind) {
    case AccumulatorKind::kMean:
      return "mean";
    case AccumulatorKind::kMax:
      return "max";
    case AccumulatorKind::kSum:
      return "sum";
    case AccumulatorKind::kSetTransformer:
      return "set_transformer";
  }
  return "?";
}

AccumulatorKind accumulator_kind_from_string(const std::string& s) {
  if (s == "mean") return AccumulatorKind::kMean;
  if (s == "max") return AccumulatorKind::kMax;
  if (s == "sum") return AccumulatorKind::kSum;
  if (s == "set_transformer") return AccumulatorKind::kSetTransformer;
  throw ConfigError("unknown accumulator kind '" + s + "'");
}

std::size_t ExtractorConfig::input_size() const {
  std::size_t n = 1;
  for (std::size_t d : input_shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Extractor

Extractor::Extractor(ExtractorConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.embed_dim < 2) throw ConfigError("embed_dim must be >= 2");
  if (cfg_.input_shape.empty())
    throw ConfigError("extractor input_shape must be set");
  switch (cfg_.kind) {
    case ExtractorKind::kToyMlp: {
      layer_dims_.push_back(cfg_.input_size());
      for (std::size_t h : cfg_.hidden_sizes) {
        if (h == 0) throw ConfigError("hidden sizes must be positive");
        layer_dims_.push_back(h);
      }
      layer_dims_.push_back(cfg_.embed_dim);
      break;
    }
    case ExtractorKind::kToyCnn: {
      if (cfg_.input_shape.size() != 3)
        throw ConfigError("toy_cnn needs input_shape {channels, h, w}");
      if (cfg_.hidden_sizes.empty()) cfg_.hidden_sizes = {8};
      break;
    }
    case ExtractorKind::kExternal: {
      if (cfg_.input_size() != cfg_.embed_dim)
        throw ConfigError(
            "external extractor passes features through unchanged; "
            "input size must equal embed_dim");
      break;
    }
  }
}

std::size_t Extractor::param_count() const {
  switch (cfg_.kind) {
    case ExtractorKind::kToyMlp: {
      std::size_t n = 0;
      for (std::size_t i = 0; i + 1 < layer_dims_.size(); ++i)
        n += linear_count(layer_dims_[i], layer_dims_[i + 1]);
      return n;
    }
    case ExtractorKind::kToyCnn: {
      const std::size_t c = cfg_.input_shape[0];
      const std::size_t f = cfg_.hidden_sizes[0];
      return f * c * 9 + f + linear_count(f, cfg_.embed_dim);
    }
    case ExtractorKind::kExternal:
      return 0;
  }
  return 0;
}

void Extractor::init_params(std::span<double> theta, Rng& rng) const {
  Cursor<double> cur(theta);
  switch (cfg_.kind) {
    case ExtractorKind::kToyMlp:
      for (std::size_t i = 0; i + 1 < layer_dims_.size(); ++i)
        init_linear(cur, layer_dims_[i], layer_dims_[i + 1], rng);
      break;
    case ExtractorKind::kToyCnn: {
      const std::size_t c = cfg_.input_shape[0];
      const std::size_t f = cfg_.hidden_sizes[0];
      init_uniform_fan_in(cur.take(f * c * 9), c * 9, rng);
      auto bias = cur.take(f);
      std::fill(bias.begin(), bias.end(), 0.0);
      init_linear(cur, f, cfg_.embed_dim, rng);
      break;
    }
    case ExtractorKind::kExternal:
      break;
  }
}

Matrix Extractor::forward(const Matrix& inputs, std::span<const double> theta,
                          Cache* cache) const {
  if (inputs.cols() != cfg_.input_size())
    throw ValidationError("extractor input width " +
                          std::to_string(inputs.cols()) + " != configured " +
                          std::to_string(cfg_.input_size()));
  if (theta.size() != param_count())
    throw ValidationError("theta has wrong size");

  Matrix z;
  switch (cfg_.kind) {
    case ExtractorKind::kToyMlp: {
      Cursor<const double> cur(theta);
      Matrix x = inputs;
      if (cache) cache->layer_inputs.clear();
      for (std::size_t i = 0; i + 1 < layer_dims_.size(); ++i) {
        const std::size_t in = layer_dims_[i];
        const std::size_t out = layer_dims_[i + 1];
        auto w = cur.take(out * in);
        auto b = cur.take(out);
        if (cache) cache->layer_inputs.push_back(x);
        Matrix y = linear_forward(x, w, b, in, out);
        if (i + 2 < layer_dims_.size()) k::tanh_inplace(y);
        x = std::move(y);
      }
      z = std::move(x);
      break;
    }
    case ExtractorKind::kToyCnn: {
      const std::size_t c = cfg_.input_shape[0];
      const std::size_t h = cfg_.input_shape[1];
      const std::size_t w = cfg_.input_shape[2];
      const std::size_t f = cfg_.hidden_sizes[0];
      Cursor<const double> cur(theta);
      auto conv_w = cur.take(f * c * 9);
      auto conv_b = cur.take(f);
      auto lin_w = cur.take(cfg_.embed_dim * f);
      auto lin_b = cur.take(cfg_.embed_dim);

      const std::size_t n = inputs.rows();
      Matrix act(n, f * h * w);
      Matrix pooled(n, f);
      const std::int64_t n64 = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
      for (std::int64_t s = 0; s < n64; ++s) {
        const double* in_row = inputs.data() + s * inputs.cols();
        for (std::size_t fo = 0; fo < f; ++fo) {
          double pool = 0.0;
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
              double acc = conv_b[fo];
              for (std::size_t ci = 0; ci < c; ++ci) {
                for (int dy = -1; dy <= 1; ++dy) {
                  for (int dx = -1; dx <= 1; ++dx) {
                    const std::int64_t yy = static_cast<std::int64_t>(y) + dy;
                    const std::int64_t xx = static_cast<std::int64_t>(x) + dx;
                    if (yy < 0 || xx < 0 ||
                        yy >= static_cast<std::int64_t>(h) ||
                        xx >= static_cast<std::int64_t>(w))
                      continue;
                    const double wv =
                        conv_w[((fo * c + ci) * 3 + (dy + 1)) * 3 + (dx + 1)];
                    acc += wv * in_row[(ci * h + yy) * w + xx];
                  }
                }
              }
              const double a = std::tanh(acc);
              act(s, (fo * h + y) * w + x) = a;
              pool += a;
            }
          }
          pooled(s, fo) = pool / static_cast<double>(h * w);
        }
      }
      if (cache) {
        cache->conv_act = act;
        cache->pooled = pooled;
      }
      z = linear_forward(pooled, lin_w, lin_b, f, cfg_.embed_dim);
      break;
    }
    case ExtractorKind::kExternal:
      z = inputs;
      break;
  }

  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(z.data()[i]))
      throw NumericError("non-finite crop embedding (divergence)");
  }
  if (cache) cache->pre_norm = z;
  if (cfg_.feature_norm) k::l2_normalize_rows(z);
  return z;
}

void Extractor::backward(const Matrix& inputs, const Cache& cache,
                         const Matrix& grad_output,
                         std::span<const double> theta,
                         std::span<double> grad_theta) const {
  Matrix g = cfg_.feature_norm
                 ? l2_normalize_backward(cache.pre_norm, grad_output)
                 : grad_output;

  switch (cfg_.kind) {
    case ExtractorKind::kToyMlp: {
      // Recover per-layer parameter offsets, then walk backwards.
      const std::size_t layers = layer_dims_.size() - 1;
      std::vector<std::size_t> offset(layers);
      std::size_t off = 0;
      for (std::size_t i = 0; i < layers; ++i) {
        offset[i] = off;
        off += linear_count(layer_dims_[i], layer_dims_[i + 1]);
      }
      for (std::size_t ri = layers; ri-- > 0;) {
        const std::size_t in = layer_dims_[ri];
        const std::size_t out = layer_dims_[ri + 1];
        auto w = theta.subspan(offset[ri], out * in);
        auto dw = grad_theta.subspan(offset[ri], out * in);
        auto db = grad_theta.subspan(offset[ri] + out * in, out);
        const Matrix& x = cache.layer_inputs[ri];
        Matrix dx = linear_backward(x, g, w, dw, db, in, out, ri > 0);
        if (ri > 0) g = k::tanh_backward(cache.layer_inputs[ri], dx);
      }
      break;
    }
    case ExtractorKind::kToyCnn: {
      const std::size_t c = cfg_.input_shape[0];
      const std::size_t h = cfg_.input_shape[1];
      const std::size_t w = cfg_.input_shape[2];
      const std::size_t f = cfg_.hidden_sizes[0];
      const std::size_t conv_w_count = f * c * 9;
      auto lin_w = theta.subspan(conv_w_count + f, cfg_.embed_dim * f);
      auto d_conv_w = grad_theta.subspan(0, conv_w_count);
      auto d_conv_b = grad_theta.subspan(conv_w_count, f);
      auto d_lin_w = grad_theta.subspan(conv_w_count + f, cfg_.embed_dim * f);
      auto d_lin_b = grad_theta.subspan(conv_w_count + f + cfg_.embed_dim * f,
                                        cfg_.embed_dim);

      Matrix d_pooled = linear_backward(cache.pooled, g, lin_w, d_lin_w,
                                        d_lin_b, f, cfg_.embed_dim, true);
      const double inv_area = 1.0 / static_cast<double>(h * w);
      const std::size_t n = inputs.rows();
      // Filters are independent, so parallelizing over them keeps the
      // accumulation order fixed.
      const std::int64_t f64 = static_cast<std::int64_t>(f);
#pragma omp parallel for schedule(static)
      for (std::int64_t fo = 0; fo < f64; ++fo) {
        for (std::size_t s = 0; s < n; ++s) {
          const double* in_row = inputs.data() + s * inputs.cols();
          const double dpool = d_pooled(s, static_cast<std::size_t>(fo));
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
              const double a = cache.conv_act(
                  s, (static_cast<std::size_t>(fo) * h + y) * w + x);
              const double dpre = dpool * inv_area * (1.0 - a * a);
              d_conv_b[fo] += dpre;
              for (std::size_t ci = 0; ci < c; ++ci) {
                for (int dy = -1; dy <= 1; ++dy) {
                  for (int dx = -1; dx <= 1; ++dx) {
                    const std::int64_t yy = static_cast<std::int64_t>(y) + dy;
                    const std::int64_t xx = static_cast<std::int64_t>(x) + dx;
                    if (yy < 0 || xx < 0 ||
                        yy >= static_cast<std::int64_t>(h) ||
                        xx >= static_cast<std::int64_t>(w))
                      continue;
                    d_conv_w[((static_cast<std::size_t>(fo) * c + ci) * 3 +
                              (dy + 1)) *
                                 3 +
                             (dx + 1)] +=
                        dpre * in_row[(ci * h + yy) * w + xx];
                  }
                }
              }
            }
          }
        }
      }
      break;
    }
    case ExtractorKind::kExternal:
      break;
  }
}

// ---------------------------------------------------------------------------
// Accumulator

namespace {

std::size_t mha_count(std::size_t d) { return 4 * linear_count(d, d); }

std::size_t block_count(std::size_t d, std::size_t hidden) {
  return mha_count(d) + linear_count(d, hidden) + linear_count(hidden, d);
}

struct MhaParams {
  std::span<const double> wq, bq, wk, bk, wv, bv, wo, bo;
};

struct MhaGrads {
  std::span<double> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T, typename P>
P take_mha(Cursor<T>& cur, std::size_t d) {
  P p;
  p.wq = cur.take(d * d);
  p.bq = cur.take(d);
  p.wk = cur.take(d * d);
  p.bk = cur.take(d);
  p.wv = cur.take(d * d);
  p.bv = cur.take(d);
  p.wo = cur.take(d * d);
  p.bo = cur.take(d);
  return p;
}

Matrix head_slice(const Matrix& m, std::size_t head, std::size_t head_dim) {
  Matrix out(m.rows(), head_dim);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < head_dim; ++j)
      out(i, j) = m(i, head * head_dim + j);
  return out;
}

void head_slice_add(Matrix& full, const Matrix& part, std::size_t head,
                    std::size_t head_dim) {
  for (std::size_t i = 0; i < part.rows(); ++i)
    for (std::size_t j = 0; j < head_dim; ++j)
      full(i, head * head_dim + j) += part(i, j);
}

/// dS for A = softmax_rows(S): dS = A .* (dA - rowsum(dA .* A)).
Matrix softmax_backward(const Matrix& a, const Matrix& da) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) dot += da(i, j) * a(i, j);
    for (std::size_t j = 0; j < a.cols(); ++j)
      out(i, j) = a(i, j) * (da(i, j) - dot);
  }
  return out;
}

}  // namespace

Accumulator::Accumulator(AccumulatorConfig cfg, std::size_t embed_dim)
    : cfg_(cfg), dim_(embed_dim) {
  hidden_ = cfg_.st_hidden == 0 ? dim_ : cfg_.st_hidden;
  if (cfg_.kind == AccumulatorKind::kSetTransformer) {
    if (cfg_.st_heads == 0 || dim_ % cfg_.st_heads != 0)
      throw ConfigError("st_heads must divide embed_dim");
    if (cfg_.st_layers == 0)
      throw ConfigError("set transformer needs at least one layer");
    head_dim_ = dim_ / cfg_.st_heads;
  } else {
    head_dim_ = 0;
  }
}

std::size_t Accumulator::param_count() const {
  if (cfg_.kind != AccumulatorKind::kSetTransformer) return 0;
  return cfg_.st_layers * block_count(dim_, hidden_) + dim_ +
         block_count(dim_, hidden_);
}

void Accumulator::init_params(std::span<double> phi, Rng& rng) const {
  if (cfg_.kind != AccumulatorKind::kSetTransformer) return;
  Cursor<double> cur(phi);
  const auto init_block = [&]() {
    for (int i = 0; i < 4; ++i) init_linear(cur, dim_, dim_, rng);
    init_linear(cur, dim_, hidden_, rng);
    init_linear(cur, hidden_, dim_, rng);
  };
  for (std::size_t l = 0; l < cfg_.st_layers; ++l) init_block();
  init_uniform_fan_in(cur.take(dim_), dim_, rng);  // PMA seed vector
  init_block();
}

Vec Accumulator::forward(const Matrix& embeddings,
                         std::span<const double> phi, Cache* cache) const {
  if (embeddings.rows() == 0)
    throw ValidationError("cannot accumulate an empty embedding set");
  if (embeddings.cols() != dim_)
    throw ValidationError("embedding width != accumulator dim");

  const std::size_t n = embeddings.rows();
  switch (cfg_.kind) {
    case AccumulatorKind::kMean: {
      Vec r = k::tree_sum_rows(embeddings);
      for (double& v : r) v /= static_cast<double>(n);
      return r;
    }
    case AccumulatorKind::kSum:
      return k::tree_sum_rows(embeddings);
    case AccumulatorKind::kMax: {
      Vec r(dim_);
      std::vector<std::size_t> argmax(dim_, 0);
      for (std::size_t j = 0; j < dim_; ++j) {
        double best = embeddings(0, j);
        for (std::size_t i = 1; i < n; ++i) {
          if (embeddings(i, j) > best) {
            best = embeddings(i, j);
            argmax[j] = i;
          }
        }
        r[j] = best;
      }
      if (cache) cache->max_rows = std::move(argmax);
      return r;
    }
    case AccumulatorKind::kSetTransformer:
      break;
  }

  if (phi.size() != param_count())
    throw ValidationError("phi has wrong size");
  Cursor<const double> cur(phi);

  const auto mha_forward = [&](const Matrix& qin, const Matrix& kvin,
                               MhaCache* mc) -> Matrix {
    auto p = take_mha<const double, MhaParams>(cur, dim_);
    Matrix q = linear_forward(qin, p.wq, p.bq, dim_, dim_);
    Matrix kk = linear_forward(kvin, p.wk, p.bk, dim_, dim_);
    Matrix v = linear_forward(kvin, p.wv, p.bv, dim_, dim_);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));
    Matrix concat(q.rows(), dim_, 0.0);
    std::vector<Matrix> attn(cfg_.st_heads);
    for (std::size_t hh = 0; hh < cfg_.st_heads; ++hh) {
      Matrix qh = head_slice(q, hh, head_dim_);
      Matrix kh = head_slice(kk, hh, head_dim_);
      Matrix vh = head_slice(v, hh, head_dim_);
      Matrix scores = k::matmul_nt(qh, kh);
      for (std::size_t i = 0; i < scores.size(); ++i)
        scores.data()[i] *= scale;
      k::softmax_rows(scores);
      Matrix oh = k::matmul_nn(scores, vh);
      head_slice_add(concat, oh, hh, head_dim_);
      attn[hh] = std::move(scores);
    }
    Matrix out = linear_forward(concat, p.wo, p.bo, dim_, dim_);
    if (mc) {
      mc->q = std::move(q);
      mc->k = std::move(kk);
      mc->v = std::move(v);
      mc->attn = std::move(attn);
      mc->concat = std::move(concat);
    }
    return out;
  };

  const auto block_forward = [&](const Matrix& qin, const Matrix& kvin,
                                 BlockCache* bc) -> Matrix {
    Matrix attn_out = mha_forward(qin, kvin, bc ? &bc->mha : nullptr);
    for (std::size_t i = 0; i < attn_out.size(); ++i)
      attn_out.data()[i] += qin.data()[i];
    auto w1 = cur.take(hidden_ * dim_);
    auto b1 = cur.take(hidden_);
    auto w2 = cur.take(dim_ * hidden_);
    auto b2 = cur.take(dim_);
    Matrix ff = linear_forward(attn_out, w1, b1, dim_, hidden_);
    k::tanh_inplace(ff);
    Matrix out = linear_forward(ff, w2, b2, hidden_, dim_);
    for (std::size_t i = 0; i < out.size(); ++i)
      out.data()[i] += attn_out.data()[i];
    if (bc) {
      bc->residual = std::move(attn_out);
      bc->ff_act = std::move(ff);
    }
    return out;
  };

  if (cache) {
    cache->layer_inputs.clear();
    cache->blocks.assign(cfg_.st_layers, BlockCache{});
  }
  Matrix x = embeddings;
  for (std::size_t l = 0; l < cfg_.st_layers; ++l) {
    if (cache) cache->layer_inputs.push_back(x);
    x = block_forward(x, x, cache ? &cache->blocks[l] : nullptr);
  }
  if (cache) cache->layer_inputs.push_back(x);

  auto seed = cur.take(dim_);
  Matrix seed_mat = as_matrix(seed, 1, dim_);
  Matrix pooled =
      block_forward(seed_mat, x, cache ? &cache->pma : nullptr);

  Vec r(dim_);
  for (std::size_t j = 0; j < dim_; ++j) r[j] = pooled(0, j);
  return r;
}

void Accumulator::backward(const Matrix& embeddings, const Cache& cache,
                           std::span<const double> grad_output,
                           std::span<const double> phi,
                           std::span<double> grad_phi,
                           Matrix& grad_embeddings) const {
  const std::size_t n = embeddings.rows();
  switch (cfg_.kind) {
    case AccumulatorKind::kMean: {
      const double inv = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim_; ++j)
          grad_embeddings(i, j) += grad_output[j] * inv;
      return;
    }
    case AccumulatorKind::kSum: {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim_; ++j)
          grad_embeddings(i, j) += grad_output[j];
      return;
    }
    case AccumulatorKind::kMax: {
      for (std::size_t j = 0; j < dim_; ++j)
        grad_embeddings(cache.max_rows[j], j) += grad_output[j];
      return;
    }
    case AccumulatorKind::kSetTransformer:
      break;
  }

  // Walk the parameter layout once to find the offsets of each block.
  const std::size_t per_block = block_count(dim_, hidden_);
  const std::size_t seed_off = cfg_.st_layers * per_block;
  const std::size_t pma_off = seed_off + dim_;

  const auto mha_backward = [&](std::size_t off, const Matrix& qin,
                                const Matrix& kvin, const MhaCache& mc,
                                const Matrix& dout, Matrix& dqin,
                                Matrix& dkvin) {
    Cursor<const double> pc(phi.subspan(off, mha_count(dim_)));
    Cursor<double> gc(grad_phi.subspan(off, mha_count(dim_)));
    auto p = take_mha<const double, MhaParams>(pc, dim_);
    auto g = take_mha<double, MhaGrads>(gc, dim_);

    Matrix dconcat =
        linear_backward(mc.concat, dout, p.wo, g.wo, g.bo, dim_, dim_, true);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim_));
    Matrix dq(mc.q.rows(), dim_, 0.0);
    Matrix dk(mc.k.rows(), dim_, 0.0);
    Matrix dv(mc.v.rows(), dim_, 0.0);
    for (std::size_t hh = 0; hh < cfg_.st_heads; ++hh) {
      Matrix doh = head_slice(dconcat, hh, head_dim_);
      Matrix qh = head_slice(mc.q, hh, head_dim_);
      Matrix kh = head_slice(mc.k, hh, head_dim_);
      Matrix vh = head_slice(mc.v, hh, head_dim_);
      const Matrix& a = mc.attn[hh];
      Matrix da = k::matmul_nt(doh, vh);
      Matrix dvh = k::matmul_tn(a, doh);
      Matrix ds = softmax_backward(a, da);
      for (std::size_t i = 0; i < ds.size(); ++i) ds.data()[i] *= scale;
      Matrix dqh = k::matmul_nn(ds, kh);
      Matrix dkh = k::matmul_tn(ds, qh);
      head_slice_add(dq, dqh, hh, head_dim_);
      head_slice_add(dk, dkh, hh, head_dim_);
      head_slice_add(dv, dvh, hh, head_dim_);
    }
    Matrix dqin_part =
        linear_backward(qin, dq, p.wq, g.wq, g.bq, dim_, dim_, true);
    Matrix dkin_part =
        linear_backward(kvin, dk, p.wk, g.wk, g.bk, dim_, dim_, true);
    Matrix dvin_part =
        linear_backward(kvin, dv, p.wv, g.wv, g.bv, dim_, dim_, true);
    for (std::size_t i = 0; i < dqin.size(); ++i)
      dqin.data()[i] += dqin_part.data()[i];
    for (std::size_t i = 0; i < dkvin.size(); ++i)
      dkvin.data()[i] += dkin_part.data()[i] + dvin_part.data()[i];
  };

  const auto block_backward = [&](std::size_t off, const Matrix& qin,
                                  const Matrix& kvin, const BlockCache& bc,
                                  const Matrix& dout, Matrix& dqin,
                                  Matrix& dkvin) {
    const std::size_t ff_off = off + mha_count(dim_);
    auto w1 = phi.subspan(ff_off, hidden_ * dim_);
    auto dw1 = grad_phi.subspan(ff_off, hidden_ * dim_);
    auto db1 = grad_phi.subspan(ff_off + hidden_ * dim_, hidden_);
    const std::size_t w2_off = ff_off + hidden_ * dim_ + hidden_;
    auto w2 = phi.subspan(w2_off, dim_ * hidden_);
    auto dw2 = grad_phi.subspan(w2_off, dim_ * hidden_);
    auto db2 = grad_phi.subspan(w2_off + dim_ * hidden_, dim_);

    Matrix dff = linear_backward(bc.ff_act, dout, w2, dw2, db2, hidden_,
                                 dim_, true);
    Matrix dpre = k::tanh_backward(bc.ff_act, dff);
    Matrix dresidual = linear_backward(bc.residual, dpre, w1, dw1, db1, dim_,
                                       hidden_, true);
    for (std::size_t i = 0; i < dresidual.size(); ++i)
      dresidual.data()[i] += dout.data()[i];  // residual skip
    for (std::size_t i = 0; i < dqin.size(); ++i)
      dqin.data()[i] += dresidual.data()[i];  // attention residual skip
    mha_backward(off, qin, kvin, bc.mha, dresidual, dqin, dkvin);
  };

  // PMA first.
  Matrix dout(1, dim_);
  for (std::size_t j = 0; j < dim_; ++j) dout(0, j) = grad_output[j];
  auto seed = phi.subspan(seed_off, dim_);
  Matrix seed_mat = as_matrix(seed, 1, dim_);
  const Matrix& x_top = cache.layer_inputs.back();
  Matrix dseed(1, dim_, 0.0);
  Matrix dx(x_top.rows(), dim_, 0.0);
  block_backward(pma_off, seed_mat, x_top, cache.pma, dout, dseed, dx);
  {
    auto gseed = grad_phi.subspan(seed_off, dim_);
    for (std::size_t j = 0; j < dim_; ++j) gseed[j] += dseed(0, j);
  }

  // Then the SAB stack in reverse.
  for (std::size_t l = cfg_.st_layers; l-- > 0;) {
    const Matrix& xin = cache.layer_inputs[l];
    Matrix dxin(xin.rows(), dim_, 0.0);
    block_backward(l * per_block, xin, xin, cache.blocks[l], dx, dxin, dxin);
    dx = std::move(dxin);
  }
  for (std::size_t i = 0; i < grad_embeddings.size(); ++i)
    grad_embeddings.data()[i] += dx.data()[i];
}

// ---------------------------------------------------------------------------
// Classifier head

ClassifierHead::ClassifierHead(std::size_t embed_dim, std::size_t num_classes)
    : dim_(embed_dim), classes_(num_classes) {
  if (num_classes < 1) throw ConfigError("need at least one class");
}

std::size_t ClassifierHead::param_count() const {
  return linear_count(dim_, classes_);
}

void ClassifierHead::init_params(std::span<double> psi, Rng& rng) const {
  Cursor<double> cur(psi);
  init_linear(cur, dim_, classes_, rng);
}

Matrix ClassifierHead::logits(const Matrix& reps,
                              std::span<const double> psi) const {
  if (psi.size() != param_count())
    throw ValidationError("psi has wrong size");
  return linear_forward(reps, psi.subspan(0, classes_ * dim_),
                        psi.subspan(classes_ * dim_, classes_), dim_,
                        classes_);
}

Matrix ClassifierHead::probabilities(const Matrix& reps,
                                     std::span<const double> psi) const {
  Matrix p = logits(reps, psi);
  kernels::softmax_rows(p);
  return p;
}

void ClassifierHead::backward(const Matrix& reps, const Matrix& grad_logits,
                              std::span<const double> psi,
                              std::span<double> grad_psi,
                              Matrix& grad_reps) const {
  auto w = psi.subspan(0, classes_ * dim_);
  auto dw = grad_psi.subspan(0, classes_ * dim_);
  auto db = grad_psi.subspan(classes_ * dim_, classes_);
  Matrix dx = linear_backward(reps, grad_logits, w, dw, db, dim_, classes_,
                              true);
  for (std::size_t i = 0; i < grad_reps.size(); ++i)
    grad_reps.data()[i] += dx.data()[i];
}

// ---------------------------------------------------------------------------
// Spec-level wrappers

std::vector<CropEmbedding> extract_features(
    const Matrix& inputs, const std::vector<std::string>& crop_ids,
    std::span<const double> theta, const Extractor& extractor) {
  if (crop_ids.size() != inputs.rows())
    throw ValidationError("crop_ids do not match input rows");
  Matrix z = extractor.forward(inputs, theta);
  std::vector<CropEmbedding> out(inputs.rows());
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    const auto row = z.row(i);
    out[i].vector.assign(row.begin(), row.end());
    out[i].crop_id = crop_ids[i];
  }
  return out;
}

BagRepresentation accumulate(const std::vector<CropEmbedding>& embeddings,
                             std::span<const double> phi,
                             const Accumulator& accumulator,
                             const std::string& source_bag_id) {
  if (embeddings.empty())
    throw ValidationError("cannot accumulate an empty embedding set");
  Matrix z(embeddings.size(), embeddings.front().vector.size());
  for (std::size_t i = 0; i < embeddings.size(); ++i)
    z.set_row(i, embeddings[i].vector);
  BagRepresentation rep;
  rep.vector = accumulator.forward(z, phi);
  rep.source_bag_id = source_bag_id;
  return rep;
}

Vec classify_bag(const BagRepresentation& rep, std::span<const double> psi,
                 const ClassifierHead& head) {
  Matrix r(1, rep.vector.size());
  r.set_row(0, rep.vector);
  Matrix p = head.probabilities(r, psi);
  const auto row = p.row(0);
  return Vec(row.begin(), row.end());
}

// ---------------------------------------------------------------------------
// Checkpoints

ModelBundle make_initialized_bundle(const ExtractorConfig& ext,
                                    const AccumulatorConfig& acc,
                                    DistanceKind distance,
                                    const std::vector<std::string>& labels,
                                    std::uint64_t seed) {
  ModelBundle bundle;
  bundle.extractor = ext;
  bundle.accumulator = acc;
  bundle.distance = distance;
  bundle.class_labels = labels;

  Extractor extractor(ext);
  Accumulator accumulator(acc, ext.embed_dim);
  ClassifierHead head(ext.embed_dim, std::max<std::size_t>(labels.size(), 1));

  bundle.extractor = extractor.config();  // defaults filled in
  bundle.params.theta.resize(extractor.param_count());
  bundle.params.phi.resize(accumulator.param_count());
  bundle.params.psi.resize(head.param_count());

  Rng root(seed);
  Rng theta_rng = root.fork(1);
  Rng phi_rng = root.fork(2).fork(acc.seed);
  Rng psi_rng = root.fork(3);
  extractor.init_params(bundle.params.theta, theta_rng);
  accumulator.init_params(bundle.params.phi, phi_rng);
  head.init_params(bundle.params.psi, psi_rng);
  return bundle;
}

namespace {

constexpr const char* kCheckpointFormat = "cmil-checkpoint-v1";

nlohmann::ordered_json extractor_to_json(const ExtractorConfig& cfg) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(cfg.kind);
  j["input_shape"] = cfg.input_shape;
  j["embed_dim"] = cfg.embed_dim;
  j["hidden_sizes"] = cfg.hidden_sizes;
  j["feature_norm"] = cfg.feature_norm;
  return j;
}

ExtractorConfig extractor_from_json(const nlohmann::ordered_json& j) {
  ExtractorConfig cfg;
  cfg.kind = extractor_kind_from_string(j.at("kind").get<std::string>());
  cfg.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
  cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
  cfg.hidden_sizes = j.at("hidden_sizes").get<std::vector<std::size_t>>();
  cfg.feature_norm = j.at("feature_norm").get<bool>();
  return cfg;
}

nlohmann::ordered_json accumulator_to_json(const AccumulatorConfig& cfg) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(cfg.kind);
  j["st_layers"] = cfg.st_layers;
  j["st_heads"] = cfg.st_heads;
  j["st_hidden"] = cfg.st_hidden;
  j["seed"] = cfg.seed;
  return j;
}

AccumulatorConfig accumulator_from_json(const nlohmann::ordered_json& j) {
  AccumulatorConfig cfg;
  cfg.kind = accumulator_kind_from_string(j.at("kind").get<std::string>());
  cfg.st_layers = j.at("st_layers").get<std::size_t>();
  cfg.st_heads = j.at("st_heads").get<std::size_t>();
  cfg.st_hidden = j.at("st_hidden").get<std::size_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

void save_checkpoint(const ModelBundle& bundle, const std::string& path) {
  nlohmann::ordered_json j;
  j["format"] = kCheckpointFormat;
  j["extractor"] = extractor_to_json(bundle.extractor);
  j["accumulator"] = accumulator_to_json(bundle.accumulator);
  j["distance"] = to_string(bundle.distance);
  j["class_labels"] = bundle.class_labels;
  j["theta"] = bundle.params.theta;
  j["phi"] = bundle.params.phi;
  j["psi"] = bundle.params.psi;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out << j.dump(2) << "\n";
}

ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint parse error: ") + e.what());
  }
  if (!j.contains("format") || j["format"] != kCheckpointFormat)
    throw ParseError("unrecognized checkpoint format tag");
  ModelBundle bundle;
  bundle.extractor = extractor_from_json(j.at("extractor"));
  bundle.accumulator = accumulator_from_json(j.at("accumulator"));
  bundle.distance = distance_from_string(j.at("distance").get<std::string>());
  bundle.class_labels = j.at("class_labels").get<std::vector<std::string>>();
  bundle.params.theta = j.at("theta").get<Vec>();
  bundle.params.phi = j.at("phi").get<Vec>();
  bundle.params.psi = j.at("psi").get<Vec>();
  return bundle;
}

}  // namespace cmil::models
