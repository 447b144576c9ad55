#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "cbapm/linalg.hpp"
#include "cbapm/rng.hpp"

namespace cbapm {

/*
 Minimal dense-network building blocks with hand-derived gradients.
 Batches are stored column-wise: X is (in_dim x batch), Y is
 (out_dim x batch). Everything is double precision and deterministic.
*/

inline constexpr double kLayerNormEps = 1e-5;

// --- GELU: x * Phi(x), exact normal CDF via erf -----------------------------

inline double gelu_scalar(double x) {
  return x * 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
}

// d/dx [x Phi(x)] = Phi(x) + x phi(x)
inline double gelu_grad_scalar(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
  double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

inline Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return gelu_scalar(v); });
}

inline Matrix gelu_backward(const Matrix& x, const Matrix& upstream) {
  if (x.rows() != upstream.rows() || x.cols() != upstream.cols())
    throw std::invalid_argument("gelu_backward: shape mismatch");
  return x.unaryExpr([](double v) { return gelu_grad_scalar(v); }).cwiseProduct(upstream);
}

// --- Dense layer -------------------------------------------------------------

struct DenseLayer {
  Matrix W;  // out x in
  Vector b;  // out
};

// He initialization: W ~ N(0, 2/fan_in) with fan_in = cols, b = 0.
inline DenseLayer he_init(int rows, int cols, Rng& rng) {
  if (rows <= 0 || cols <= 0) throw std::invalid_argument("he_init: dims must be positive");
  DenseLayer layer;
  layer.W.resize(rows, cols);
  const double sd = std::sqrt(2.0 / static_cast<double>(cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) layer.W(r, c) = sd * rng.normal();
  layer.b = Vector::Zero(rows);
  return layer;
}

inline Matrix dense_forward(const DenseLayer& layer, const Matrix& X) {
  if (layer.W.cols() != X.rows())
    throw std::invalid_argument("dense_forward: W is " + std::to_string(layer.W.rows()) + "x" +
                                std::to_string(layer.W.cols()) + " but X has " +
                                std::to_string(X.rows()) + " rows");
  return (layer.W * X).colwise() + layer.b;
}

struct DenseGrads {
  Matrix dW;
  Vector db;
  Matrix dX;
};

inline DenseGrads dense_backward(const DenseLayer& layer, const Matrix& X, const Matrix& dY) {
  if (layer.W.cols() != X.rows() || dY.rows() != layer.W.rows() || dY.cols() != X.cols())
    throw std::invalid_argument("dense_backward: shape mismatch");
  DenseGrads g;
  g.dW = dY * X.transpose();
  g.db = dY.rowwise().sum();
  g.dX = layer.W.transpose() * dY;
  return g;
}

// --- Layer normalization ------------------------------------------------------

// Normalizes each column (one example) to zero mean / unit variance over
// the feature dimension, then applies the learnable affine map.
struct LayerNormCache {
  Matrix xhat;     // normalized activations
  Vector inv_std;  // per-example 1/sqrt(var + eps)
};

struct LayerNormOut {
  Matrix Y;
  LayerNormCache cache;
};

inline LayerNormOut layer_norm(const Matrix& X, const Vector& gamma, const Vector& beta) {
  if (X.rows() < 2) throw std::invalid_argument("layer_norm: need at least 2 features");
  if (gamma.size() != X.rows() || beta.size() != X.rows())
    throw std::invalid_argument("layer_norm: gamma/beta size mismatch");
  LayerNormOut out;
  const auto n = static_cast<double>(X.rows());
  out.cache.xhat.resize(X.rows(), X.cols());
  out.cache.inv_std.resize(X.cols());
  out.Y.resize(X.rows(), X.cols());
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    double mean = X.col(c).mean();
    double var = (X.col(c).array() - mean).square().sum() / n;
    double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
    out.cache.inv_std(c) = inv_std;
    out.cache.xhat.col(c) = (X.col(c).array() - mean) * inv_std;
    out.Y.col(c) = gamma.array() * out.cache.xhat.col(c).array() + beta.array();
  }
  return out;
}

struct LayerNormGrads {
  Matrix dX;
  Vector dgamma;
  Vector dbeta;
};

inline LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Vector& gamma,
                                          const Matrix& dY) {
  LayerNormGrads g;
  const auto n = static_cast<double>(dY.rows());
  g.dgamma = (dY.array() * cache.xhat.array()).rowwise().sum();
  g.dbeta = dY.rowwise().sum();
  g.dX.resize(dY.rows(), dY.cols());
  for (Eigen::Index c = 0; c < dY.cols(); ++c) {
    Vector dxhat = dY.col(c).array() * gamma.array();
    double sum_dxhat = dxhat.sum();
    double sum_dxhat_xhat = (dxhat.array() * cache.xhat.col(c).array()).sum();
    g.dX.col(c) = (cache.inv_std(c) / n) *
                  (n * dxhat.array() - sum_dxhat - cache.xhat.col(c).array() * sum_dxhat_xhat);
  }
  return g;
}

// --- Dropout (inverted: survivors scaled at train time) ----------------------

struct DropoutOut {
  Matrix Y;
  Matrix mask;  // 1 for kept units, 0 for dropped; empty when inactive
};

inline DropoutOut dropout(const Matrix& X, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  DropoutOut out;
  if (!training || p == 0.0) {
    out.Y = X;
    return out;
  }
  const double scale = 1.0 / (1.0 - p);
  out.mask.resize(X.rows(), X.cols());
  out.Y.resize(X.rows(), X.cols());
  for (Eigen::Index c = 0; c < X.cols(); ++c)
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      double keep = rng.uniform() < p ? 0.0 : 1.0;
      out.mask(r, c) = keep;
      out.Y(r, c) = X(r, c) * keep * scale;
    }
  return out;
}

inline Matrix dropout_backward(const DropoutOut& fwd, double p, const Matrix& dY) {
  if (fwd.mask.size() == 0) return dY;
  return dY.cwiseProduct(fwd.mask) / (1.0 - p);
}

} // namespace cbapm
