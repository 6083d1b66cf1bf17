#pragma once

// Dense building blocks with explicit backward passes. All matrices are
// row-major with one token per row; weights are stored (in x out) so that a
// linear layer computes y = x W + b.

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "odt/rng.hpp"
#include "odt/types.hpp"

namespace odt::nn {

inline Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

/// Accumulates dW and db; returns dx.
inline Matrix linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw, Matrix& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

/// Gradient of the input only (frozen weights).
inline Matrix linear_backward_input(const Matrix& w, const Matrix& dy) { return dy * w.transpose(); }

struct LayerNormCache {
  Matrix xhat;
  Vector rstd;
};

constexpr double kLayerNormEps = 1e-5;

inline Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, LayerNormCache& cache) {
  const Eigen::Index n = x.rows();
  const auto d = static_cast<double>(x.cols());
  cache.xhat.resize(x.rows(), x.cols());
  cache.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / d;
    const double var = (x.row(i).array() - mean).square().sum() / d;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd[i] = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mean) * rstd;
  }
  Matrix y = cache.xhat.array().rowwise() * gamma.row(0).array();
  y.rowwise() += beta.row(0);
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& gamma, const LayerNormCache& cache, Matrix& dgamma,
                                  Matrix& dbeta) {
  dgamma.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gamma.row(0).array();
  const auto d = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double mean_dxhat = dxhat.row(i).sum() / d;
    const double mean_dxhat_xhat = dxhat.row(i).dot(cache.xhat.row(i)) / d;
    dx.row(i) =
        cache.rstd[i] * (dxhat.row(i).array() - mean_dxhat - cache.xhat.row(i).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

inline Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

inline Matrix relu_backward(const Matrix& pre, const Matrix& dy) {
  return (pre.array() > 0.0).select(dy, Matrix::Zero(dy.rows(), dy.cols()));
}

/// Inverted dropout mask (entries 0 or 1/(1-p)). Empty when inactive.
inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix m(rows, cols);
  const double keep_scale = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? 0.0 : keep_scale;
  return m;
}

inline void apply_mask(Matrix& x, const Matrix& mask) {
  if (mask.size() != 0) x.array() *= mask.array();
}

/// Row ranges of each sequence in a stacked token matrix.
struct Segment {
  Eigen::Index offset = 0;
  Eigen::Index length = 0;
};

/// Softmax probabilities of every (segment, head), row-major T x T with the
/// strictly upper triangle zero.
struct AttentionCache {
  std::vector<Matrix> probs;
};

/// Causal multi-head self-attention core. `qkv` is N x 3E laid out as
/// [q | k | v], each split into `n_heads` contiguous column blocks.
/// Position i attends only to positions j <= i of its own segment.
inline Matrix causal_attention(const Matrix& qkv, std::span<const Segment> segments, int n_heads,
                               AttentionCache& cache) {
  const Eigen::Index e = qkv.cols() / 3;
  const Eigen::Index hd = e / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix out = Matrix::Zero(qkv.rows(), e);
  cache.probs.clear();
  cache.probs.reserve(segments.size() * static_cast<std::size_t>(n_heads));
  for (const Segment& seg : segments) {
    const Eigen::Index t = seg.length;
    for (int h = 0; h < n_heads; ++h) {
      const auto q = qkv.block(seg.offset, h * hd, t, hd);
      const auto k = qkv.block(seg.offset, e + h * hd, t, hd);
      const auto v = qkv.block(seg.offset, 2 * e + h * hd, t, hd);
      Matrix p = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < t; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, p(i, j));
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          sum += p(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < t; ++j) p(i, j) = 0.0;
      }
      out.block(seg.offset, h * hd, t, hd).noalias() = p * v;
      cache.probs.push_back(std::move(p));
    }
  }
  return out;
}

inline Matrix causal_attention_backward(const Matrix& qkv, std::span<const Segment> segments, int n_heads,
                                        const AttentionCache& cache, const Matrix& dout) {
  const Eigen::Index e = qkv.cols() / 3;
  const Eigen::Index hd = e / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix dqkv = Matrix::Zero(qkv.rows(), qkv.cols());
  std::size_t idx = 0;
  for (const Segment& seg : segments) {
    const Eigen::Index t = seg.length;
    for (int h = 0; h < n_heads; ++h, ++idx) {
      const Matrix& p = cache.probs[idx];
      const auto q = qkv.block(seg.offset, h * hd, t, hd);
      const auto k = qkv.block(seg.offset, e + h * hd, t, hd);
      const auto v = qkv.block(seg.offset, 2 * e + h * hd, t, hd);
      const auto dy = dout.block(seg.offset, h * hd, t, hd);
      const Matrix dp = dy * v.transpose();
      dqkv.block(seg.offset, 2 * e + h * hd, t, hd).noalias() = p.transpose() * dy;
      Matrix ds(t, t);
      for (Eigen::Index i = 0; i < t; ++i) {
        const double dot = p.row(i).dot(dp.row(i));
        ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
      }
      ds *= scale;
      dqkv.block(seg.offset, h * hd, t, hd).noalias() = ds * k;
      dqkv.block(seg.offset, e + h * hd, t, hd).noalias() = ds.transpose() * q;
    }
  }
  return dqkv;
}

}  // namespace odt::nn
