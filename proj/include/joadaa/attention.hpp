#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "joadaa/tensor.hpp"

namespace joadaa {

template <typename S>
struct AttentionResult {
  Matrix<S> output;
  std::vector<Matrix<S>> weights;  // one (rows(Q) x rows(K)) matrix per head
};

/// Multi-head softmax attention over pre-projected Q, K, V.
///
/// Columns of Q and K are split into `heads` equal slices of width d_k, V into
/// slices of width d_v; each head computes softmax(Q_h K_h^T / sqrt(d_k)) V_h and
/// the head outputs are laid side by side. `mask(i, j) == false` gives key j
/// zero weight for query i. A query row with no attendable key is an error.
template <typename S>
AttentionResult<S> multi_head_attention(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                                        int heads, const MaskMatrix* mask = nullptr) {
  require(heads >= 1, "attention: heads must be >= 1");
  require(q.cols() == k.cols(), "attention: Q and K widths differ");
  require(k.rows() == v.rows(), "attention: K and V row counts differ");
  require(q.cols() % heads == 0 && v.cols() % heads == 0, "attention: width not divisible by heads");
  require(k.rows() >= 1, "attention: no keys");
  if (mask != nullptr) {
    require(mask->rows() == q.rows() && mask->cols() == k.rows(), "attention: mask shape mismatch");
    for (Eigen::Index i = 0; i < mask->rows(); ++i)
      if (!mask->row(i).any()) throw std::invalid_argument("attention: no attendable key for query row");
  }
  const Eigen::Index dk = q.cols() / heads;
  const Eigen::Index dv = v.cols() / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dk));

  AttentionResult<S> out;
  out.output.resize(q.rows(), v.cols());
  out.weights.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Matrix<S> w = (q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose()) * scale;
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      S mx = -std::numeric_limits<S>::infinity();
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        if (mask == nullptr || (*mask)(i, j)) mx = std::max(mx, w(i, j));
      S sum = 0;
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        if (mask == nullptr || (*mask)(i, j)) {
          w(i, j) = std::exp(w(i, j) - mx);
          sum += w(i, j);
        } else {
          w(i, j) = 0;
        }
      }
      w.row(i) /= sum;
    }
    out.output.middleCols(h * dv, dv).noalias() = w * v.middleCols(h * dv, dv);
    out.weights.push_back(std::move(w));
  }
  return out;
}

/// Single-head scaled dot-product attention; d_k is the width of Q.
template <typename S>
Matrix<S> scaled_dot_attention(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                               const MaskMatrix* mask = nullptr) {
  return multi_head_attention<S>(q, k, v, 1, mask).output;
}

/// Gradients of multi_head_attention w.r.t. Q, K, V given the upstream gradient.
template <typename S>
void multi_head_attention_backward(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                                   const std::vector<Matrix<S>>& weights, const Matrix<S>& d_out,
                                   Matrix<S>& d_q, Matrix<S>& d_k, Matrix<S>& d_v) {
  const auto heads = static_cast<Eigen::Index>(weights.size());
  const Eigen::Index dk = q.cols() / heads;
  const Eigen::Index dv = v.cols() / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dk));
  d_q.setZero(q.rows(), q.cols());
  d_k.setZero(k.rows(), k.cols());
  d_v.setZero(v.rows(), v.cols());
  for (Eigen::Index h = 0; h < heads; ++h) {
    const Matrix<S>& w = weights[static_cast<std::size_t>(h)];
    const auto d_oh = d_out.middleCols(h * dv, dv);
    d_v.middleCols(h * dv, dv).noalias() = w.transpose() * d_oh;
    Matrix<S> d_w = d_oh * v.middleCols(h * dv, dv).transpose();
    // softmax Jacobian, row-wise: dS = W .* (dW - rowsum(dW .* W))
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = (d_w.array() * w.array()).rowwise().sum();
    Matrix<S> d_s = (w.array() * (d_w.array().colwise() - dots.array())).matrix() * scale;
    d_q.middleCols(h * dk, dk).noalias() = d_s * k.middleCols(h * dk, dk);
    d_k.middleCols(h * dk, dk).noalias() = d_s.transpose() * q.middleCols(h * dk, dk);
  }
}

/// Expands a per-key validity vector into a (rows x keys) mask.
inline MaskMatrix key_mask(Eigen::Index rows, const std::vector<bool>& key_valid) {
  MaskMatrix m(rows, static_cast<Eigen::Index>(key_valid.size()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) m.col(j).setConstant(key_valid[static_cast<std::size_t>(j)]);
  return m;
}

}  // namespace joadaa
