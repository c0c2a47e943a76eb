#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "joadaa/attention.hpp"
#include "joadaa/tensor.hpp"

namespace joadaa {

/// A named trainable tensor with its accumulated gradient.
template <typename S>
struct Parameter {
  std::string name;
  Matrix<S> value;
  Matrix<S> grad;

  Parameter() = default;
  Parameter(std::string n, Matrix<S> v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix<S>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Reverse-mode tape over dense matrices.
///
/// Every op appends a node holding its value and a closure that pushes the
/// node's gradient to its inputs. Nodes live in a deque so `Var` handles stay
/// valid for the tape's lifetime. A parameter used several times in one tape
/// maps to a single leaf, so shared weights accumulate naturally.
template <typename S>
class Tape {
 public:
  using M = Matrix<S>;

  struct Node {
    M value;
    M grad;
    bool needs_grad = false;
    std::function<void()> backward;

    M& g() {
      if (grad.size() == 0) grad.setZero(value.rows(), value.cols());
      return grad;
    }
    bool has_grad() const { return grad.size() != 0; }
  };
  using Var = Node*;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(M v) { return make(std::move(v), false); }

  /// Leaf for a parameter. Gradients flow back into `p.grad` only when the
  /// tape records gradients, so no-grad tapes may read const parameters.
  Var param(const Parameter<S>& p) {
    if (auto it = leaves_.find(&p); it != leaves_.end()) return it->second;
    Var n = make(p.value, grad_enabled_);
    leaves_.emplace(&p, n);
    return n;
  }

  /// Seeds d(out)/d(out) = 1 for a 1x1 output, runs the tape in reverse and
  /// adds leaf gradients into the owning Parameter objects.
  void backward(Var out) {
    require(out->value.rows() == 1 && out->value.cols() == 1, "backward: output must be scalar");
    out->g().setConstant(S(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->backward && it->has_grad()) it->backward();
    for (auto& [p, n] : leaves_)
      if (n->has_grad()) const_cast<Parameter<S>*>(p)->grad += n->grad;
  }

  // ---- linear algebra ---------------------------------------------------

  Var matmul(Var a, Var b) {
    require(a->value.cols() == b->value.rows(), "matmul: inner dimensions differ");
    Var out = make(a->value * b->value, a->needs_grad || b->needs_grad);
    if (out->needs_grad)
      out->backward = [=] {
        if (a->needs_grad) a->g().noalias() += out->grad * b->value.transpose();
        if (b->needs_grad) b->g().noalias() += a->value.transpose() * out->grad;
      };
    return out;
  }

  /// x * w + b with b broadcast over rows.
  Var linear(Var x, Var w, Var b) {
    require(x->value.cols() == w->value.rows(), "linear: input width mismatch");
    require(b->value.rows() == 1 && b->value.cols() == w->value.cols(), "linear: bias shape mismatch");
    M y = x->value * w->value;
    y.rowwise() += b->value.row(0);
    Var out = make(std::move(y), x->needs_grad || w->needs_grad || b->needs_grad);
    if (out->needs_grad)
      out->backward = [=] {
        if (x->needs_grad) x->g().noalias() += out->grad * w->value.transpose();
        if (w->needs_grad) w->g().noalias() += x->value.transpose() * out->grad;
        if (b->needs_grad) b->g() += out->grad.colwise().sum();
      };
    return out;
  }

  Var add(Var a, Var b) {
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(), "add: shape mismatch");
    Var out = make(a->value + b->value, a->needs_grad || b->needs_grad);
    if (out->needs_grad)
      out->backward = [=] {
        if (a->needs_grad) a->g() += out->grad;
        if (b->needs_grad) b->g() += out->grad;
      };
    return out;
  }

  Var relu(Var x) {
    Var out = make(x->value.cwiseMax(S(0)), x->needs_grad);
    if (out->needs_grad)
      out->backward = [=] {
        x->g().array() += (x->value.array() > S(0)).select(out->grad.array(), S(0));
      };
    return out;
  }

  /// Row-wise layer normalization with affine gain/bias (1 x cols each).
  Var layer_norm(Var x, Var gain, Var bias, S eps = S(1e-5)) {
    const auto cols = x->value.cols();
    M xhat(x->value.rows(), cols);
    Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(x->value.rows());
    for (Eigen::Index i = 0; i < x->value.rows(); ++i) {
      const S mean = x->value.row(i).mean();
      const S var = (x->value.row(i).array() - mean).square().mean();
      inv_std(i) = S(1) / std::sqrt(var + eps);
      xhat.row(i) = (x->value.row(i).array() - mean) * inv_std(i);
    }
    M y = xhat.array().rowwise() * gain->value.row(0).array();
    y.rowwise() += bias->value.row(0);
    Var out = make(std::move(y), x->needs_grad || gain->needs_grad || bias->needs_grad);
    if (out->needs_grad)
      out->backward = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
        if (gain->needs_grad) gain->g() += (out->grad.array() * xhat.array()).colwise().sum().matrix();
        if (bias->needs_grad) bias->g() += out->grad.colwise().sum();
        if (x->needs_grad) {
          const M dxhat = out->grad.array().rowwise() * gain->value.row(0).array();
          const auto n = static_cast<S>(cols);
          for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
            const S m1 = dxhat.row(i).sum() / n;
            const S m2 = dxhat.row(i).dot(xhat.row(i)) / n;
            x->g().row(i).array() += inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
          }
        }
      };
    return out;
  }

  Var attention(Var q, Var k, Var v, int heads, const MaskMatrix* mask) {
    auto res = multi_head_attention<S>(q->value, k->value, v->value, heads, mask);
    Var out = make(std::move(res.output), q->needs_grad || k->needs_grad || v->needs_grad);
    if (out->needs_grad)
      out->backward = [=, w = std::move(res.weights)] {
        M dq, dk, dv;
        multi_head_attention_backward<S>(q->value, k->value, v->value, w, out->grad, dq, dk, dv);
        if (q->needs_grad) q->g() += dq;
        if (k->needs_grad) k->g() += dk;
        if (v->needs_grad) v->g() += dv;
      };
    return out;
  }

  /// Inverted dropout; identity when rate == 0 or no generator is given.
  template <typename Rng>
  Var dropout(Var x, S rate, Rng* rng) {
    if (rate <= S(0) || rng == nullptr) return x;
    std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
    M mask(x->value.rows(), x->value.cols());
    const S scale = S(1) / (S(1) - rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? scale : S(0);
    Var out = make(x->value.cwiseProduct(mask), x->needs_grad);
    if (out->needs_grad)
      out->backward = [=, mask = std::move(mask)] { x->g() += out->grad.cwiseProduct(mask); };
    return out;
  }

  // ---- shape ops --------------------------------------------------------

  Var concat_rows(Var a, Var b) {
    require(a->value.cols() == b->value.cols(), "concat_rows: width mismatch");
    M y(a->value.rows() + b->value.rows(), a->value.cols());
    y << a->value, b->value;
    Var out = make(std::move(y), a->needs_grad || b->needs_grad);
    if (out->needs_grad)
      out->backward = [=] {
        if (a->needs_grad) a->g() += out->grad.topRows(a->value.rows());
        if (b->needs_grad) b->g() += out->grad.bottomRows(b->value.rows());
      };
    return out;
  }

  Var concat_cols(Var a, Var b) {
    require(a->value.rows() == b->value.rows(), "concat_cols: row mismatch");
    M y(a->value.rows(), a->value.cols() + b->value.cols());
    y << a->value, b->value;
    Var out = make(std::move(y), a->needs_grad || b->needs_grad);
    if (out->needs_grad)
      out->backward = [=] {
        if (a->needs_grad) a->g() += out->grad.leftCols(a->value.cols());
        if (b->needs_grad) b->g() += out->grad.rightCols(b->value.cols());
      };
    return out;
  }

  Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
    require(start >= 0 && count >= 0 && start + count <= x->value.rows(), "slice_rows: out of range");
    Var out = make(x->value.middleRows(start, count), x->needs_grad);
    if (out->needs_grad)
      out->backward = [=] { x->g().middleRows(start, count) += out->grad; };
    return out;
  }

  /// Causal 1-D convolution over rows. `w` stacks kernel taps vertically:
  /// rows [j*C, (j+1)*C) hold the tap applied to row t-(k-1)+j. Rows before
  /// the sequence start replicate row 0.
  Var causal_conv1d(Var x, Var w, Var b, int kernel) {
    const Eigen::Index n = x->value.rows();
    const Eigen::Index c = x->value.cols();
    require(w->value.rows() == kernel * c, "causal_conv1d: weight shape mismatch");
    M cols(n, kernel * c);
    for (Eigen::Index t = 0; t < n; ++t)
      for (int j = 0; j < kernel; ++j) {
        const Eigen::Index src = std::max<Eigen::Index>(t - (kernel - 1) + j, 0);
        cols.block(t, j * c, 1, c) = x->value.row(src);
      }
    Var im = make(std::move(cols), x->needs_grad);
    if (im->needs_grad)
      im->backward = [=] {
        for (Eigen::Index t = 0; t < n; ++t)
          for (int j = 0; j < kernel; ++j) {
            const Eigen::Index src = std::max<Eigen::Index>(t - (kernel - 1) + j, 0);
            x->g().row(src) += im->grad.block(t, j * c, 1, c);
          }
      };
    return linear(im, w, b);
  }

  // ---- losses -----------------------------------------------------------

  /// Mean binary cross-entropy with logits over the rows flagged in `rows`
  /// and all columns.
  Var bce_with_logits(Var logits, const M& targets, const std::vector<bool>& rows) {
    require(targets.rows() == logits->value.rows() && targets.cols() == logits->value.cols(),
            "bce: target/logit shape mismatch");
    require(rows.size() == static_cast<std::size_t>(targets.rows()), "bce: row flag length mismatch");
    Eigen::Index count = 0;
    S total = 0;
    for (Eigen::Index i = 0; i < targets.rows(); ++i) {
      if (!rows[static_cast<std::size_t>(i)]) continue;
      ++count;
      for (Eigen::Index j = 0; j < targets.cols(); ++j) {
        const S x = logits->value(i, j);
        total += std::max(x, S(0)) - x * targets(i, j) + std::log1p(std::exp(-std::abs(x)));
      }
    }
    require(count > 0, "bce: no rows selected");
    const S denom = static_cast<S>(count * targets.cols());
    M v(1, 1);
    v(0, 0) = total / denom;
    Var out = make(std::move(v), logits->needs_grad);
    if (out->needs_grad)
      out->backward = [=] {
        const S g = out->grad(0, 0) / denom;
        for (Eigen::Index i = 0; i < targets.rows(); ++i) {
          if (!rows[static_cast<std::size_t>(i)]) continue;
          for (Eigen::Index j = 0; j < targets.cols(); ++j) {
            const S x = logits->value(i, j);
            logits->g()(i, j) += g * (S(1) / (S(1) + std::exp(-x)) - targets(i, j));
          }
        }
      };
    return out;
  }

  /// Mean categorical cross-entropy over rows with target >= 0; rows with a
  /// negative target are skipped.
  Var softmax_cross_entropy(Var logits, const std::vector<int>& target) {
    require(target.size() == static_cast<std::size_t>(logits->value.rows()), "ce: target length mismatch");
    const Eigen::Index classes = logits->value.cols();
    M prob(logits->value.rows(), classes);
    Eigen::Index count = 0;
    S total = 0;
    for (Eigen::Index i = 0; i < prob.rows(); ++i) {
      const S mx = logits->value.row(i).maxCoeff();
      prob.row(i) = (logits->value.row(i).array() - mx).exp().matrix();
      const S sum = prob.row(i).sum();
      prob.row(i) /= sum;
      const int y = target[static_cast<std::size_t>(i)];
      if (y < 0) continue;
      require(y < classes, "ce: target class out of range");
      ++count;
      total += std::log(sum) + mx - logits->value(i, y);
    }
    require(count > 0, "ce: no rows selected");
    M v(1, 1);
    v(0, 0) = total / static_cast<S>(count);
    Var out = make(std::move(v), logits->needs_grad);
    if (out->needs_grad)
      out->backward = [=, prob = std::move(prob)] {
        const S g = out->grad(0, 0) / static_cast<S>(count);
        for (Eigen::Index i = 0; i < prob.rows(); ++i) {
          const int y = target[static_cast<std::size_t>(i)];
          if (y < 0) continue;
          auto row = logits->g().row(i);
          row += g * prob.row(i);
          row(y) -= g;
        }
      };
    return out;
  }

  /// sum_i weights[i] * terms[i] for 1x1 terms.
  Var weighted_sum(const std::vector<Var>& terms, const std::vector<S>& weights) {
    require(terms.size() == weights.size() && !terms.empty(), "weighted_sum: size mismatch");
    M v = M::Zero(1, 1);
    bool needs = false;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      v(0, 0) += weights[i] * terms[i]->value(0, 0);
      needs = needs || terms[i]->needs_grad;
    }
    Var out = make(std::move(v), needs);
    if (out->needs_grad)
      out->backward = [=] {
        for (std::size_t i = 0; i < terms.size(); ++i)
          if (terms[i]->needs_grad) terms[i]->g()(0, 0) += weights[i] * out->grad(0, 0);
      };
    return out;
  }

 private:
  Var make(M value, bool needs) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.value = std::move(value);
    n.needs_grad = grad_enabled_ && needs;
    return &n;
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<S>*, Var> leaves_;
};

}  // namespace joadaa
