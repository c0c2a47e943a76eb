#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "joadaa/config.hpp"
#include "joadaa/tensor.hpp"

namespace joadaa {

/// Fixed-length causal input to the model. Real rows sit at the end; the
/// front is zero padding flagged false in `valid`.
template <typename S>
struct FeatureWindow {
  Matrix<S> features;      // T x D
  std::vector<bool> valid;  // length T
  MemoryMode mode = MemoryMode::short_only;

  Eigen::Index length() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
  Eigen::Index padded() const {
    return static_cast<Eigen::Index>(std::count(valid.begin(), valid.end(), false));
  }
  /// Feature row of the most recent frame.
  RowVector<S> current() const { return features.row(features.rows() - 1); }
};

inline Eigen::Index window_length(MemoryMode mode, Eigen::Index long_capacity, Eigen::Index short_capacity) {
  return mode == MemoryMode::short_only ? short_capacity : long_capacity + short_capacity;
}

/// FIFO store of the most recent long_capacity + short_capacity frames.
/// The short segment is the newest min(short_capacity, size) rows; the long
/// segment is everything older.
template <typename S>
class MemoryBank {
 public:
  MemoryBank(Eigen::Index long_capacity, Eigen::Index short_capacity, Eigen::Index dim)
      : long_capacity_(long_capacity),
        short_capacity_(short_capacity),
        ring_(long_capacity + short_capacity, dim) {
    require(short_capacity >= 1 && long_capacity >= 0, "MemoryBank: bad capacities");
    require(dim >= 1, "MemoryBank: dim must be >= 1");
  }

  void push(std::span<const S> row) {
    if (static_cast<Eigen::Index>(row.size()) != ring_.cols())
      throw std::invalid_argument("MemoryBank::push: feature dimension mismatch");
    const Eigen::Index cap = capacity();
    const Eigen::Index slot = (head_ + size_) % cap;
    for (Eigen::Index j = 0; j < ring_.cols(); ++j) ring_(slot, j) = row[static_cast<std::size_t>(j)];
    if (size_ < cap) {
      ++size_;
    } else {
      head_ = (head_ + 1) % cap;
    }
    ++total_pushed_;
  }

  void push(const RowVector<S>& row) { push(std::span<const S>(row.data(), static_cast<std::size_t>(row.size()))); }

  Eigen::Index capacity() const { return long_capacity_ + short_capacity_; }
  Eigen::Index size() const { return size_; }
  bool empty() const { return size_ == 0; }
  std::int64_t total_pushed() const { return total_pushed_; }
  Eigen::Index short_size() const { return std::min(short_capacity_, size_); }
  Eigen::Index long_size() const { return size_ - short_size(); }

  /// Buffered row i, 0 = oldest.
  RowVector<S> row(Eigen::Index i) const { return ring_.row((head_ + i) % capacity()); }

  FeatureWindow<S> window(MemoryMode mode) const {
    if (empty()) throw std::invalid_argument("MemoryBank::window: bank is empty");
    const Eigen::Index t_len = window_length(mode, long_capacity_, short_capacity_);
    const Eigen::Index real = mode == MemoryMode::short_only ? short_size() : size_;
    FeatureWindow<S> w;
    w.mode = mode;
    w.features = Matrix<S>::Zero(t_len, ring_.cols());
    w.valid.assign(static_cast<std::size_t>(t_len), false);
    for (Eigen::Index i = 0; i < real; ++i) {
      const Eigen::Index dst = t_len - real + i;
      w.features.row(dst) = row(size_ - real + i);
      w.valid[static_cast<std::size_t>(dst)] = true;
    }
    return w;
  }

 private:
  Eigen::Index long_capacity_;
  Eigen::Index short_capacity_;
  Matrix<S> ring_;
  Eigen::Index head_ = 0;
  Eigen::Index size_ = 0;
  std::int64_t total_pushed_ = 0;
};

/// Window a bank would hold after receiving stream rows 0..t, built directly
/// from the stream.
template <typename S, typename Src>
FeatureWindow<S> window_at(const Src& stream, Eigen::Index t, MemoryMode mode, Eigen::Index long_capacity,
                           Eigen::Index short_capacity) {
  require(t >= 0 && t < stream.rows(), "window_at: frame index out of range");
  const Eigen::Index t_len = window_length(mode, long_capacity, short_capacity);
  const Eigen::Index real = std::min(t_len, t + 1);
  FeatureWindow<S> w;
  w.mode = mode;
  w.features = Matrix<S>::Zero(t_len, stream.cols());
  w.features.bottomRows(real) = stream.middleRows(t + 1 - real, real).template cast<S>();
  w.valid.assign(static_cast<std::size_t>(t_len - real), false);
  w.valid.resize(static_cast<std::size_t>(t_len), true);
  return w;
}

}  // namespace joadaa
