#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "joadaa/joadaa.hpp"

namespace joadaa::testing {

template <typename S = double>
Matrix<S> random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(nd(rng));
  return m;
}

/// Small model for exact checks; dropout off.
inline ModelConfig tiny_model(int feature_dim = 6, int classes = 3) {
  ModelConfig mc;
  mc.feature_dim = feature_dim;
  mc.hidden_dim = 8;
  mc.num_heads = 2;
  mc.num_encoder_layers = 2;
  mc.num_decoder_layers = 2;
  mc.num_classes = classes;
  mc.anticipation_frames = 2;
  mc.long_capacity = 5;
  mc.short_capacity = 3;
  mc.dropout_rate = 0.0;
  return mc;
}

inline KeyValueConfig kv(const std::string& text) { return KeyValueConfig::parse(text); }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("joadaa_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// FNV-1a over every regular file (relative path + bytes), in path order.
inline std::uint64_t tree_hash(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& f : files) {
    mix(std::filesystem::relative(f, root).string());
    mix(file_bytes(f));
  }
  return h;
}

inline const char* kTinyDataset = R"(
actions = a,b,c
mode = dense
base_rate.a = 0.05
base_rate.b = 0.04
base_rate.c = 0.0
duration.a = 3 6
duration.b = 4 8
duration.c = 3 5
trigger = a -> c 4 6 0.9
train_videos = 3
test_videos = 2
num_frames = 40
feature_dim = 6
noise_sigma = 0.3
data_seed = 11
)";

}  // namespace joadaa::testing
