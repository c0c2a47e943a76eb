#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "joadaa/tensor.hpp"

namespace joadaa {

/// Ordered `key = value` text config. Keys may repeat (e.g. one `trigger`
/// line per rule); `#` starts a comment.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      cfg.entries_.emplace_back(std::move(key), trim(line.substr(eq + 1)));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

  bool has(const std::string& key) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
  }

  /// Last value for `key`, if any.
  std::optional<std::string> get(const std::string& key) const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
      if (it->first == key) return it->second;
    return std::nullopt;
  }

  std::vector<std::string> get_all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_)
      if (k == key) out.push_back(v);
    return out;
  }

  std::string require_string(const std::string& key) const {
    auto v = get(key);
    if (!v) throw ConfigError("missing config key: " + key);
    return *v;
  }

  template <typename T>
  T get_or(const std::string& key, T fallback) const {
    auto v = get(key);
    return v ? parse_value<T>(key, *v) : fallback;
  }

  template <typename T>
  T require_value(const std::string& key) const {
    return parse_value<T>(key, require_string(key));
  }

  /// Replaces every entry for `key` with a single one.
  void set(const std::string& key, const std::string& value) {
    erase(key);
    entries_.emplace_back(key, value);
  }
  template <typename T>
  void set_value(const std::string& key, const T& value) {
    set(key, format_value(value));
  }

  void add(const std::string& key, const std::string& value) { entries_.emplace_back(key, value); }

  void erase(const std::string& key) {
    entries_.erase(std::remove_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; }),
                   entries_.end());
  }

  /// Entries of `other` override same-named entries here.
  void merge(const KeyValueConfig& other) {
    for (const auto& [k, v] : other.entries_) erase(k);
    for (const auto& e : other.entries_) entries_.push_back(e);
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  template <typename T>
  static T parse_value(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1" || text == "yes") return true;
      if (text == "false" || text == "0" || text == "no") return false;
      throw ConfigError("config key " + key + ": expected boolean, got '" + text + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
      try {
        std::size_t used = 0;
        const double d = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return static_cast<T>(d);
      } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": expected number, got '" + text + "'");
      }
    } else {
      T value{};
      const auto* end = text.data() + text.size();
      auto [ptr, ec] = std::from_chars(text.data(), end, value);
      if (ec != std::errc() || ptr != end)
        throw ConfigError("config key " + key + ": expected integer, got '" + text + "'");
      return value;
    }
  }

  template <typename T>
  static std::string format_value(const T& v) {
    if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
      std::ostringstream os;
      os.precision(17);
      os << v;
      return os.str();
    } else {
      return std::to_string(v);
    }
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

enum class HeadMode { softmax, sigmoid };
enum class HeadType { fused, fc };
enum class MemoryMode { short_only, long_short };

inline std::string to_string(HeadMode m) { return m == HeadMode::softmax ? "softmax" : "sigmoid"; }
inline std::string to_string(HeadType h) { return h == HeadType::fused ? "fused" : "fc"; }
inline std::string to_string(MemoryMode m) { return m == MemoryMode::short_only ? "short" : "long_short"; }

inline HeadMode parse_head_mode(const std::string& s) {
  if (s == "softmax") return HeadMode::softmax;
  if (s == "sigmoid") return HeadMode::sigmoid;
  throw ConfigError("head_mode must be softmax or sigmoid, got '" + s + "'");
}
inline HeadType parse_head_type(const std::string& s) {
  if (s == "fused") return HeadType::fused;
  if (s == "fc") return HeadType::fc;
  throw ConfigError("head must be fused or fc, got '" + s + "'");
}
inline MemoryMode parse_memory_mode(const std::string& s) {
  if (s == "short" || s == "short_only") return MemoryMode::short_only;
  if (s == "long_short") return MemoryMode::long_short;
  throw ConfigError("memory_mode must be short or long_short, got '" + s + "'");
}

/// Network shape. Defaults follow the full-scale recipe; desk runs override
/// hidden_dim / num_heads / capacities through config files.
struct ModelConfig {
  int feature_dim = 1024;
  int hidden_dim = 1024;
  int num_heads = 16;
  int num_encoder_layers = 2;
  int num_decoder_layers = 2;
  int ffn_dim = 0;  // 0 -> 2 * hidden_dim
  int anticipation_frames = 6;
  int num_classes = 20;
  HeadMode head_mode = HeadMode::sigmoid;
  HeadType head_type = HeadType::fused;
  int tcn_kernel_size = 3;
  double dropout_rate = 0.1;
  MemoryMode memory_mode = MemoryMode::long_short;
  int long_capacity = 512;
  int short_capacity = 32;

  int effective_ffn_dim() const { return ffn_dim > 0 ? ffn_dim : 2 * hidden_dim; }
  int num_queries() const { return 1 + anticipation_frames; }
  /// Softmax heads carry one extra background column (last index).
  int output_classes() const { return num_classes + (head_mode == HeadMode::softmax ? 1 : 0); }
  int window_length() const {
    return memory_mode == MemoryMode::short_only ? short_capacity : long_capacity + short_capacity;
  }

  void validate() const {
    auto bad = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
    if (feature_dim < 1) bad("feature_dim must be >= 1");
    if (hidden_dim < 1 || num_heads < 1) bad("hidden_dim and num_heads must be >= 1");
    if (hidden_dim % num_heads != 0) bad("hidden_dim must be divisible by num_heads");
    if (num_encoder_layers < 1 || num_decoder_layers < 1) bad("layer counts must be >= 1");
    if (ffn_dim < 0) bad("ffn_dim must be >= 0");
    if (anticipation_frames < 0) bad("anticipation_frames (N_f) must be >= 0");
    if (num_classes < 2) bad("num_classes must be >= 2");
    if (tcn_kernel_size < 1 || tcn_kernel_size % 2 == 0) bad("tcn_kernel_size must be odd and >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) bad("dropout_rate must be in [0,1)");
    if (short_capacity < 1 || long_capacity < 0) bad("capacities must be short >= 1, long >= 0");
  }

  void write(KeyValueConfig& kv) const {
    kv.set_value("feature_dim", feature_dim);
    kv.set_value("hidden_dim", hidden_dim);
    kv.set_value("num_heads", num_heads);
    kv.set_value("num_encoder_layers", num_encoder_layers);
    kv.set_value("num_decoder_layers", num_decoder_layers);
    kv.set_value("ffn_dim", ffn_dim);
    kv.set_value("anticipation_frames", anticipation_frames);
    kv.set_value("num_classes", num_classes);
    kv.set("head_mode", to_string(head_mode));
    kv.set("head", to_string(head_type));
    kv.set_value("tcn_kernel_size", tcn_kernel_size);
    kv.set_value("dropout_rate", dropout_rate);
    kv.set("memory_mode", to_string(memory_mode));
    kv.set_value("long_capacity", long_capacity);
    kv.set_value("short_capacity", short_capacity);
  }

  static ModelConfig read(const KeyValueConfig& kv);
  static ModelConfig read(const KeyValueConfig& kv, ModelConfig base) {
    ModelConfig c = base;
    c.feature_dim = kv.get_or("feature_dim", c.feature_dim);
    c.hidden_dim = kv.get_or("hidden_dim", c.hidden_dim);
    c.num_heads = kv.get_or("num_heads", c.num_heads);
    c.num_encoder_layers = kv.get_or("num_encoder_layers", c.num_encoder_layers);
    c.num_decoder_layers = kv.get_or("num_decoder_layers", c.num_decoder_layers);
    c.ffn_dim = kv.get_or("ffn_dim", c.ffn_dim);
    c.anticipation_frames = kv.get_or("anticipation_frames", c.anticipation_frames);
    c.num_classes = kv.get_or("num_classes", c.num_classes);
    if (auto v = kv.get("head_mode")) c.head_mode = parse_head_mode(*v);
    if (auto v = kv.get("head")) c.head_type = parse_head_type(*v);
    c.tcn_kernel_size = kv.get_or("tcn_kernel_size", c.tcn_kernel_size);
    c.dropout_rate = kv.get_or("dropout_rate", c.dropout_rate);
    if (auto v = kv.get("memory_mode")) c.memory_mode = parse_memory_mode(*v);
    c.long_capacity = kv.get_or("long_capacity", c.long_capacity);
    c.short_capacity = kv.get_or("short_capacity", c.short_capacity);
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

inline ModelConfig ModelConfig::read(const KeyValueConfig& kv) { return read(kv, ModelConfig{}); }

/// Optimizer, schedule and loop settings.
struct TrainConfig {
  double peak_lr = 5e-5;
  double weight_decay = 5e-5;
  double warmup_fraction = 0.4;
  int batch_size = 4;
  int epochs = 25;
  double w_past = 1.0;
  double w_anticipation = 1.0;
  double w_present = 1.0;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables
  int samples_per_video = 1;

  void validate() const {
    auto bad = [](const std::string& what) { throw ConfigError("invalid train config: " + what); };
    if (!(peak_lr >= 0.0)) bad("peak_lr must be >= 0");
    if (!(weight_decay >= 0.0)) bad("weight_decay must be >= 0");
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) bad("warmup_fraction must be in (0,1)");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (epochs < 1) bad("epochs must be >= 1");
    if (w_past < 0 || w_anticipation < 0 || w_present < 0) bad("loss weights must be >= 0");
    if (w_past + w_anticipation + w_present <= 0) bad("loss weights must not all be zero");
    if (samples_per_video < 1) bad("samples_per_video must be >= 1");
  }

  void write(KeyValueConfig& kv) const {
    kv.set_value("peak_lr", peak_lr);
    kv.set_value("weight_decay", weight_decay);
    kv.set_value("warmup_fraction", warmup_fraction);
    kv.set_value("batch_size", batch_size);
    kv.set_value("epochs", epochs);
    kv.set_value("w_past", w_past);
    kv.set_value("w_anticipation", w_anticipation);
    kv.set_value("w_present", w_present);
    kv.set_value("seed", seed);
    kv.set_value("beta1", beta1);
    kv.set_value("beta2", beta2);
    kv.set_value("adam_eps", adam_eps);
    kv.set_value("grad_clip", grad_clip);
    kv.set_value("samples_per_video", samples_per_video);
  }

  static TrainConfig read(const KeyValueConfig& kv);
  static TrainConfig read(const KeyValueConfig& kv, TrainConfig base) {
    TrainConfig c = base;
    c.peak_lr = kv.get_or("peak_lr", c.peak_lr);
    c.weight_decay = kv.get_or("weight_decay", c.weight_decay);
    c.warmup_fraction = kv.get_or("warmup_fraction", c.warmup_fraction);
    c.batch_size = kv.get_or("batch_size", c.batch_size);
    c.epochs = kv.get_or("epochs", c.epochs);
    c.w_past = kv.get_or("w_past", c.w_past);
    c.w_anticipation = kv.get_or("w_anticipation", c.w_anticipation);
    c.w_present = kv.get_or("w_present", c.w_present);
    c.seed = kv.get_or("seed", c.seed);
    c.beta1 = kv.get_or("beta1", c.beta1);
    c.beta2 = kv.get_or("beta2", c.beta2);
    c.adam_eps = kv.get_or("adam_eps", c.adam_eps);
    c.grad_clip = kv.get_or("grad_clip", c.grad_clip);
    c.samples_per_video = kv.get_or("samples_per_video", c.samples_per_video);
    return c;
  }

  bool operator==(const TrainConfig&) const = default;
};

inline TrainConfig TrainConfig::read(const KeyValueConfig& kv) { return read(kv, TrainConfig{}); }

}  // namespace joadaa
