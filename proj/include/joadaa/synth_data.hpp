#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "joadaa/config.hpp"
#include "joadaa/random.hpp"
#include "joadaa/tensor.hpp"

namespace joadaa {

class ActionVocabulary {
 public:
  ActionVocabulary() = default;
  explicit ActionVocabulary(std::vector<std::string> actions) : actions_(std::move(actions)) {
    if (actions_.size() < 2) throw ConfigError("vocabulary needs at least 2 actions");
    std::set<std::string> seen;
    for (const auto& a : actions_) {
      if (a.empty()) throw ConfigError("vocabulary contains an empty action name");
      if (!seen.insert(a).second) throw ConfigError("duplicate action in vocabulary: " + a);
    }
  }

  const std::vector<std::string>& actions() const { return actions_; }
  int num_classes() const { return static_cast<int>(actions_.size()); }

  /// -1 when absent.
  int index_of(const std::string& name) const {
    auto it = std::find(actions_.begin(), actions_.end(), name);
    return it == actions_.end() ? -1 : static_cast<int>(it - actions_.begin());
  }

  bool operator==(const ActionVocabulary&) const = default;

 private:
  std::vector<std::string> actions_;
};

enum class DensityMode { sparse, dense };

struct Trigger {
  std::string source;
  std::string target;
  int delay_min = 0;
  int delay_max = 0;
  double probability = 1.0;
};

struct CoOccurrence {
  std::string first;
  std::string second;
  double probability = 0.0;
};

struct ForcedStart {
  std::string action;
  int frame = 0;
};

/// Stochastic grammar over action starts.
///
/// Per frame, each inactive action starts spontaneously with its base rate.
/// When an occurrence of a trigger's source ends (exclusive end frame e), the
/// target is scheduled to start at e + delay with the trigger's probability.
/// Co-occurrence rules start a partner action on the same frame (dense mode
/// only). In sparse mode at most one action is active: forced and triggered
/// starts preempt the running action, spontaneous ones wait for idle frames.
struct DependencyGrammar {
  DensityMode mode = DensityMode::dense;
  std::map<std::string, double> base_rates;
  std::map<std::string, std::pair<int, int>> durations;
  std::vector<Trigger> triggers;
  std::vector<CoOccurrence> co_occurrence;
  std::vector<ForcedStart> forced;

  void validate(const ActionVocabulary& vocab) const {
    auto known = [&](const std::string& a, const std::string& where) {
      if (vocab.index_of(a) < 0) throw ConfigError("grammar " + where + " names unknown action: " + a);
    };
    auto prob = [](double p, const std::string& where) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("grammar " + where + " probability outside [0,1]");
    };
    for (const auto& [a, p] : base_rates) {
      known(a, "base_rate");
      prob(p, "base_rate." + a);
    }
    for (const auto& [a, d] : durations) {
      known(a, "duration");
      if (d.first < 1 || d.second < d.first) throw ConfigError("grammar duration." + a + " must satisfy 1 <= min <= max");
    }
    for (const auto& a : vocab.actions())
      if (!durations.count(a)) throw ConfigError("missing config key: duration." + a);
    for (const auto& t : triggers) {
      known(t.source, "trigger");
      known(t.target, "trigger");
      prob(t.probability, "trigger");
      if (t.delay_min < 0 || t.delay_max < t.delay_min) throw ConfigError("grammar trigger delay must satisfy 0 <= min <= max");
    }
    for (const auto& c : co_occurrence) {
      known(c.first, "cooccur");
      known(c.second, "cooccur");
      prob(c.probability, "cooccur");
    }
    for (const auto& f : forced) {
      known(f.action, "force");
      if (f.frame < 0) throw ConfigError("grammar force frame must be >= 0");
    }
  }

  /// Reads `mode`, `base_rate.<a>`, `duration.<a> = min max`,
  /// `trigger = src -> dst dmin dmax p`, `cooccur = a + b p`, `force = a frame`.
  static DependencyGrammar read(const KeyValueConfig& kv, const ActionVocabulary& vocab) {
    DependencyGrammar g;
    const std::string mode = kv.get_or<std::string>("mode", "dense");
    if (mode == "dense") g.mode = DensityMode::dense;
    else if (mode == "sparse") g.mode = DensityMode::sparse;
    else throw ConfigError("config key mode: expected sparse or dense, got '" + mode + "'");
    for (const auto& a : vocab.actions()) {
      if (auto v = kv.get("base_rate." + a)) g.base_rates[a] = KeyValueConfig::parse_value<double>("base_rate." + a, *v);
      const std::string key = "duration." + a;
      const auto parts = KeyValueConfig::split(kv.require_string(key), ' ');
      if (parts.size() != 2) throw ConfigError("config key " + key + ": expected 'min max'");
      g.durations[a] = {KeyValueConfig::parse_value<int>(key, parts[0]), KeyValueConfig::parse_value<int>(key, parts[1])};
    }
    for (const auto& line : kv.get_all("trigger")) {
      const auto arrow = line.find("->");
      if (arrow == std::string::npos) throw ConfigError("config key trigger: expected 'src -> dst dmin dmax p'");
      Trigger t;
      t.source = KeyValueConfig::trim(line.substr(0, arrow));
      const auto rest = KeyValueConfig::split(line.substr(arrow + 2), ' ');
      if (rest.size() != 4) throw ConfigError("config key trigger: expected 'src -> dst dmin dmax p'");
      t.target = rest[0];
      t.delay_min = KeyValueConfig::parse_value<int>("trigger", rest[1]);
      t.delay_max = KeyValueConfig::parse_value<int>("trigger", rest[2]);
      t.probability = KeyValueConfig::parse_value<double>("trigger", rest[3]);
      g.triggers.push_back(t);
    }
    for (const auto& line : kv.get_all("cooccur")) {
      const auto plus = line.find('+');
      const auto rest = plus == std::string::npos ? std::vector<std::string>{} : KeyValueConfig::split(line.substr(plus + 1), ' ');
      if (rest.size() != 2) throw ConfigError("config key cooccur: expected 'a + b p'");
      g.co_occurrence.push_back({KeyValueConfig::trim(line.substr(0, plus)), rest[0],
                                 KeyValueConfig::parse_value<double>("cooccur", rest[1])});
    }
    for (const auto& line : kv.get_all("force")) {
      const auto parts = KeyValueConfig::split(line, ' ');
      if (parts.size() != 2) throw ConfigError("config key force: expected 'action frame'");
      g.forced.push_back({parts[0], KeyValueConfig::parse_value<int>("force", parts[1])});
    }
    g.validate(vocab);
    return g;
  }
};

struct EventTimeline {
  LabelMatrix labels;  // num_frames x num_classes

  int num_frames() const { return static_cast<int>(labels.rows()); }
  int num_classes() const { return static_cast<int>(labels.cols()); }
  double labels_per_frame() const {
    return labels.size() == 0 ? 0.0 : labels.template cast<double>().sum() / static_cast<double>(labels.rows());
  }
};

struct FeatureSequence {
  Matrix<float> features;  // num_frames x feature_dim

  int num_frames() const { return static_cast<int>(features.rows()); }
  int feature_dim() const { return static_cast<int>(features.cols()); }
};

namespace detail {

struct CompiledGrammar {
  bool sparse = false;
  std::vector<double> base;
  std::vector<std::pair<int, int>> duration;
  struct Rule {
    int source, target, dmin, dmax;
    double p;
  };
  std::vector<Rule> triggers;
  std::vector<std::array<double, 3>> co;  // first, second, p
  std::vector<std::pair<int, int>> forced;  // action, frame
};

inline CompiledGrammar compile(const DependencyGrammar& g, const ActionVocabulary& v) {
  CompiledGrammar c;
  c.sparse = g.mode == DensityMode::sparse;
  c.base.assign(static_cast<std::size_t>(v.num_classes()), 0.0);
  c.duration.resize(static_cast<std::size_t>(v.num_classes()));
  for (int a = 0; a < v.num_classes(); ++a) {
    const auto& name = v.actions()[static_cast<std::size_t>(a)];
    if (auto it = g.base_rates.find(name); it != g.base_rates.end()) c.base[static_cast<std::size_t>(a)] = it->second;
    c.duration[static_cast<std::size_t>(a)] = g.durations.at(name);
  }
  for (const auto& t : g.triggers)
    c.triggers.push_back({v.index_of(t.source), v.index_of(t.target), t.delay_min, t.delay_max, t.probability});
  for (const auto& r : g.co_occurrence)
    c.co.push_back({static_cast<double>(v.index_of(r.first)), static_cast<double>(v.index_of(r.second)), r.probability});
  for (const auto& f : g.forced) c.forced.emplace_back(v.index_of(f.action), f.frame);
  return c;
}

inline LabelMatrix simulate(const CompiledGrammar& g, int num_classes, int n, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto draw_int = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  std::vector<int> start(static_cast<std::size_t>(num_classes), -1);
  std::vector<int> end(static_cast<std::size_t>(num_classes), -1);
  std::vector<std::vector<int>> scheduled(static_cast<std::size_t>(n));
  std::vector<std::vector<int>> forced_at(static_cast<std::size_t>(n));
  for (auto [a, f] : g.forced)
    if (f < n) forced_at[static_cast<std::size_t>(f)].push_back(a);

  auto active = [&](int c, int f) { return start[static_cast<std::size_t>(c)] >= 0 && start[static_cast<std::size_t>(c)] <= f && f < end[static_cast<std::size_t>(c)]; };
  auto fire = [&](int c, int e, int min_start) {
    for (const auto& r : g.triggers) {
      if (r.source != c) continue;
      if (unit(rng) >= r.p) continue;
      const int s = std::max(e + draw_int(r.dmin, r.dmax), min_start);
      if (s < n) scheduled[static_cast<std::size_t>(s)].push_back(r.target);
    }
  };
  auto begin = [&](int c, int f) {
    const auto [lo, hi] = g.duration[static_cast<std::size_t>(c)];
    start[static_cast<std::size_t>(c)] = f;
    end[static_cast<std::size_t>(c)] = f + draw_int(lo, hi);
  };

  LabelMatrix labels = LabelMatrix::Zero(n, num_classes);
  for (int f = 0; f < n; ++f) {
    for (int c = 0; c < num_classes; ++c)
      if (end[static_cast<std::size_t>(c)] == f) fire(c, f, f);

    // (action, priority): 0 forced, 1 triggered, 2 spontaneous
    std::vector<std::pair<int, int>> cand;
    for (int a : forced_at[static_cast<std::size_t>(f)]) cand.emplace_back(a, 0);
    for (int a : scheduled[static_cast<std::size_t>(f)]) cand.emplace_back(a, 1);
    for (int c = 0; c < num_classes; ++c) {
      const double u = unit(rng);
      if (!active(c, f) && u < g.base[static_cast<std::size_t>(c)]) cand.emplace_back(c, 2);
    }

    if (!g.sparse) {
      for (std::size_t i = 0; i < cand.size(); ++i) {
        const int c = cand[i].first;
        if (active(c, f)) continue;
        begin(c, f);
        for (const auto& r : g.co)
          if (static_cast<int>(r[0]) == c && unit(rng) < r[2]) cand.emplace_back(static_cast<int>(r[1]), 2);
      }
    } else if (!cand.empty()) {
      const auto [c, pri] = cand.front();
      int cur = -1;
      for (int a = 0; a < num_classes; ++a)
        if (active(a, f)) cur = a;
      if (cur != c) {
        if (cur < 0) {
          begin(c, f);
        } else if (pri < 2) {
          end[static_cast<std::size_t>(cur)] = f;
          fire(cur, f, f + 1);
          begin(c, f);
        }
      }
    }

    for (int c = 0; c < num_classes; ++c) labels(f, c) = active(c, f) ? 1 : 0;
  }
  return labels;
}

}  // namespace detail

/// Samples a label timeline. Deterministic in (grammar, vocab, num_frames,
/// seed). Timelines with no active frame are redrawn up to `max_retries`
/// times before giving up with ConfigError.
inline EventTimeline generate_timeline(const DependencyGrammar& grammar, const ActionVocabulary& vocab,
                                       int num_frames, std::uint64_t seed, int max_retries = 100) {
  require(num_frames >= 1, "generate_timeline: num_frames must be >= 1");
  grammar.validate(vocab);
  const auto compiled = detail::compile(grammar, vocab);
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(attempt)}));
    EventTimeline tl{detail::simulate(compiled, vocab.num_classes(), num_frames, rng)};
    if (tl.labels.template cast<int>().sum() > 0) return tl;
  }
  throw ConfigError("grammar produced no active frame after " + std::to_string(max_retries) + " attempts");
}

/// Seeded (num_classes x feature_dim) matrix with unit-norm rows.
inline Matrix<double> class_embedding(int num_classes, int feature_dim, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<double> e(num_classes, feature_dim);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = normal(rng);
  for (Eigen::Index r = 0; r < e.rows(); ++r) e.row(r).normalize();
  return e;
}

/// features = labels * E + noise_sigma * N(0, 1); E from `embedding_seed`,
/// noise from `seed`.
inline FeatureSequence render_features(const EventTimeline& timeline, int feature_dim, double noise_sigma,
                                       std::uint64_t seed, std::uint64_t embedding_seed) {
  require(feature_dim >= timeline.num_classes(), "render_features: feature_dim must be >= num_classes");
  require(noise_sigma >= 0.0, "render_features: noise_sigma must be >= 0");
  const Matrix<double> emb = class_embedding(timeline.num_classes(), feature_dim, embedding_seed);
  Matrix<double> f = timeline.labels.template cast<double>() * emb;
  if (noise_sigma > 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, noise_sigma);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] += normal(rng);
  }
  return FeatureSequence{f.cast<float>()};
}

struct VideoSample {
  std::string id;
  FeatureSequence features;
  EventTimeline timeline;

  int num_frames() const { return timeline.num_frames(); }
};

struct DatasetConfig {
  ActionVocabulary vocab;
  DependencyGrammar grammar;
  int train_videos = 8;
  int test_videos = 2;
  int num_frames = 256;
  int feature_dim = 32;
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;
  KeyValueConfig source;  // snapshot written next to the data

  static DatasetConfig read(const KeyValueConfig& kv) {
    DatasetConfig c;
    c.vocab = ActionVocabulary(KeyValueConfig::split(kv.require_string("actions"), ','));
    c.grammar = DependencyGrammar::read(kv, c.vocab);
    c.train_videos = kv.require_value<int>("train_videos");
    c.test_videos = kv.require_value<int>("test_videos");
    c.num_frames = kv.require_value<int>("num_frames");
    c.feature_dim = kv.require_value<int>("feature_dim");
    c.noise_sigma = kv.get_or("noise_sigma", c.noise_sigma);
    c.seed = kv.get_or("data_seed", c.seed);
    c.source = kv;
    return c;
  }
};

struct Dataset {
  ActionVocabulary vocab;
  std::vector<VideoSample> train;
  std::vector<VideoSample> test;
  KeyValueConfig config;  // generating config, as stored in dataset.cfg

  /// Grammar density mode recorded with the data (dense when unknown).
  DensityMode density() const {
    return config.has("mode") && config.get("mode") == "sparse" ? DensityMode::sparse : DensityMode::dense;
  }
};

enum class Split : std::uint64_t { train = 1, test = 2 };

inline std::uint64_t video_seed(std::uint64_t master, Split split, int index) {
  return derive_seed(master, {static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(index)});
}

inline std::string video_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "video_%04d", index);
  return buf;
}

inline Dataset make_dataset(const DatasetConfig& cfg) {
  if (cfg.train_videos < 1 || cfg.test_videos < 1) throw ConfigError("dataset splits must each hold at least one video");
  require(cfg.num_frames >= 1, "make_dataset: num_frames must be >= 1");
  const std::uint64_t emb_seed = derive_seed(cfg.seed, {0xE3B});
  Dataset ds;
  ds.vocab = cfg.vocab;
  ds.config = cfg.source;
  auto fill = [&](Split split, int count, std::vector<VideoSample>& out) {
    for (int i = 0; i < count; ++i) {
      const std::uint64_t s = video_seed(cfg.seed, split, i);
      VideoSample v;
      v.id = video_id(i);
      v.timeline = generate_timeline(cfg.grammar, cfg.vocab, cfg.num_frames, derive_seed(s, {1}));
      v.features = render_features(v.timeline, cfg.feature_dim, cfg.noise_sigma, derive_seed(s, {2}), emb_seed);
      out.push_back(std::move(v));
    }
  };
  fill(Split::train, cfg.train_videos, ds.train);
  fill(Split::test, cfg.test_videos, ds.test);
  return ds;
}

// ---- on-disk format ---------------------------------------------------------
//
// <id>.feat : "JDFT" u32 frames u32 dim u32 reserved(0), then f32 LE row-major
// <id>.lbl  : "JDLB" u32 frames u32 classes u32 reserved(0), then u8 {0,1}
// manifest.txt : one video id per line

namespace io {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline float get_f32(std::istream& in) {
  const std::uint32_t bits = get_u32(in);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline void write_header(std::ostream& out, const char (&magic)[5], std::uint32_t rows, std::uint32_t cols) {
  out.write(magic, 4);
  put_u32(out, rows);
  put_u32(out, cols);
  put_u32(out, 0);
}

inline std::pair<std::uint32_t, std::uint32_t> read_header(std::istream& in, const char (&magic)[5],
                                                           const std::string& path) {
  char m[4];
  if (!in.read(m, 4) || std::memcmp(m, magic, 4) != 0) throw IoError("bad magic in " + path);
  const auto rows = get_u32(in);
  const auto cols = get_u32(in);
  get_u32(in);
  return {rows, cols};
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return in;
}

}  // namespace io

inline void write_features(const std::filesystem::path& p, const Matrix<float>& f) {
  auto out = io::open_out(p);
  io::write_header(out, "JDFT", static_cast<std::uint32_t>(f.rows()), static_cast<std::uint32_t>(f.cols()));
  for (Eigen::Index i = 0; i < f.size(); ++i) io::put_f32(out, f.data()[i]);
  if (!out) throw IoError("write failed: " + p.string());
}

inline Matrix<float> read_features(const std::filesystem::path& p) {
  auto in = io::open_in(p);
  const auto [rows, cols] = io::read_header(in, "JDFT", p.string());
  Matrix<float> f(rows, cols);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = io::get_f32(in);
  return f;
}

inline void write_labels(const std::filesystem::path& p, const LabelMatrix& l) {
  auto out = io::open_out(p);
  io::write_header(out, "JDLB", static_cast<std::uint32_t>(l.rows()), static_cast<std::uint32_t>(l.cols()));
  out.write(reinterpret_cast<const char*>(l.data()), static_cast<std::streamsize>(l.size()));
  if (!out) throw IoError("write failed: " + p.string());
}

inline LabelMatrix read_labels(const std::filesystem::path& p) {
  auto in = io::open_in(p);
  const auto [rows, cols] = io::read_header(in, "JDLB", p.string());
  LabelMatrix l(rows, cols);
  if (!in.read(reinterpret_cast<char*>(l.data()), static_cast<std::streamsize>(l.size())))
    throw IoError("truncated label file " + p.string());
  for (Eigen::Index i = 0; i < l.size(); ++i)
    if (l.data()[i] > 1) throw IoError("label entry outside {0,1} in " + p.string());
  return l;
}

inline void write_split(const std::filesystem::path& dir, const std::vector<VideoSample>& videos) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest in " + dir.string());
  for (const auto& v : videos) {
    write_features(dir / (v.id + ".feat"), v.features.features);
    write_labels(dir / (v.id + ".lbl"), v.timeline.labels);
    manifest << v.id << "\n";
  }
}

inline std::vector<VideoSample> read_split(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("missing manifest in " + dir.string());
  std::vector<VideoSample> out;
  std::string id;
  while (std::getline(manifest, id)) {
    id = KeyValueConfig::trim(id);
    if (id.empty()) continue;
    VideoSample v;
    v.id = id;
    v.features.features = read_features(dir / (id + ".feat"));
    v.timeline.labels = read_labels(dir / (id + ".lbl"));
    if (v.features.num_frames() != v.timeline.num_frames())
      throw IoError("frame count mismatch between features and labels for " + id);
    out.push_back(std::move(v));
  }
  return out;
}

inline void write_dataset(const std::filesystem::path& root, const Dataset& ds, const KeyValueConfig& source) {
  std::filesystem::create_directories(root);
  {
    std::ofstream cfg(root / "dataset.cfg");
    std::ofstream vocab(root / "vocab.txt");
    if (!cfg || !vocab) throw IoError("cannot write dataset metadata in " + root.string());
    cfg << source.serialize();
    for (const auto& a : ds.vocab.actions()) vocab << a << "\n";
  }
  write_split(root / "train", ds.train);
  write_split(root / "test", ds.test);
}

inline Dataset load_dataset(const std::filesystem::path& root) {
  std::ifstream vocab(root / "vocab.txt");
  if (!vocab) throw IoError("missing vocab.txt in " + root.string());
  std::vector<std::string> names;
  for (std::string line; std::getline(vocab, line);)
    if (auto t = KeyValueConfig::trim(line); !t.empty()) names.push_back(t);
  Dataset ds;
  ds.vocab = ActionVocabulary(names);
  if (std::filesystem::exists(root / "dataset.cfg")) ds.config = KeyValueConfig::load(root / "dataset.cfg");
  ds.train = read_split(root / "train");
  ds.test = read_split(root / "test");
  for (const auto* split : {&ds.train, &ds.test})
    for (const auto& v : *split)
      if (v.timeline.num_classes() != ds.vocab.num_classes()) throw IoError("class count mismatch in " + v.id);
  return ds;
}

}  // namespace joadaa
