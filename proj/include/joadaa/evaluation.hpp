#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "joadaa/memory_bank.hpp"
#include "joadaa/model.hpp"
#include "joadaa/synth_data.hpp"

namespace joadaa {

/// AP of one ranked list: mean over positives of precision at the positive's
/// rank. Ranks by descending score; equal scores keep original index order.
inline double average_precision(std::span<const double> scores, std::span<const std::uint8_t> targets) {
  require(scores.size() == targets.size(), "average_precision: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!targets[order[r]]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  if (hits == 0) throw std::invalid_argument("average_precision: no positive targets");
  return sum / static_cast<double>(hits);
}

/// Frame-level scores and binary targets (frames x classes).
struct ScoreTable {
  Matrix<double> scores;
  LabelMatrix targets;

  Eigen::Index rows() const { return scores.rows(); }

  void append(const RowVector<double>& score_row, const Eigen::Ref<const Eigen::Matrix<std::uint8_t, 1, Eigen::Dynamic>>& target_row) {
    require(score_row.size() == target_row.size(), "ScoreTable::append: width mismatch");
    if (scores.size() == 0) {
      scores.resize(0, score_row.size());
      targets.resize(0, target_row.size());
    }
    require(score_row.size() == scores.cols(), "ScoreTable::append: width differs from table");
    scores.conservativeResize(scores.rows() + 1, Eigen::NoChange);
    targets.conservativeResize(targets.rows() + 1, Eigen::NoChange);
    scores.row(scores.rows() - 1) = score_row;
    targets.row(targets.rows() - 1) = target_row;
  }

  bool operator==(const ScoreTable& o) const {
    return scores.rows() == o.scores.rows() && scores.cols() == o.scores.cols() && scores == o.scores &&
           targets == o.targets;
  }
};

struct EvalReport {
  std::vector<double> per_class_ap;  // NaN where the class has no positive frame
  std::vector<int> excluded_classes;
  double mAP = 0.0;
  int horizon = 0;  // 0 for online detection
  long num_frames_evaluated = 0;
};

/// Mean over classes with at least one positive; the rest are listed as excluded.
inline EvalReport mean_average_precision(const ScoreTable& table, int horizon = 0) {
  require(table.scores.rows() == table.targets.rows() && table.scores.cols() == table.targets.cols(),
          "mean_average_precision: score/target shape mismatch");
  EvalReport rep;
  rep.horizon = horizon;
  rep.num_frames_evaluated = static_cast<long>(table.rows());
  double sum = 0.0;
  int counted = 0;
  std::vector<double> col(static_cast<std::size_t>(table.rows()));
  std::vector<std::uint8_t> tgt(static_cast<std::size_t>(table.rows()));
  for (Eigen::Index c = 0; c < table.scores.cols(); ++c) {
    bool any = false;
    for (Eigen::Index r = 0; r < table.rows(); ++r) {
      col[static_cast<std::size_t>(r)] = table.scores(r, c);
      tgt[static_cast<std::size_t>(r)] = table.targets(r, c);
      any = any || tgt[static_cast<std::size_t>(r)];
    }
    if (!any) {
      rep.per_class_ap.push_back(std::numeric_limits<double>::quiet_NaN());
      rep.excluded_classes.push_back(static_cast<int>(c));
      continue;
    }
    const double ap = average_precision(col, tgt);
    rep.per_class_ap.push_back(ap);
    sum += ap;
    ++counted;
  }
  rep.mAP = counted > 0 ? sum / counted : 0.0;
  return rep;
}

// ---- streaming --------------------------------------------------------------

struct StreamContext {
  std::size_t video = 0;
  Eigen::Index frame = 0;
};

/// Scores emitted at one stream position: online row (classes) and one
/// anticipation row per query (row k describes frame t + k).
struct FrameScores {
  RowVector<double> online;
  Matrix<double> anticipation;
};

/// Adapts a trained model to the streaming harness.
template <typename S>
class ModelPredictor {
 public:
  explicit ModelPredictor(const JoadaaModel<S>& model) : model_(model) {}

  int anticipation_frames() const { return model_.config().anticipation_frames; }

  FrameScores operator()(const FeatureWindow<S>& window, const StreamContext&) const {
    const auto bundle = model_.predict(window);
    const auto& cfg = model_.config();
    const Matrix<S> online = classify<S>(Matrix<S>(bundle.online_logits), cfg.head_mode);
    const Matrix<S> ant = classify<S>(bundle.anticipation_logits, cfg.head_mode);
    FrameScores out;
    out.online = online.row(0).leftCols(cfg.num_classes).template cast<double>();
    out.anticipation = ant.leftCols(cfg.num_classes).template cast<double>();
    return out;
  }

 private:
  const JoadaaModel<S>& model_;
};

/// Replays ground truth (or its negation) as scores; upper/lower-bound checks.
class OraclePredictor {
 public:
  OraclePredictor(const std::vector<VideoSample>& videos, int anticipation_frames, bool negate = false)
      : videos_(videos), nf_(anticipation_frames), negate_(negate) {}

  int anticipation_frames() const { return nf_; }

  template <typename S>
  FrameScores operator()(const FeatureWindow<S>&, const StreamContext& ctx) const {
    const auto& labels = videos_[ctx.video].timeline.labels;
    auto score = [&](Eigen::Index f) {
      RowVector<double> r = RowVector<double>::Zero(labels.cols());
      if (f < labels.rows()) r = labels.row(f).template cast<double>();
      return negate_ ? RowVector<double>(-r) : r;
    };
    FrameScores out;
    out.online = score(ctx.frame);
    out.anticipation.resize(nf_ + 1, labels.cols());
    for (int k = 0; k <= nf_; ++k) out.anticipation.row(k) = score(ctx.frame + k);
    return out;
  }

 private:
  const std::vector<VideoSample>& videos_;
  int nf_;
  bool negate_;
};

struct StreamingOptions {
  MemoryMode memory_mode = MemoryMode::long_short;
  int long_capacity = 512;
  int short_capacity = 32;
  std::vector<int> horizons{1, 2, 4, 6};
  /// When set, horizon k means the k-th frame counting the current one
  /// (frame t + k - 1) instead of k frames after it.
  bool horizon_counts_current = false;
};

struct StreamingResult {
  EvalReport oad;
  std::map<int, EvalReport> aa;
  ScoreTable oad_table;
  std::map<int, ScoreTable> aa_tables;
};

inline int horizon_row(int horizon, bool counts_current) { return counts_current ? horizon - 1 : horizon; }

/// Frame-by-frame causal evaluation. Every frame passes through a memory
/// bank in order; at time t the predictor sees only the bank's window. The
/// online score for t and the anticipation score for t + k are both
/// recorded at time t; frames whose horizon-k target lies past the video
/// end are skipped for that horizon.
template <typename S, typename Predictor>
StreamingResult streaming_eval(const Predictor& predictor, const std::vector<VideoSample>& videos,
                               const StreamingOptions& opt) {
  for (int h : opt.horizons) {
    if (h < 1) throw ConfigError("horizons must be >= 1");
    if (horizon_row(h, opt.horizon_counts_current) > predictor.anticipation_frames())
      throw ConfigError("horizon " + std::to_string(h) + " exceeds the model's anticipation frames (N_f = " +
                        std::to_string(predictor.anticipation_frames()) + ")");
  }
  require(!videos.empty(), "streaming_eval: no videos");
  StreamingResult res;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    const auto& feats = videos[v].features.features;
    const auto& labels = videos[v].timeline.labels;
    MemoryBank<S> bank(opt.long_capacity, opt.short_capacity, feats.cols());
    for (Eigen::Index t = 0; t < feats.rows(); ++t) {
      bank.push(RowVector<S>(feats.row(t).template cast<S>()));
      const FrameScores fs = predictor(bank.window(opt.memory_mode), StreamContext{v, t});
      res.oad_table.append(fs.online, labels.row(t));
      for (int h : opt.horizons) {
        const int row = horizon_row(h, opt.horizon_counts_current);
        if (t + row >= labels.rows()) continue;
        res.aa_tables[h].append(fs.anticipation.row(row), labels.row(t + row));
      }
    }
  }
  res.oad = mean_average_precision(res.oad_table, 0);
  for (auto& [h, table] : res.aa_tables) res.aa[h] = mean_average_precision(table, h);
  return res;
}

/// Online scores for a pre-recorded stream computed from directly sliced
/// windows (no memory bank); must match the streaming path.
template <typename S, typename Predictor>
ScoreTable offline_online_scores(const Predictor& predictor, const VideoSample& video, std::size_t video_index,
                                 const StreamingOptions& opt) {
  ScoreTable table;
  const auto& feats = video.features.features;
  for (Eigen::Index t = 0; t < feats.rows(); ++t) {
    const auto w = window_at<S>(feats, t, opt.memory_mode, opt.long_capacity, opt.short_capacity);
    table.append(predictor(w, StreamContext{video_index, t}).online, video.timeline.labels.row(t));
  }
  return table;
}

// ---- reports ------------------------------------------------------------------

inline std::string format_report_table(const StreamingResult& res, const ActionVocabulary& vocab) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "task      horizon  frames   mAP\n";
  os << "OAD       0        " << res.oad.num_frames_evaluated << "  " << res.oad.mAP << "\n";
  for (const auto& [h, rep] : res.aa) os << "AA        " << h << "        " << rep.num_frames_evaluated << "  " << rep.mAP << "\n";
  os << "\nper-class OAD AP\n";
  for (std::size_t c = 0; c < res.oad.per_class_ap.size(); ++c) {
    os << "  " << vocab.actions()[c] << ": ";
    if (std::isnan(res.oad.per_class_ap[c])) os << "excluded (no positives)";
    else os << res.oad.per_class_ap[c];
    os << "\n";
  }
  return os.str();
}

}  // namespace joadaa
