#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "joadaa/checkpoint.hpp"
#include "joadaa/evaluation.hpp"
#include "joadaa/memory_bank.hpp"
#include "joadaa/model.hpp"
#include "joadaa/random.hpp"
#include "joadaa/synth_data.hpp"

namespace joadaa {

/// Linear warmup from 0 to peak_lr over warmup_fraction * total_steps, then
/// cosine decay to 0 at total_steps. Accepts fractional steps.
inline double lr_at(double step, long total_steps, const TrainConfig& cfg) {
  if (total_steps <= 0) throw std::invalid_argument("lr_at: total_steps must be > 0");
  require(step >= 0.0 && step <= static_cast<double>(total_steps), "lr_at: step outside [0, total_steps]");
  const double total = static_cast<double>(total_steps);
  const double warm = cfg.warmup_fraction * total;
  if (step <= warm) return cfg.peak_lr * step / warm;
  const double progress = (step - warm) / (total - warm);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct LossReport {
  double total = 0.0;
  double past = 0.0;
  double anticipation = 0.0;
  double present = 0.0;
  long step = 0;
};

/// Supervision for one (video, t) sample.
///
/// Past rows: real window rows, labelled with their own frame. Anticipation
/// row k: frame t + k when it exists. Present: frame t. Softmax heads use
/// class indices with background = num_classes; sigmoid heads use multi-hot rows.
template <typename S>
struct LossTargets {
  Matrix<S> past_multi;
  std::vector<int> past_index;
  std::vector<bool> past_rows;
  Matrix<S> ant_multi;
  std::vector<int> ant_index;
  std::vector<bool> ant_rows;
  Matrix<S> present_multi;
  std::vector<int> present_index;
};

template <typename S>
LossTargets<S> make_targets(const EventTimeline& timeline, Eigen::Index t, const std::vector<bool>& window_valid,
                            int num_queries, HeadMode mode) {
  const Eigen::Index n = timeline.num_frames();
  const Eigen::Index c = timeline.num_classes();
  require(t >= 0 && t < n, "make_targets: frame index out of range");
  const auto t_len = static_cast<Eigen::Index>(window_valid.size());
  auto index_of = [&](Eigen::Index f) {
    int idx = static_cast<int>(c);
    for (Eigen::Index j = 0; j < c; ++j) {
      if (!timeline.labels(f, j)) continue;
      if (idx != static_cast<int>(c))
        throw std::invalid_argument("softmax head needs at most one active label per frame (frame " +
                                    std::to_string(f) + ")");
      idx = static_cast<int>(j);
    }
    return idx;
  };
  auto fill = [&](Eigen::Index rows, auto frame_of, Matrix<S>& multi, std::vector<int>& index,
                  std::vector<bool>& use) {
    multi = Matrix<S>::Zero(rows, c);
    index.assign(static_cast<std::size_t>(rows), -1);
    use.assign(static_cast<std::size_t>(rows), false);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const Eigen::Index f = frame_of(i);
      if (f < 0) continue;
      use[static_cast<std::size_t>(i)] = true;
      multi.row(i) = timeline.labels.row(f).template cast<S>();
      if (mode == HeadMode::softmax) index[static_cast<std::size_t>(i)] = index_of(f);
    }
  };
  LossTargets<S> tg;
  fill(
      t_len,
      [&](Eigen::Index i) {
        const Eigen::Index f = t - (t_len - 1) + i;
        return window_valid[static_cast<std::size_t>(i)] && f >= 0 ? f : Eigen::Index{-1};
      },
      tg.past_multi, tg.past_index, tg.past_rows);
  fill(
      num_queries, [&](Eigen::Index k) { return t + k < n ? t + k : Eigen::Index{-1}; }, tg.ant_multi, tg.ant_index,
      tg.ant_rows);
  std::vector<bool> unused;
  fill(
      1, [&](Eigen::Index) { return t; }, tg.present_multi, tg.present_index, unused);
  return tg;
}

/// Per-head loss terms on a tape.
template <typename S>
struct LossVars {
  typename Tape<S>::Var past;
  typename Tape<S>::Var anticipation;
  typename Tape<S>::Var present;
};

template <typename S>
LossVars<S> head_losses(Tape<S>& tape, typename Tape<S>::Var past_logits, typename Tape<S>::Var ant_logits,
                        typename Tape<S>::Var online_logits, const LossTargets<S>& tg, HeadMode mode) {
  auto one = [&](typename Tape<S>::Var logits, const Matrix<S>& multi, const std::vector<int>& index,
                 const std::vector<bool>& rows) {
    if (mode == HeadMode::sigmoid) return tape.bce_with_logits(logits, multi, rows);
    std::vector<int> masked = index;
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (!rows[i]) masked[i] = -1;
    return tape.softmax_cross_entropy(logits, masked);
  };
  LossVars<S> out;
  out.past = one(past_logits, tg.past_multi, tg.past_index, tg.past_rows);
  out.anticipation = one(ant_logits, tg.ant_multi, tg.ant_index, tg.ant_rows);
  out.present = one(online_logits, tg.present_multi, tg.present_index, std::vector<bool>{true});
  return out;
}

/// Losses of a finished forward pass against the timeline at frame t.
template <typename S>
LossReport compute_loss(const PredictionBundle<S>& bundle, const EventTimeline& timeline, Eigen::Index t,
                        const std::vector<bool>& window_valid, HeadMode mode, const TrainConfig& cfg) {
  require(bundle.past_logits.rows() == static_cast<Eigen::Index>(window_valid.size()),
          "compute_loss: past logits do not match the window");
  const Eigen::Index expect_cols = timeline.num_classes() + (mode == HeadMode::softmax ? 1 : 0);
  require(bundle.past_logits.cols() == expect_cols && bundle.anticipation_logits.cols() == expect_cols &&
              bundle.online_logits.size() == expect_cols,
          "compute_loss: logit width does not match the class count");
  const auto tg = make_targets<S>(timeline, t, window_valid, static_cast<int>(bundle.anticipation_logits.rows()), mode);
  Tape<S> tape(false);
  const auto lv = head_losses<S>(tape, tape.constant(bundle.past_logits), tape.constant(bundle.anticipation_logits),
                                 tape.constant(Matrix<S>(bundle.online_logits)), tg, mode);
  LossReport r;
  r.past = static_cast<double>(lv.past->value(0, 0));
  r.anticipation = static_cast<double>(lv.anticipation->value(0, 0));
  r.present = static_cast<double>(lv.present->value(0, 0));
  r.total = cfg.w_past * r.past + cfg.w_anticipation * r.anticipation + cfg.w_present * r.present;
  return r;
}

/// Adam with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Parameter<S>*> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void step(double lr) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const S c1 = static_cast<S>(1.0 - std::pow(b1, static_cast<double>(t_)));
    const S c2 = static_cast<S>(1.0 - std::pow(b2, static_cast<double>(t_)));
    const S slr = static_cast<S>(lr);
    const S wd = static_cast<S>(cfg_.weight_decay);
    const S eps = static_cast<S>(cfg_.adam_eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      m_[i] = static_cast<S>(b1) * m_[i] + static_cast<S>(1.0 - b1) * p.grad;
      v_[i] = static_cast<S>(b2) * v_[i] + static_cast<S>(1.0 - b2) * p.grad.cwiseProduct(p.grad);
      const auto update = (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps) + wd * p.value.array();
      p.value.array() -= slr * update;
    }
  }

  long steps() const { return t_; }

  void save(Checkpoint& ck) const {
    ck.config.set_value("adam_steps", t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ck.add("adam.m." + params_[i]->name, m_[i]);
      ck.add("adam.v." + params_[i]->name, v_[i]);
    }
  }

  void load(const Checkpoint& ck) {
    t_ = ck.config.get_or<long>("adam_steps", 0);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i] = ck.matrix<S>("adam.m." + params_[i]->name);
      v_[i] = ck.matrix<S>("adam.v." + params_[i]->name);
    }
  }

 private:
  std::vector<Parameter<S>*> params_;
  TrainConfig cfg_;
  std::vector<Matrix<S>> m_, v_;
  long t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename S>
double clip_grad_norm(const std::vector<Parameter<S>*>& params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params) sq += static_cast<double>(p->grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto* p : params) p->grad *= scale;
  }
  return norm;
}

struct EpochRecord {
  int epoch = 0;
  long step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_past = 0.0;
  double loss_ant = 0.0;
  double loss_present = 0.0;
  std::optional<double> eval_map;

  /// One JSON object per line in the metrics log.
  std::string to_json_line() const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"step\":" << step << ",\"epoch\":" << epoch << ",\"lr\":" << lr << ",\"loss_total\":" << loss_total
       << ",\"loss_past\":" << loss_past << ",\"loss_ant\":" << loss_ant << ",\"loss_present\":" << loss_present;
    if (eval_map) os << ",\"eval_mAP\":" << *eval_map;
    os << "}";
    return os.str();
  }
};

struct Sample {
  std::size_t video;
  Eigen::Index frame;
};

/// Deterministic trainer. Each epoch draws samples_per_video current-frame
/// indices t ~ U[1, n-1] per video, shuffles them with an epoch-seeded
/// generator and steps AdamW once per batch. State after any epoch can be
/// checkpointed and resumed to an identical trajectory.
template <typename S>
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const std::vector<VideoSample>& train,
          const std::vector<VideoSample>* eval = nullptr)
      : mcfg_(model_cfg),
        tcfg_(train_cfg),
        train_(train),
        eval_(eval),
        model_(model_cfg, derive_seed(train_cfg.seed, {0x1})),
        opt_(model_.parameters(), train_cfg) {
    tcfg_.validate();
    if (train_.empty()) throw ConfigError("training split is empty");
    for (const auto& v : train_) {
      if (v.features.feature_dim() != mcfg_.feature_dim)
        throw ConfigError("dataset feature_dim " + std::to_string(v.features.feature_dim()) +
                          " differs from model feature_dim " + std::to_string(mcfg_.feature_dim));
      if (v.timeline.num_classes() != mcfg_.num_classes)
        throw ConfigError("dataset num_classes differs from model num_classes");
    }
  }

  JoadaaModel<S>& model() { return model_; }
  const JoadaaModel<S>& model() const { return model_; }
  const TrainConfig& train_config() const { return tcfg_; }
  int epochs_done() const { return epochs_done_; }
  long step() const { return step_; }
  bool finished() const { return epochs_done_ >= tcfg_.epochs; }

  long samples_per_epoch() const { return static_cast<long>(train_.size()) * tcfg_.samples_per_video; }
  long steps_per_epoch() const { return (samples_per_epoch() + tcfg_.batch_size - 1) / tcfg_.batch_size; }
  long total_steps() const { return steps_per_epoch() * tcfg_.epochs; }

  std::vector<Sample> epoch_samples(int epoch) const {
    Rng rng(derive_seed(tcfg_.seed, {0x2, static_cast<std::uint64_t>(epoch)}));
    std::vector<Sample> out;
    for (std::size_t v = 0; v < train_.size(); ++v) {
      const Eigen::Index n = train_[v].num_frames();
      for (int s = 0; s < tcfg_.samples_per_video; ++s) {
        const Eigen::Index t = n > 1 ? std::uniform_int_distribution<Eigen::Index>(1, n - 1)(rng) : 0;
        out.push_back({v, t});
      }
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
  }

  /// Forward + backward for one sample; gradients are scaled by `scale`.
  LossReport accumulate(const Sample& s, double scale, Rng* dropout_rng) {
    const auto& video = train_[s.video];
    const auto window = window_at<S>(video.features.features, s.frame, mcfg_.memory_mode, mcfg_.long_capacity,
                                     mcfg_.short_capacity);
    Tape<S> tape(true);
    const auto out = model_.forward(tape, window, dropout_rng);
    const auto tg = make_targets<S>(video.timeline, s.frame, window.valid, mcfg_.num_queries(), mcfg_.head_mode);
    const auto lv = head_losses<S>(tape, out.past.past_logits, out.anticipation.logits, out.online.online_logits, tg,
                                   mcfg_.head_mode);
    const std::vector<typename Tape<S>::Var> terms{lv.past, lv.anticipation, lv.present};
    const std::vector<S> weights{static_cast<S>(tcfg_.w_past * scale), static_cast<S>(tcfg_.w_anticipation * scale),
                                 static_cast<S>(tcfg_.w_present * scale)};
    auto total = tape.weighted_sum(terms, weights);
    LossReport r;
    r.past = static_cast<double>(lv.past->value(0, 0));
    r.anticipation = static_cast<double>(lv.anticipation->value(0, 0));
    r.present = static_cast<double>(lv.present->value(0, 0));
    r.total = tcfg_.w_past * r.past + tcfg_.w_anticipation * r.anticipation + tcfg_.w_present * r.present;
    const char* heads[] = {"past", "anticipation", "present"};
    const double vals[] = {r.past, r.anticipation, r.present};
    for (int i = 0; i < 3; ++i)
      if (!std::isfinite(vals[i]))
        throw NumericError("non-finite " + std::string(heads[i]) + " loss at step " + std::to_string(step_) +
                           " (video " + train_[s.video].id + ", frame " + std::to_string(s.frame) + ")");
    tape.backward(total);
    return r;
  }

  /// Runs the next epoch and returns its record.
  EpochRecord run_epoch() {
    require(!finished(), "Trainer::run_epoch: all epochs already done");
    const int epoch = epochs_done_;
    const auto samples = epoch_samples(epoch);
    const long total = total_steps();
    EpochRecord rec;
    rec.epoch = epoch + 1;
    double sum_t = 0, sum_p = 0, sum_a = 0, sum_c = 0;
    for (std::size_t begin = 0; begin < samples.size(); begin += static_cast<std::size_t>(tcfg_.batch_size)) {
      const std::size_t end = std::min(samples.size(), begin + static_cast<std::size_t>(tcfg_.batch_size));
      const double scale = 1.0 / static_cast<double>(end - begin);
      model_.zero_grad();
      Rng dropout_rng(derive_seed(tcfg_.seed, {0x3, static_cast<std::uint64_t>(step_)}));
      for (std::size_t i = begin; i < end; ++i) {
        const auto r = accumulate(samples[i], scale, &dropout_rng);
        sum_t += r.total;
        sum_p += r.past;
        sum_a += r.anticipation;
        sum_c += r.present;
      }
      clip_grad_norm(model_.parameters(), tcfg_.grad_clip);
      rec.lr = lr_at(static_cast<double>(step_ + 1), total, tcfg_);
      opt_.step(rec.lr);
      ++step_;
    }
    const double n = static_cast<double>(samples.size());
    rec.loss_total = sum_t / n;
    rec.loss_past = sum_p / n;
    rec.loss_ant = sum_a / n;
    rec.loss_present = sum_c / n;
    rec.step = step_;
    ++epochs_done_;
    return rec;
  }

  /// Model + optimizer + progress, in the checkpoint format.
  Checkpoint state() const {
    Checkpoint ck;
    mcfg_.write(ck.config);
    tcfg_.write(ck.config);
    ck.config.set_value("epochs_done", epochs_done_);
    ck.config.set_value("global_step", step_);
    store_parameters(ck, model_);
    opt_.save(ck);
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (!(ModelConfig::read(ck.config) == mcfg_))
      throw VersionError("checkpoint model config differs from the requested model config");
    load_parameters(ck, model_);
    opt_.load(ck);
    epochs_done_ = ck.config.require_value<int>("epochs_done");
    step_ = ck.config.require_value<long>("global_step");
  }

 private:
  ModelConfig mcfg_;
  TrainConfig tcfg_;
  const std::vector<VideoSample>& train_;
  const std::vector<VideoSample>* eval_;
  JoadaaModel<S> model_;
  AdamW<S> opt_;
  int epochs_done_ = 0;
  long step_ = 0;
};

/// Streaming options matching a model's memory configuration.
inline StreamingOptions streaming_options_for(const ModelConfig& cfg, std::vector<int> horizons) {
  StreamingOptions o;
  o.memory_mode = cfg.memory_mode;
  o.long_capacity = cfg.long_capacity;
  o.short_capacity = cfg.short_capacity;
  o.horizons = std::move(horizons);
  return o;
}

struct TrainOptions {
  /// Evaluate OAD mAP on the held-out split every `eval_every` epochs and
  /// after the last one; 0 disables evaluation.
  int eval_every = 1;
  std::function<void(const EpochRecord&, const Trainer<float>&)> on_epoch;
};

/// Full training run in float precision; returns the per-epoch log.
inline std::vector<EpochRecord> train(Trainer<float>& trainer, const std::vector<VideoSample>* eval_split,
                                      const TrainOptions& opt = {}) {
  std::vector<EpochRecord> log;
  while (!trainer.finished()) {
    EpochRecord rec = trainer.run_epoch();
    const bool last = trainer.finished();
    if (eval_split != nullptr && opt.eval_every > 0 && (rec.epoch % opt.eval_every == 0 || last)) {
      ModelPredictor<float> pred(trainer.model());
      const auto res = streaming_eval<float>(pred, *eval_split, streaming_options_for(trainer.model().config(), {}));
      rec.eval_map = res.oad.mAP;
    }
    if (opt.on_epoch) opt.on_epoch(rec, trainer);
    log.push_back(rec);
  }
  return log;
}

}  // namespace joadaa
