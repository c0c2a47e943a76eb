#include <cmath>
#include <numbers>

#include "common.hpp"

namespace joadaa {
namespace {

using T = Tape<double>;

const char* kEasySparse = R"(
actions = a,b
mode = sparse
base_rate.a = 0.08
base_rate.b = 0.0
duration.a = 4 6
duration.b = 4 6
trigger = a -> b 2 3 1.0
train_videos = 2
test_videos = 1
num_frames = 64
feature_dim = 6
noise_sigma = 0.2
data_seed = 3
)";

Dataset easy_dataset() { return make_dataset(DatasetConfig::read(testing::kv(kEasySparse))); }

ModelConfig easy_model() {
  auto mc = testing::tiny_model(6, 2);
  mc.head_mode = HeadMode::softmax;
  mc.num_encoder_layers = 1;
  mc.num_decoder_layers = 1;
  return mc;
}

TrainConfig easy_train() {
  TrainConfig tc;
  tc.peak_lr = 1e-2;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.samples_per_video = 40;
  tc.seed = 5;
  return tc;
}

TEST(Schedule, Endpoints) {
  TrainConfig tc;
  EXPECT_EQ(lr_at(0, 1000, tc), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(400, 1000, tc), 5e-5);
  EXPECT_LE(std::abs(lr_at(1000, 1000, tc)), 1e-12);
  EXPECT_DOUBLE_EQ(lr_at(200, 1000, tc), 2.5e-5);
  EXPECT_NEAR(lr_at(700, 1000, tc), 2.5e-5, 1e-15);
}

TEST(Schedule, RejectsBadArguments) {
  TrainConfig tc;
  EXPECT_THROW(lr_at(0, 0, tc), std::invalid_argument);
  EXPECT_THROW(lr_at(-1, 10, tc), std::invalid_argument);
  EXPECT_THROW(lr_at(11, 10, tc), std::invalid_argument);
}

TEST(Schedule, ContinuousWithPeakAtWarmupBoundary) {
  for (double warm : {0.1, 0.4, 0.75}) {
    TrainConfig tc;
    tc.peak_lr = 3e-3;
    tc.warmup_fraction = warm;
    const long total = 1000;
    double prev = lr_at(0, total, tc);
    double best = prev, best_at = 0;
    for (int i = 1; i <= 10000; ++i) {
      const double s = total * static_cast<double>(i) / 10000.0;
      const double lr = lr_at(s, total, tc);
      ASSERT_GE(lr, 0.0);
      ASSERT_LT(std::abs(lr - prev), 2.0 * tc.peak_lr / total) << s;
      if (lr > best) {
        best = lr;
        best_at = s;
      }
      prev = lr;
    }
    EXPECT_DOUBLE_EQ(best, tc.peak_lr);
    EXPECT_NEAR(best_at, warm * total, 1e-9);
  }
}

TEST(Loss, PerfectLogitsGiveNearZeroLoss) {
  const auto ds = easy_dataset();
  const auto& tl = ds.train[0].timeline;
  for (auto mode : {HeadMode::sigmoid, HeadMode::softmax}) {
    const int t = 20, tq = 3;
    const std::vector<bool> valid{false, true, true, true, true, true, true, true};
    const auto tg = make_targets<double>(tl, t, valid, tq, mode);
    auto saturate = [&](const Matrix<double>& multi, const std::vector<int>& index) {
      const Eigen::Index cols = mode == HeadMode::softmax ? 3 : 2;
      Matrix<double> out = Matrix<double>::Constant(multi.rows(), cols, -20.0);
      for (Eigen::Index i = 0; i < multi.rows(); ++i) {
        if (mode == HeadMode::softmax) {
          if (index[static_cast<std::size_t>(i)] >= 0) out(i, index[static_cast<std::size_t>(i)]) = 20.0;
        } else {
          for (Eigen::Index j = 0; j < 2; ++j)
            if (multi(i, j) > 0.5) out(i, j) = 20.0;
        }
      }
      return out;
    };
    PredictionBundle<double> b;
    b.past_logits = saturate(tg.past_multi, tg.past_index);
    b.anticipation_logits = saturate(tg.ant_multi, tg.ant_index);
    b.online_logits = saturate(tg.present_multi, tg.present_index).row(0);
    const auto r = compute_loss(b, tl, t, valid, mode, TrainConfig{});
    EXPECT_LT(r.total, 1e-6);
  }
}

TEST(Loss, ZeroLogitsSigmoidIsLn2) {
  const auto ds = easy_dataset();
  PredictionBundle<double> b;
  b.past_logits = Matrix<double>::Zero(5, 2);
  b.anticipation_logits = Matrix<double>::Zero(4, 2);
  b.online_logits = RowVector<double>::Zero(2);
  const auto r = compute_loss(b, ds.train[0].timeline, 10, std::vector<bool>(5, true), HeadMode::sigmoid, TrainConfig{});
  EXPECT_NEAR(r.past, std::numbers::ln2, 1e-12);
  EXPECT_NEAR(r.anticipation, std::numbers::ln2, 1e-12);
  EXPECT_NEAR(r.present, std::numbers::ln2, 1e-12);
}

TEST(Loss, MatchesScalarLoopOracle) {
  Rng rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int rows = 1 + trial % 6, cols = 1 + trial % 5;
    const Matrix<double> x = testing::random_matrix(rows, cols, rng, 3.0);
    Matrix<double> y(rows, cols);
    std::vector<bool> use(static_cast<std::size_t>(rows));
    for (int i = 0; i < rows; ++i) {
      use[static_cast<std::size_t>(i)] = i == 0 || u(rng) < 0.7;
      for (int j = 0; j < cols; ++j) y(i, j) = u(rng) < 0.5 ? 1.0 : 0.0;
    }
    double sum = 0;
    int n = 0;
    for (int i = 0; i < rows; ++i) {
      if (!use[static_cast<std::size_t>(i)]) continue;
      for (int j = 0; j < cols; ++j, ++n) {
        const double p = 1.0 / (1.0 + std::exp(-x(i, j)));
        sum += -(y(i, j) * std::log(p) + (1 - y(i, j)) * std::log(1 - p));
      }
    }
    T tape(false);
    const double got = tape.bce_with_logits(tape.constant(x), y, use)->value(0, 0);
    EXPECT_NEAR(got, sum / n, 1e-6 * std::abs(sum / n));
  }
}

TEST(Loss, TotalIsWeightedSum) {
  const auto ds = easy_dataset();
  Rng rng(8);
  TrainConfig tc;
  tc.w_past = 0.3;
  tc.w_anticipation = 1.7;
  tc.w_present = 0.9;
  for (int t : {1, 30, 63}) {
    PredictionBundle<double> b;
    b.past_logits = testing::random_matrix(8, 3, rng);
    b.anticipation_logits = testing::random_matrix(3, 3, rng);
    b.online_logits = testing::random_matrix(1, 3, rng).row(0);
    std::vector<bool> valid(8, true);
    valid[0] = false;
    const auto r = compute_loss(b, ds.train[1].timeline, t, valid, HeadMode::softmax, tc);
    EXPECT_NEAR(r.total, 0.3 * r.past + 1.7 * r.anticipation + 0.9 * r.present, 1e-6);
  }
}

TEST(Targets, RowsMapToFrames) {
  const auto ds = easy_dataset();
  const auto& tl = ds.train[0].timeline;
  const std::vector<bool> valid{false, false, true, true, true};
  const auto tg = make_targets<double>(tl, 2, valid, 4, HeadMode::softmax);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(tg.past_rows[static_cast<std::size_t>(i)], i >= 2);
    if (i >= 2) {
      for (int j = 0; j < 2; ++j) EXPECT_EQ(tg.past_multi(i, j), tl.labels(i - 2, j));
    }
  }
  for (int k = 0; k < 4; ++k)
    for (int j = 0; j < 2; ++j) EXPECT_EQ(tg.ant_multi(k, j), tl.labels(2 + k, j));
  // Frames past the end carry no anticipation target.
  const auto end = make_targets<double>(tl, 62, valid, 4, HeadMode::softmax);
  EXPECT_EQ(end.ant_rows, (std::vector<bool>{true, true, false, false}));
  // Background is the extra last class.
  for (int f = 0; f < tl.num_frames(); ++f) {
    const auto one = make_targets<double>(tl, f, {true}, 1, HeadMode::softmax);
    const bool any = tl.labels.row(f).cast<int>().sum() > 0;
    if (!any) EXPECT_EQ(one.present_index[0], 2);
    else EXPECT_EQ(tl.labels(f, one.present_index[0]), 1);
  }
}

TEST(Targets, SoftmaxRejectsCoOccurrence) {
  EventTimeline tl;
  tl.labels = LabelMatrix::Zero(4, 2);
  tl.labels(1, 0) = tl.labels(1, 1) = 1;
  EXPECT_THROW(make_targets<double>(tl, 1, {true}, 1, HeadMode::softmax), std::invalid_argument);
  EXPECT_NO_THROW(make_targets<double>(tl, 1, {true}, 1, HeadMode::sigmoid));
}

TEST(Optimizer, ZeroLearningRateLeavesParametersUnchanged) {
  Rng rng(9);
  Parameter<double> p("p", testing::random_matrix(4, 3, rng));
  p.grad = testing::random_matrix(4, 3, rng);
  const Matrix<double> before = p.value;
  TrainConfig tc;
  tc.weight_decay = 0.5;
  AdamW<double> opt({&p}, tc);
  for (int i = 0; i < 3; ++i) opt.step(0.0);
  EXPECT_EQ((p.value - before).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(opt.steps(), 3);
}

TEST(Optimizer, DecayIsDecoupledFromGradients) {
  Parameter<double> p("p", Matrix<double>::Constant(2, 2, 2.0));
  TrainConfig tc;
  tc.weight_decay = 0.1;
  AdamW<double> opt({&p}, tc);
  opt.step(0.5);
  // Zero gradient: only the decay term acts, p -= lr * wd * p.
  EXPECT_NEAR(p.value(0, 0), 2.0 - 0.5 * 0.1 * 2.0, 1e-12);
}

TEST(Optimizer, FirstStepMovesByLearningRate) {
  Parameter<double> p("p", Matrix<double>::Zero(1, 3));
  p.grad << 3.0, -0.2, 0.0;
  TrainConfig tc;
  tc.weight_decay = 0.0;
  AdamW<double> opt({&p}, tc);
  opt.step(0.01);
  EXPECT_NEAR(p.value(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(p.value(0, 1), 0.01, 1e-9);
  EXPECT_EQ(p.value(0, 2), 0.0);
}

TEST(Optimizer, ClipBoundsGlobalNorm) {
  Rng rng(10);
  Parameter<double> a("a", Matrix<double>::Zero(3, 3)), b("b", Matrix<double>::Zero(2, 5));
  a.grad = testing::random_matrix(3, 3, rng, 4.0);
  b.grad = testing::random_matrix(2, 5, rng, 4.0);
  const double before = std::sqrt(a.grad.squaredNorm() + b.grad.squaredNorm());
  EXPECT_NEAR(clip_grad_norm<double>({&a, &b}, 1.0), before, 1e-12);
  EXPECT_NEAR(std::sqrt(a.grad.squaredNorm() + b.grad.squaredNorm()), 1.0, 1e-12);
  EXPECT_NEAR(clip_grad_norm<double>({&a, &b}, 5.0), 1.0, 1e-12);
  EXPECT_NEAR(std::sqrt(a.grad.squaredNorm() + b.grad.squaredNorm()), 1.0, 1e-12);
}

double fixed_set_loss(Trainer<float>& tr, const Dataset& ds) {
  double sum = 0;
  int n = 0;
  const auto& mc = tr.model().config();
  for (const auto& v : ds.train)
    for (int t = 1; t < v.num_frames(); t += 3, ++n) {
      const auto w = window_at<float>(v.features.features, t, mc.memory_mode, mc.long_capacity, mc.short_capacity);
      sum += compute_loss(tr.model().predict(w), v.timeline, t, w.valid, mc.head_mode, tr.train_config()).total;
    }
  return sum / n;
}

TEST(Trainer, OneEpochReducesLossOnEasyGrammar) {
  const auto ds = easy_dataset();
  Trainer<float> tr(easy_model(), easy_train(), ds.train);
  const double before = fixed_set_loss(tr, ds);
  const auto rec = tr.run_epoch();
  const double after = fixed_set_loss(tr, ds);
  EXPECT_LT(after, before);
  EXPECT_TRUE(tr.finished());
  EXPECT_EQ(rec.step, 20);
  EXPECT_EQ(tr.total_steps(), 20);
}

TEST(Trainer, SameSeedSameLogAndCheckpoint) {
  const auto ds = easy_dataset();
  auto tc = easy_train();
  tc.epochs = 2;
  auto mc = easy_model();
  mc.dropout_rate = 0.1;
  Trainer<float> a(mc, tc, ds.train), b(mc, tc, ds.train);
  const auto ra = a.run_epoch(), rb = b.run_epoch();
  EXPECT_EQ(ra.to_json_line(), rb.to_json_line());
  EXPECT_EQ(encode_checkpoint(a.state()), encode_checkpoint(b.state()));
  EXPECT_EQ(a.run_epoch().to_json_line(), b.run_epoch().to_json_line());

  tc.seed = 6;
  Trainer<float> c(mc, tc, ds.train);
  c.run_epoch();
  EXPECT_NE(encode_checkpoint(a.state()), encode_checkpoint(c.state()));
}

TEST(Trainer, ResumeFollowsTheSameTrajectory) {
  const auto ds = easy_dataset();
  auto tc = easy_train();
  tc.epochs = 3;
  Trainer<float> full(easy_model(), tc, ds.train);
  std::vector<std::string> log;
  while (!full.finished()) log.push_back(full.run_epoch().to_json_line());

  Trainer<float> first(easy_model(), tc, ds.train);
  first.run_epoch();
  const auto ck = decode_checkpoint(encode_checkpoint(first.state()));
  Trainer<float> resumed(easy_model(), tc, ds.train);
  resumed.restore(ck);
  EXPECT_EQ(resumed.epochs_done(), 1);
  EXPECT_EQ(resumed.run_epoch().to_json_line(), log[1]);
  EXPECT_EQ(resumed.run_epoch().to_json_line(), log[2]);
  EXPECT_EQ(encode_checkpoint(resumed.state()), encode_checkpoint(full.state()));
}

TEST(Trainer, RestoreRejectsDifferentModel) {
  const auto ds = easy_dataset();
  Trainer<float> a(easy_model(), easy_train(), ds.train);
  auto other = easy_model();
  other.hidden_dim = 4;
  Trainer<float> b(other, easy_train(), ds.train);
  EXPECT_THROW(b.restore(a.state()), VersionError);
}

TEST(Trainer, EpochSamplesCoverFramesFromOne) {
  const auto ds = easy_dataset();
  Trainer<float> tr(easy_model(), easy_train(), ds.train);
  const auto s = tr.epoch_samples(0);
  ASSERT_EQ(s.size(), 80u);
  std::vector<int> per_video(2, 0);
  for (const auto& x : s) {
    EXPECT_GE(x.frame, 1);
    EXPECT_LT(x.frame, 64);
    ++per_video[x.video];
  }
  EXPECT_EQ(per_video, (std::vector<int>{40, 40}));
  const auto again = tr.epoch_samples(0);
  const auto next = tr.epoch_samples(1);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    same = same && s[i].video == again[i].video && s[i].frame == again[i].frame;
    differs = differs || s[i].frame != next[i].frame;
  }
  EXPECT_TRUE(same);
  EXPECT_TRUE(differs);
}

TEST(Trainer, NonFiniteLossNamesTheHead) {
  auto ds = easy_dataset();
  for (auto& v : ds.train) v.features.features.setConstant(std::numeric_limits<float>::quiet_NaN());
  Trainer<float> tr(easy_model(), easy_train(), ds.train);
  try {
    tr.run_epoch();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("past loss"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("video_"), std::string::npos) << msg;
  }
}

TEST(Trainer, RejectsMismatchedData) {
  const auto ds = easy_dataset();
  EXPECT_THROW(Trainer<float>(testing::tiny_model(7, 2), easy_train(), ds.train), ConfigError);
  EXPECT_THROW(Trainer<float>(testing::tiny_model(6, 3), easy_train(), ds.train), ConfigError);
  const std::vector<VideoSample> none;
  EXPECT_THROW(Trainer<float>(easy_model(), easy_train(), none), ConfigError);
  auto tc = easy_train();
  tc.w_past = tc.w_anticipation = tc.w_present = 0.0;
  EXPECT_THROW(Trainer<float>(easy_model(), tc, ds.train), ConfigError);
}

TEST(Trainer, DetectionOnlyArm) {
  const auto ds = easy_dataset();
  auto mc = easy_model();
  auto tc = easy_train();
  AblationCell{MemoryMode::long_short, false, HeadType::fused}.apply(mc, tc);
  EXPECT_EQ(mc.anticipation_frames, 0);
  EXPECT_EQ(tc.w_anticipation, 0.0);
  Trainer<float> tr(mc, tc, ds.train);
  const auto rec = tr.run_epoch();
  EXPECT_TRUE(std::isfinite(rec.loss_total));
  EXPECT_NEAR(rec.loss_total, rec.loss_past + rec.loss_present, 1e-5);
  EXPECT_EQ(tr.model().find("anticipation.queries")->value.rows(), 1);
}

TEST(Trainer, TrainLoopEvaluatesOnSchedule) {
  const auto ds = easy_dataset();
  auto tc = easy_train();
  tc.epochs = 3;
  tc.samples_per_video = 4;
  Trainer<float> tr(easy_model(), tc, ds.train);
  TrainOptions opt;
  opt.eval_every = 2;
  int calls = 0;
  opt.on_epoch = [&](const EpochRecord&, const Trainer<float>&) { ++calls; };
  const auto log = train(tr, &ds.test, opt);
  ASSERT_EQ(log.size(), 3u);
  EXPECT_FALSE(log[0].eval_map.has_value());
  EXPECT_TRUE(log[1].eval_map.has_value());
  EXPECT_TRUE(log[2].eval_map.has_value());
  EXPECT_EQ(calls, 3);
  EXPECT_NE(log[2].to_json_line().find("\"eval_mAP\":"), std::string::npos);
  EXPECT_EQ(log[0].to_json_line().find("eval_mAP"), std::string::npos);
}

}  // namespace
}  // namespace joadaa
