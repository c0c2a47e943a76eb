#include <cmath>
#include <set>

#include "common.hpp"

namespace joadaa {
namespace {

using T = Tape<double>;
using Model = JoadaaModel<double>;

FeatureWindow<double> random_window(const ModelConfig& mc, Eigen::Index real, Rng& rng) {
  const Eigen::Index t_len = mc.window_length();
  FeatureWindow<double> w;
  w.features = testing::random_matrix(t_len, mc.feature_dim, rng);
  w.valid.assign(static_cast<std::size_t>(t_len), false);
  for (Eigen::Index i = t_len - real; i < t_len; ++i) w.valid[static_cast<std::size_t>(i)] = true;
  return w;
}

double max_abs(const Matrix<double>& a, const Matrix<double>& b) { return (a - b).cwiseAbs().maxCoeff(); }

bool all_finite(const Matrix<double>& m) { return m.allFinite(); }

TEST(PositionalEncoding, MatchesClosedForm) {
  const auto pe = positional_encoding<double>(50, 10);
  for (int pos = 0; pos < 50; ++pos)
    for (int i = 0; i < 5; ++i) {
      const double angle = pos / std::pow(10000.0, 2.0 * i / 10.0);
      EXPECT_DOUBLE_EQ(pe(pos, 2 * i), std::sin(angle));
      EXPECT_DOUBLE_EQ(pe(pos, 2 * i + 1), std::cos(angle));
    }
}

TEST(Model, SingleRealFrameShapes) {
  const auto mc = testing::tiny_model();
  Model m(mc, 1);
  Rng rng(2);
  const auto w = random_window(mc, 1, rng);
  const auto out = m.predict(w);
  EXPECT_EQ(out.past_logits.rows(), mc.window_length());
  EXPECT_EQ(out.past_logits.cols(), mc.output_classes());
  EXPECT_TRUE(all_finite(out.past_logits));
  EXPECT_EQ(out.anticipation_logits.rows(), 3);
  EXPECT_EQ(out.online_logits.size(), mc.output_classes());
  EXPECT_TRUE(all_finite(out.anticipation_logits));
  EXPECT_TRUE(out.online_logits.allFinite());
}

TEST(Model, QueryCountFollowsHorizon) {
  for (int nf : {0, 6}) {
    auto mc = testing::tiny_model();
    mc.anticipation_frames = nf;
    Model m(mc, 3);
    Rng rng(4);
    EXPECT_EQ(m.predict(random_window(mc, 4, rng)).anticipation_logits.rows(), nf + 1);
  }
}

TEST(Model, ConcatenationRowCounts) {
  auto mc = testing::tiny_model();
  mc.long_capacity = 512;
  mc.short_capacity = 32;
  mc.anticipation_frames = 6;
  mc.num_encoder_layers = 1;
  mc.num_decoder_layers = 1;
  Model m(mc, 5);
  Rng rng(6);
  const auto w = random_window(mc, 100, rng);
  T tape(false);
  const auto out = m.forward(tape, w);
  EXPECT_EQ(out.online.pseudo_full->value.rows(), 551);
  EXPECT_EQ(out.online.past_and_current->value.rows(), 545);
  EXPECT_EQ(out.online.online_logits->value.cols(), mc.output_classes());
}

TEST(Model, ParameterCountMatchesFormula) {
  for (auto head : {HeadType::fused, HeadType::fc})
    for (auto mode : {HeadMode::softmax, HeadMode::sigmoid})
      for (int nf : {0, 3}) {
        auto mc = testing::tiny_model();
        mc.head_type = head;
        mc.head_mode = mode;
        mc.anticipation_frames = nf;
        mc.ffn_dim = 12;
        Model m(mc, 7);
        EXPECT_EQ(m.parameter_count(), Model::expected_parameter_count(mc));
        std::set<std::string> names;
        for (auto* p : m.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
      }
}

TEST(Model, SoftmaxHeadAddsBackgroundColumn) {
  auto mc = testing::tiny_model(6, 4);
  mc.head_mode = HeadMode::softmax;
  EXPECT_EQ(mc.output_classes(), 5);
  mc.head_mode = HeadMode::sigmoid;
  EXPECT_EQ(mc.output_classes(), 4);
}

TEST(Model, DecoderIsSharedAcrossSteps) {
  const auto mc = testing::tiny_model();
  JoadaaModel<float> m(mc, 8);
  const auto before = m.decoder_parameters();
  ASSERT_FALSE(before.empty());
  std::vector<Matrix<float>> values;
  for (auto* p : before) values.push_back(p->value);

  Rng rng(9);
  FeatureWindow<float> w;
  w.features = testing::random_matrix<float>(mc.window_length(), mc.feature_dim, rng);
  w.valid.assign(static_cast<std::size_t>(mc.window_length()), true);
  Tape<float> tape(true);
  const auto out = m.forward(tape, w);
  const Matrix<float> target = Matrix<float>::Constant(3, mc.output_classes(), 0.5f);
  tape.backward(tape.add(tape.bce_with_logits(out.anticipation.logits, target, {true, true, true}),
                         tape.bce_with_logits(out.online.online_logits, target.topRows(1), {true})));
  // Both the anticipation and the online path reach the same decoder tensors.
  for (auto* p : before) EXPECT_GT(p->grad.cwiseAbs().maxCoeff(), 0.0f) << p->name;

  TrainConfig tc;
  AdamW<float> opt(m.parameters(), tc);
  opt.step(1e-2f);
  const auto after = m.decoder_parameters();
  ASSERT_EQ(before, after);
  bool moved = false;
  for (std::size_t i = 0; i < after.size(); ++i) moved = moved || max_abs(after[i]->value.cast<double>(), values[i].cast<double>()) > 0;
  EXPECT_TRUE(moved);
  for (auto* p : m.parameters()) {
    const bool in_decoder = p->name.rfind("decoder.", 0) == 0;
    EXPECT_EQ(in_decoder, std::find(after.begin(), after.end(), p) != after.end());
  }
}

TEST(Model, AnticipationEmbeddingsFlowIntoOnlinePrediction) {
  for (auto head : {HeadType::fused, HeadType::fc}) {
    auto mc = testing::tiny_model();
    mc.head_type = head;
    Model m(mc, 10);
    Rng rng(11);
    const auto w = random_window(mc, 6, rng);
    T tape(false);
    const auto past = m.past_encode(tape, w);
    const auto ant = m.anticipate(tape, past.f_prime, w.valid);
    const auto a = m.online_predict(tape, past.f_prime, w.valid, ant.embeddings, w.current());
    Matrix<double> bumped = ant.embeddings->value + testing::random_matrix(3, mc.hidden_dim, rng, 0.5);
    const auto b = m.online_predict(tape, past.f_prime, w.valid, tape.constant(bumped), w.current());
    EXPECT_GT(max_abs(a.online_logits->value, b.online_logits->value), 1e-6);
  }
}

TEST(Model, AnticipationIsPositionSensitive) {
  const auto mc = testing::tiny_model();
  Model m(mc, 12);
  Rng rng(13);
  auto w = random_window(mc, mc.window_length(), rng);
  const auto a = m.predict(w);
  Matrix<double> reversed = w.features.colwise().reverse();
  w.features = reversed;
  const auto b = m.predict(w);
  EXPECT_GT(max_abs(a.anticipation_logits, b.anticipation_logits), 1e-6);
}

TEST(Model, PaddedRowsDoNotAffectOutputs) {
  for (auto head : {HeadType::fused, HeadType::fc}) {
    auto mc = testing::tiny_model();
    mc.head_type = head;
    Model m(mc, 14);
    Rng rng(15);
    for (Eigen::Index real = 1; real < mc.window_length(); ++real) {
      auto w = random_window(mc, real, rng);
      const auto a = m.predict(w);
      w.features.topRows(mc.window_length() - real) = testing::random_matrix(mc.window_length() - real, mc.feature_dim, rng, 50.0);
      const auto b = m.predict(w);
      EXPECT_LT(max_abs(a.anticipation_logits, b.anticipation_logits), 1e-9);
      EXPECT_LT(max_abs(a.online_logits, b.online_logits), 1e-9);
      EXPECT_LT(max_abs(a.past_logits.bottomRows(real), b.past_logits.bottomRows(real)), 1e-9);
    }
  }
}

TEST(Model, ZeroInputIgnoresInputWeights) {
  const auto mc = testing::tiny_model();
  Model m(mc, 16);
  m.find("input.b")->value.setZero();
  FeatureWindow<double> w;
  w.features = Matrix<double>::Zero(mc.window_length(), mc.feature_dim);
  w.valid.assign(static_cast<std::size_t>(mc.window_length()), true);
  const auto a = m.predict(w);
  Rng rng(17);
  m.find("input.w")->value = testing::random_matrix(mc.feature_dim, mc.hidden_dim, rng);
  const auto b = m.predict(w);
  EXPECT_EQ(max_abs(a.past_logits, b.past_logits), 0.0);
  EXPECT_EQ(max_abs(a.online_logits, b.online_logits), 0.0);
}

TEST(Model, GradientWithRespectToFeatures) {
  for (auto head : {HeadType::fused, HeadType::fc}) {
    auto mc = testing::tiny_model();
    mc.head_type = head;
    Model m(mc, 18);
    Rng rng(19);
    const auto w = random_window(mc, 6, rng);
    Parameter<double> feats("features", w.features);
    for (Eigen::Index i = 0; i < feats.value.rows(); ++i)
      if (!w.valid[static_cast<std::size_t>(i)]) feats.value.row(i).setZero();
    const RowVector<double> current = w.current();

    auto summed = [&](T& tape) {
      const auto past = m.past_encode(tape, tape.param(feats), w.valid);
      const auto ant = m.anticipate(tape, past.f_prime, w.valid);
      const auto on = m.online_predict(tape, past.f_prime, w.valid, ant.embeddings, current);
      auto total = [&](T::Var v) {
        return tape.matmul(tape.matmul(tape.constant(Matrix<double>::Ones(1, v->value.rows())), v),
                           tape.constant(Matrix<double>::Ones(v->value.cols(), 1)));
      };
      return tape.add(tape.add(total(past.past_logits), total(ant.logits)), total(on.online_logits));
    };
    {
      T tape(true);
      tape.backward(summed(tape));
    }
    const double eps = 1e-4;
    for (Eigen::Index i = 0; i < feats.value.size(); ++i) {
      double& x = feats.value.data()[i];
      const double x0 = x;
      x = x0 + eps;
      T up_tape(false);
      const double up = summed(up_tape)->value(0, 0);
      x = x0 - eps;
      T down_tape(false);
      const double down = summed(down_tape)->value(0, 0);
      x = x0;
      const double fd = (up - down) / (2 * eps);
      const double an = feats.grad.data()[i];
      EXPECT_LE(std::abs(fd - an), 1e-3 * std::max(1.0, std::abs(fd))) << i;
    }
  }
}

TEST(Head, SingleRowIsPointwise) {
  const auto mc = testing::tiny_model();
  Model m(mc, 20);
  Rng rng(21);
  T tape(false);
  const Matrix<double> x = testing::random_matrix(1, mc.hidden_dim, rng);
  const auto y = m.local_global_head(tape, tape.constant(x), {true}, nullptr);
  EXPECT_EQ(y->value.rows(), 1);
  EXPECT_EQ(y->value.cols(), mc.output_classes());
  // Replicate padding makes a one-row convolution the sum of its kernel taps.
  const auto* w = m.find("head.tcn.w");
  const auto* b = m.find("head.tcn.b");
  const int h = mc.hidden_dim;
  Matrix<double> summed = Matrix<double>::Zero(h, h);
  for (int k = 0; k < mc.tcn_kernel_size; ++k) summed += w->value.middleRows(k * h, h);
  const Matrix<double> expect = ((x * summed).rowwise() + b->value.row(0)).cwiseMax(0.0);
  EXPECT_LT(max_abs(m.local_branch(tape, tape.constant(x))->value, expect), 1e-12);
}

TEST(Head, ConstantInputGivesConstantOutput) {
  const auto mc = testing::tiny_model();
  Model m(mc, 22);
  Rng rng(23);
  const Matrix<double> row = testing::random_matrix(1, mc.hidden_dim, rng);
  const Matrix<double> seq = row.replicate(9, 1);
  T tape(false);
  const auto y = m.local_global_head(tape, tape.constant(seq), std::vector<bool>(9, true), nullptr);
  for (Eigen::Index t = 1; t < 9; ++t) EXPECT_LT((y->value.row(t) - y->value.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Head, LocalBranchIsCausal) {
  const auto mc = testing::tiny_model();
  Model m(mc, 24);
  Rng rng(25);
  const Matrix<double> seq = testing::random_matrix(10, mc.hidden_dim, rng);
  T tape(false);
  const auto a = m.local_branch(tape, tape.constant(seq))->value;
  for (Eigen::Index t = 0; t + 1 < 10; ++t) {
    Matrix<double> cut = seq;
    cut.row(t + 1).setZero();
    cut.bottomRows(10 - t - 1) = testing::random_matrix(10 - t - 1, mc.hidden_dim, rng);
    const auto b = m.local_branch(tape, tape.constant(cut))->value;
    EXPECT_EQ(max_abs(a.topRows(t + 1), b.topRows(t + 1)), 0.0);
  }
}

TEST(Head, LastRowFastPathMatchesFullHead) {
  const auto mc = testing::tiny_model();
  Model m(mc, 26);
  Rng rng(27);
  for (Eigen::Index n : {1, 2, 3, 4, 9}) {
    const Matrix<double> seq = testing::random_matrix(n, mc.hidden_dim, rng);
    std::vector<bool> valid(static_cast<std::size_t>(n), true);
    if (n > 2) valid[0] = false;
    T tape(false);
    const auto full = m.local_global_head(tape, tape.constant(seq), valid, nullptr, false)->value;
    const auto last = m.local_global_head(tape, tape.constant(seq), valid, nullptr, true)->value;
    ASSERT_EQ(last.rows(), 1);
    EXPECT_LT(max_abs(full.bottomRows(1), last), 1e-12);
  }
}

TEST(Model, OnlinePredictionIsCausal) {
  auto mc = testing::tiny_model();
  mc.dropout_rate = 0.1;
  Model m(mc, 28);
  Rng rng(29);
  const Matrix<double> stream = testing::random_matrix(30, mc.feature_dim, rng);
  for (Eigen::Index t : {0, 3, 7, 15, 28}) {
    Matrix<double> altered = stream;
    altered.bottomRows(30 - t - 1) = testing::random_matrix(30 - t - 1, mc.feature_dim, rng, 10.0);
    MemoryBank<double> a(mc.long_capacity, mc.short_capacity, mc.feature_dim);
    MemoryBank<double> b(mc.long_capacity, mc.short_capacity, mc.feature_dim);
    for (Eigen::Index i = 0; i <= t; ++i) {
      a.push(RowVector<double>(stream.row(i)));
      b.push(RowVector<double>(altered.row(i)));
    }
    const auto pa = m.predict(a.window(mc.memory_mode));
    const auto pb = m.predict(b.window(mc.memory_mode));
    for (Eigen::Index k = 0; k < pa.online_logits.size(); ++k) EXPECT_EQ(pa.online_logits(k), pb.online_logits(k));
    EXPECT_EQ(max_abs(pa.anticipation_logits, pb.anticipation_logits), 0.0);
  }
}

TEST(Model, RejectsMismatchedInputs) {
  const auto mc = testing::tiny_model();
  Model m(mc, 30);
  Rng rng(31);
  auto w = random_window(mc, 3, rng);
  w.valid.back() = false;
  EXPECT_THROW(m.predict(w), std::invalid_argument);
  FeatureWindow<double> narrow;
  narrow.features = testing::random_matrix(mc.window_length(), mc.feature_dim + 1, rng);
  narrow.valid.assign(static_cast<std::size_t>(mc.window_length()), true);
  EXPECT_THROW(m.predict(narrow), std::invalid_argument);
  auto bad = mc;
  bad.num_heads = 3;
  EXPECT_THROW(Model(bad, 1), ConfigError);
  bad = mc;
  bad.tcn_kernel_size = 2;
  EXPECT_THROW(Model(bad, 1), ConfigError);
  bad = mc;
  bad.anticipation_frames = -1;
  EXPECT_THROW(Model(bad, 1), ConfigError);
}

TEST(Model, SameSeedSameWeights) {
  const auto mc = testing::tiny_model();
  Model a(mc, 32), b(mc, 32), c(mc, 33);
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(max_abs(a.parameters()[i]->value, b.parameters()[i]->value), 0.0);
    if (a.parameters()[i]->value.size() > 0 && max_abs(a.parameters()[i]->value, c.parameters()[i]->value) > 0) differs = true;
  }
  EXPECT_TRUE(differs);
}

}  // namespace
}  // namespace joadaa
