#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "joadaa/autograd.hpp"
#include "joadaa/config.hpp"
#include "joadaa/memory_bank.hpp"
#include "joadaa/random.hpp"

namespace joadaa {

/// Fixed sinusoidal table: (pos, 2i) = sin(pos / 10000^(2i/dim)),
/// (pos, 2i+1) = cos(pos / 10000^(2i/dim)).
template <typename S>
Matrix<S> positional_encoding(Eigen::Index positions, Eigen::Index dim) {
  Matrix<S> pe(positions, dim);
  for (Eigen::Index pos = 0; pos < positions; ++pos)
    for (Eigen::Index i = 0; 2 * i < dim; ++i) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(dim));
      pe(pos, 2 * i) = static_cast<S>(std::sin(angle));
      if (2 * i + 1 < dim) pe(pos, 2 * i + 1) = static_cast<S>(std::cos(angle));
    }
  return pe;
}

/// Per-head logits of one forward pass.
template <typename S>
struct PredictionBundle {
  Matrix<S> past_logits;          // T x K
  Matrix<S> anticipation_logits;  // N_q x K, row k is frame t + k
  RowVector<S> online_logits;     // K, current frame
};

/// Probabilities from logits: row-wise softmax or element-wise sigmoid.
template <typename S>
Matrix<S> classify(const Matrix<S>& logits, HeadMode mode) {
  Matrix<S> p(logits.rows(), logits.cols());
  if (mode == HeadMode::sigmoid) {
    p = (S(1) / (S(1) + (-logits.array()).exp())).matrix();
    return p;
  }
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const S mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

/// Joint online detection / anticipation network.
///
/// Past block: input projection + sinusoidal positions + transformer encoder,
/// with a per-frame classifier on its output F'. Anticipation block: N_q
/// learnable queries (plus positions) decoded against F'. Online block: the
/// projected current frame is decoded by the same decoder against
/// [F' ; anticipation embeddings]; [F' ; updated current] then feeds the
/// local (causal conv) / global (encoder layer) head whose concatenated
/// outputs are classified by a linear layer at the current-frame row. With
/// head_type == fc the updated current embedding is classified directly.
template <typename S>
class JoadaaModel {
 public:
  using TapeT = Tape<S>;
  using Var = typename TapeT::Var;

  struct Linear {
    Parameter<S>* w = nullptr;
    Parameter<S>* b = nullptr;
  };
  struct Norm {
    Parameter<S>* gain = nullptr;
    Parameter<S>* bias = nullptr;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct FeedForward {
    Linear in, out;
  };
  struct EncoderLayer {
    Attention self;
    Norm norm1;
    FeedForward ffn;
    Norm norm2;
  };
  struct DecoderLayer {
    Attention self;
    Norm norm1;
    Attention cross;
    Norm norm2;
    FeedForward ffn;
    Norm norm3;
  };

  struct PastOutput {
    Var f_prime;
    Var past_logits;
  };
  struct AnticipationOutput {
    Var embeddings;
    Var logits;
  };
  struct OnlineOutput {
    Var online_logits;     // 1 x K
    Var updated_current;   // 1 x H
    Var pseudo_full;       // [F' ; anticipation embeddings]
    Var past_and_current;  // [F' ; updated current]
  };
  struct Outputs {
    PastOutput past;
    AnticipationOutput anticipation;
    OnlineOutput online;
  };

  JoadaaModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    cfg_.validate();
    pe_ = positional_encoding<S>(std::max(cfg_.window_length(), cfg_.num_queries()), cfg_.hidden_dim);
    const int h = cfg_.hidden_dim;
    const int k = cfg_.output_classes();
    input_ = make_linear("input", cfg_.feature_dim, h);
    for (int l = 0; l < cfg_.num_encoder_layers; ++l) encoder_.push_back(make_encoder("past.enc" + std::to_string(l)));
    past_cls_ = make_linear("past.cls", h, k);
    queries_ = add_param("anticipation.queries", normal(cfg_.num_queries(), h, 0.1));
    for (int l = 0; l < cfg_.num_decoder_layers; ++l) decoder_.push_back(make_decoder("decoder.l" + std::to_string(l)));
    ant_cls_ = make_linear("anticipation.cls", h, k);
    if (cfg_.head_type == HeadType::fused) {
      conv_ = make_linear("head.tcn", cfg_.tcn_kernel_size * h, h);
      head_enc_ = make_encoder("head.enc");
      head_fc_ = make_linear("head.fc", 2 * h, k);
    } else {
      head_fc_ = make_linear("head.fc", h, k);
    }
  }

  JoadaaModel(const JoadaaModel&) = delete;
  JoadaaModel& operator=(const JoadaaModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Parameter<S>*>& parameters() const { return order_; }

  Parameter<S>* find(const std::string& name) const {
    for (auto* p : order_)
      if (p->name == name) return p;
    return nullptr;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : order_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  /// Parameters of the single decoder shared by anticipation and online prediction.
  std::vector<Parameter<S>*> decoder_parameters() const {
    std::vector<Parameter<S>*> out;
    for (auto* p : order_)
      if (p->name.rfind("decoder.", 0) == 0) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto* p : order_) p->zero_grad();
  }

  // ---- blocks -------------------------------------------------------------

  PastOutput past_encode(TapeT& tape, const FeatureWindow<S>& window, Rng* rng = nullptr) const {
    require(window.dim() == cfg_.feature_dim, "past_encode: feature dimension mismatch");
    require(static_cast<Eigen::Index>(window.valid.size()) == window.length(), "past_encode: mask length mismatch");
    require(window.valid.back(), "past_encode: current (last) row must be real");
    Matrix<S> f = window.features;
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      if (!window.valid[static_cast<std::size_t>(i)]) f.row(i).setZero();
    return past_encode(tape, tape.constant(std::move(f)), window.valid, rng);
  }

  /// Same as above with the (already padding-zeroed) features on the tape.
  PastOutput past_encode(TapeT& tape, Var features, const std::vector<bool>& valid, Rng* rng = nullptr) const {
    require(features->value.cols() == cfg_.feature_dim, "past_encode: feature dimension mismatch");
    require(static_cast<Eigen::Index>(valid.size()) == features->value.rows(), "past_encode: mask length mismatch");
    Var x = linear(tape, input_, features);
    x = tape.add(x, tape.constant(positions(features->value.rows())));
    for (const auto& layer : encoder_) x = encoder_layer(tape, layer, x, valid, rng, 0);
    return {x, linear(tape, past_cls_, x)};
  }

  AnticipationOutput anticipate(TapeT& tape, Var f_prime, const std::vector<bool>& memory_valid,
                                Rng* rng = nullptr) const {
    require(f_prime->value.cols() == cfg_.hidden_dim, "anticipate: memory width differs from model width");
    Var q = tape.add(tape.param(*queries_),
                     tape.constant(positions(cfg_.num_queries())));
    Var emb = decode(tape, q, f_prime, memory_valid, rng);
    return {emb, linear(tape, ant_cls_, emb)};
  }

  OnlineOutput online_predict(TapeT& tape, Var f_prime, const std::vector<bool>& memory_valid, Var anticipation,
                              const RowVector<S>& current, Rng* rng = nullptr) const {
    require(current.size() == cfg_.feature_dim, "online_predict: current feature dimension mismatch");
    require(f_prime->value.cols() == anticipation->value.cols(), "online_predict: embedding widths differ");
    const Eigen::Index t_len = f_prime->value.rows();
    Var c0 = linear(tape, input_, tape.constant(Matrix<S>(current)));
    c0 = tape.add(c0, tape.constant(positions(t_len).bottomRows(1)));

    Var pseudo_full = tape.concat_rows(f_prime, anticipation);
    std::vector<bool> valid1 = memory_valid;
    valid1.resize(static_cast<std::size_t>(pseudo_full->value.rows()), true);
    Var updated = decode(tape, c0, pseudo_full, valid1, rng);

    Var past_current = tape.concat_rows(f_prime, updated);
    Var logits;
    if (cfg_.head_type == HeadType::fused) {
      std::vector<bool> valid2 = memory_valid;
      valid2.push_back(true);
      logits = local_global_head(tape, past_current, valid2, rng, true);
    } else {
      logits = linear(tape, head_fc_, updated);
    }
    return {logits, updated, pseudo_full, past_current};
  }

  /// Local/global head over a (T' x H) sequence. Returns (T' x K) logits, or
  /// only the final row when `last_row_only` is set (identical values).
  Var local_global_head(TapeT& tape, Var seq, const std::vector<bool>& key_valid, Rng* rng,
                        bool last_row_only = false) const {
    require(cfg_.head_type == HeadType::fused, "local_global_head: model uses the fc head");
    const Eigen::Index n = seq->value.rows();
    require(n >= 1, "local_global_head: empty sequence");
    const Eigen::Index kernel = cfg_.tcn_kernel_size;
    const Eigen::Index start = last_row_only ? n - 1 : 0;

    Var local;
    if (last_row_only && n > kernel) {
      Var tail = tape.slice_rows(seq, n - kernel, kernel);
      Var conv = tape.causal_conv1d(tail, tape.param(*conv_.w), tape.param(*conv_.b), cfg_.tcn_kernel_size);
      local = tape.slice_rows(conv, kernel - 1, 1);
    } else {
      Var conv = tape.causal_conv1d(seq, tape.param(*conv_.w), tape.param(*conv_.b), cfg_.tcn_kernel_size);
      local = tape.slice_rows(conv, start, n - start);
    }
    local = tape.relu(local);
    Var global = encoder_layer(tape, head_enc_, seq, key_valid, rng, start);
    return linear(tape, head_fc_, tape.concat_cols(local, global));
  }

  /// Local branch alone (causal conv + relu) for inspection.
  Var local_branch(TapeT& tape, Var seq) const {
    return tape.relu(tape.causal_conv1d(seq, tape.param(*conv_.w), tape.param(*conv_.b), cfg_.tcn_kernel_size));
  }

  Outputs forward(TapeT& tape, const FeatureWindow<S>& window, Rng* rng = nullptr) const {
    Outputs out;
    out.past = past_encode(tape, window, rng);
    out.anticipation = anticipate(tape, out.past.f_prime, window.valid, rng);
    out.online = online_predict(tape, out.past.f_prime, window.valid, out.anticipation.embeddings,
                                window.current(), rng);
    return out;
  }

  /// Inference pass (no gradients, no dropout).
  PredictionBundle<S> predict(const FeatureWindow<S>& window) const {
    TapeT tape(false);
    const auto out = forward(tape, window, nullptr);
    return {out.past.past_logits->value, out.anticipation.logits->value, out.online.online_logits->value.row(0)};
  }

  /// Closed-form trainable parameter count for `cfg`.
  static std::size_t expected_parameter_count(const ModelConfig& cfg) {
    const std::size_t h = static_cast<std::size_t>(cfg.hidden_dim);
    const std::size_t f = static_cast<std::size_t>(cfg.effective_ffn_dim());
    const std::size_t d = static_cast<std::size_t>(cfg.feature_dim);
    const std::size_t k = static_cast<std::size_t>(cfg.output_classes());
    const std::size_t attn = 4 * h * h + 4 * h;
    const std::size_t ffn = 2 * h * f + f + h;
    const std::size_t norm = 2 * h;
    const std::size_t enc = attn + ffn + 2 * norm;
    const std::size_t dec = 2 * attn + ffn + 3 * norm;
    std::size_t n = d * h + h;                                  // input projection
    n += static_cast<std::size_t>(cfg.num_encoder_layers) * enc;  // past encoder
    n += h * k + k;                                              // past classifier
    n += static_cast<std::size_t>(cfg.num_queries()) * h;        // anticipation queries
    n += static_cast<std::size_t>(cfg.num_decoder_layers) * dec;  // shared decoder
    n += h * k + k;                                              // anticipation classifier
    if (cfg.head_type == HeadType::fused)
      n += static_cast<std::size_t>(cfg.tcn_kernel_size) * h * h + h + enc + 2 * h * k + k;
    else
      n += h * k + k;
    return n;
  }

 private:
  Matrix<S> positions(Eigen::Index n) const {
    if (n <= pe_.rows()) return pe_.topRows(n);
    return positional_encoding<S>(n, cfg_.hidden_dim);
  }

  Parameter<S>* add_param(const std::string& name, Matrix<S> value) {
    params_.emplace_back(name, std::move(value));
    order_.push_back(&params_.back());
    return &params_.back();
  }

  Matrix<S> normal(Eigen::Index rows, Eigen::Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng_));
    return m;
  }

  Linear make_linear(const std::string& name, int in, int out) {
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-a, a);
    Matrix<S> w(in, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(dist(rng_));
    Linear l;
    l.w = add_param(name + ".w", std::move(w));
    l.b = add_param(name + ".b", Matrix<S>::Zero(1, out));
    return l;
  }

  Norm make_norm(const std::string& name) {
    Norm n;
    n.gain = add_param(name + ".gain", Matrix<S>::Ones(1, cfg_.hidden_dim));
    n.bias = add_param(name + ".bias", Matrix<S>::Zero(1, cfg_.hidden_dim));
    return n;
  }

  Attention make_attention(const std::string& name) {
    const int h = cfg_.hidden_dim;
    return {make_linear(name + ".q", h, h), make_linear(name + ".k", h, h), make_linear(name + ".v", h, h),
            make_linear(name + ".o", h, h)};
  }

  FeedForward make_ffn(const std::string& name) {
    return {make_linear(name + ".in", cfg_.hidden_dim, cfg_.effective_ffn_dim()),
            make_linear(name + ".out", cfg_.effective_ffn_dim(), cfg_.hidden_dim)};
  }

  EncoderLayer make_encoder(const std::string& name) {
    EncoderLayer e;
    e.self = make_attention(name + ".self");
    e.norm1 = make_norm(name + ".norm1");
    e.ffn = make_ffn(name + ".ffn");
    e.norm2 = make_norm(name + ".norm2");
    return e;
  }

  DecoderLayer make_decoder(const std::string& name) {
    DecoderLayer d;
    d.self = make_attention(name + ".self");
    d.norm1 = make_norm(name + ".norm1");
    d.cross = make_attention(name + ".cross");
    d.norm2 = make_norm(name + ".norm2");
    d.ffn = make_ffn(name + ".ffn");
    d.norm3 = make_norm(name + ".norm3");
    return d;
  }

  Var linear(TapeT& tape, const Linear& l, Var x) const { return tape.linear(x, tape.param(*l.w), tape.param(*l.b)); }

  Var norm(TapeT& tape, const Norm& n, Var x) const {
    return tape.layer_norm(x, tape.param(*n.gain), tape.param(*n.bias));
  }

  Var attend(TapeT& tape, const Attention& a, Var q_in, Var kv_in, const std::vector<bool>* key_valid) const {
    Var q = linear(tape, a.q, q_in);
    Var k = linear(tape, a.k, kv_in);
    Var v = linear(tape, a.v, kv_in);
    Var ctx;
    if (key_valid != nullptr && std::find(key_valid->begin(), key_valid->end(), false) != key_valid->end()) {
      const MaskMatrix m = key_mask(q_in->value.rows(), *key_valid);
      ctx = tape.attention(q, k, v, cfg_.num_heads, &m);
    } else {
      ctx = tape.attention(q, k, v, cfg_.num_heads, nullptr);
    }
    return linear(tape, a.o, ctx);
  }

  Var residual(TapeT& tape, const Norm& n, Var x, Var sub, Rng* rng) const {
    return norm(tape, n, tape.add(x, tape.dropout(sub, static_cast<S>(cfg_.dropout_rate), rng)));
  }

  Var feed_forward(TapeT& tape, const FeedForward& f, Var x) const {
    return linear(tape, f.out, tape.relu(linear(tape, f.in, x)));
  }

  /// Post-norm encoder layer. Only rows >= query_start are produced; keys
  /// always span the whole sequence.
  Var encoder_layer(TapeT& tape, const EncoderLayer& l, Var x, const std::vector<bool>& key_valid, Rng* rng,
                    Eigen::Index query_start) const {
    require(static_cast<Eigen::Index>(key_valid.size()) == x->value.rows(), "encoder: mask length mismatch");
    Var q_in = query_start == 0 ? x : tape.slice_rows(x, query_start, x->value.rows() - query_start);
    Var h = residual(tape, l.norm1, q_in, attend(tape, l.self, q_in, x, &key_valid), rng);
    return residual(tape, l.norm2, h, feed_forward(tape, l.ffn, h), rng);
  }

  Var decode(TapeT& tape, Var x, Var memory, const std::vector<bool>& memory_valid, Rng* rng) const {
    require(static_cast<Eigen::Index>(memory_valid.size()) == memory->value.rows(), "decoder: mask length mismatch");
    for (const auto& l : decoder_) {
      Var h = residual(tape, l.norm1, x, attend(tape, l.self, x, x, nullptr), rng);
      h = residual(tape, l.norm2, h, attend(tape, l.cross, h, memory, &memory_valid), rng);
      x = residual(tape, l.norm3, h, feed_forward(tape, l.ffn, h), rng);
    }
    return x;
  }

  ModelConfig cfg_;
  Rng rng_;
  Matrix<S> pe_;
  std::deque<Parameter<S>> params_;
  std::vector<Parameter<S>*> order_;
  Linear input_;
  std::vector<EncoderLayer> encoder_;
  Linear past_cls_;
  Parameter<S>* queries_ = nullptr;
  std::vector<DecoderLayer> decoder_;
  Linear ant_cls_;
  Linear conv_;
  EncoderLayer head_enc_;
  Linear head_fc_;
};

}  // namespace joadaa
