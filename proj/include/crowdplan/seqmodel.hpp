#pragma once

// Recurrent encoder-decoder with a bivariate-Gaussian output head.
//
// Structure: a ReLU embedding shared by encoder and decoder, two stacked LSTM
// layers in the encoder and two in the decoder, and an affine head mapping the
// top decoder state to [mu_x, mu_y, log sigma_x, log sigma_y, atanh rho].
//
// Two evaluation paths share the parameter layout:
//  * the batched training path (matrix-matrix products over all agent
//    columns, with exact reverse-mode gradients), and
//  * the per-column inference path used by encode/decode_step, which
//    processes every agent column on its own so a prediction never depends on
//    which other agents share the batch.

#include "crowdplan/trajdata.hpp"
#include "crowdplan/world.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdplan {

template <class T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using VectorT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelShape {
  int input_width = 4;  // 2 without the robot channel, 4 with it
  int embed = 32;
  int hidden = 64;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

enum class Block : int {
  kEmbedW,
  kEmbedB,
  kEnc1W,
  kEnc1B,
  kEnc2W,
  kEnc2B,
  kDec1W,
  kDec1B,
  kDec2W,
  kDec2B,
  kHeadW,
  kHeadB,
};
inline constexpr int kBlockCount = 12;

struct BlockLayout {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;
};

inline std::array<BlockLayout, kBlockCount> block_layout(const ModelShape& s) {
  const Eigen::Index W = s.input_width, E = s.embed, H = s.hidden;
  const std::array<std::pair<Eigen::Index, Eigen::Index>, kBlockCount> dims{{
      {E, W}, {E, 1},                  // embedding
      {4 * H, E + H}, {4 * H, 1},      // encoder layer 1
      {4 * H, 2 * H}, {4 * H, 1},      // encoder layer 2
      {4 * H, E + H}, {4 * H, 1},      // decoder layer 1
      {4 * H, 2 * H}, {4 * H, 1},      // decoder layer 2
      {5, H}, {5, 1},                  // head
  }};
  std::array<BlockLayout, kBlockCount> out{};
  Eigen::Index offset = 0;
  for (int b = 0; b < kBlockCount; ++b) {
    out[static_cast<std::size_t>(b)] = {dims[static_cast<std::size_t>(b)].first, dims[static_cast<std::size_t>(b)].second, offset};
    offset += dims[static_cast<std::size_t>(b)].first * dims[static_cast<std::size_t>(b)].second;
  }
  return out;
}

/// Everything a trained model needs at inference besides its weights.
struct ModelMeta {
  std::optional<int> delta_t = 1;  // nullopt: no robot channel
  NormStats norm;
};

/// All learnable weights, stored as one flat vector so optimisers and file
/// I/O see a single block. LSTM gate rows are ordered input, forget, cell,
/// output.
template <class T>
class ModelParams {
 public:
  using Matrix = MatrixT<T>;
  using Vector = VectorT<T>;

  ModelParams() : ModelParams(ModelShape{}) {}
  explicit ModelParams(ModelShape shape) : shape_(shape), layout_(block_layout(shape)) {
    if (shape.input_width != 2 && shape.input_width != 4) throw ShapeError("input_width must be 2 or 4");
    if (shape.embed < 1 || shape.hidden < 1) throw ShapeError("embed and hidden sizes must be positive");
    const auto& last = layout_.back();
    flat_ = Vector::Zero(last.offset + last.rows * last.cols);
  }

  /// Glorot-uniform weights, zero biases except forget gates (1.0).
  static ModelParams initialized(ModelShape shape, std::uint64_t seed) {
    ModelParams p(shape);
    std::mt19937_64 rng(seed);
    for (int b = 0; b < kBlockCount; ++b) {
      const auto& l = p.layout_[static_cast<std::size_t>(b)];
      if (l.cols == 1) continue;
      const Eigen::Index fan_out = (b == static_cast<int>(Block::kEmbedW) || b == static_cast<int>(Block::kHeadW)) ? l.rows : l.rows / 4;
      const double limit = std::sqrt(6.0 / static_cast<double>(l.cols + fan_out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Eigen::Index i = 0; i < l.rows * l.cols; ++i) p.flat_[l.offset + i] = static_cast<T>(dist(rng));
    }
    const Eigen::Index H = shape.hidden;
    for (Block b : {Block::kEnc1B, Block::kEnc2B, Block::kDec1B, Block::kDec2B}) {
      p.block(b).middleRows(H, H).setConstant(T(1));
    }
    return p;
  }

  const ModelShape& shape() const { return shape_; }
  Eigen::Index size() const { return flat_.size(); }
  Vector& flat() { return flat_; }
  const Vector& flat() const { return flat_; }
  const BlockLayout& layout(Block b) const { return layout_[static_cast<std::size_t>(b)]; }

  Eigen::Map<Matrix> block(Block b) {
    const auto& l = layout(b);
    return Eigen::Map<Matrix>(flat_.data() + l.offset, l.rows, l.cols);
  }
  Eigen::Map<const Matrix> block(Block b) const {
    const auto& l = layout(b);
    return Eigen::Map<const Matrix>(flat_.data() + l.offset, l.rows, l.cols);
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out(shape_);
    out.flat() = flat_.template cast<U>();
    out.meta = meta;
    return out;
  }

  ModelMeta meta;

 private:
  ModelShape shape_;
  std::array<BlockLayout, kBlockCount> layout_;
  Vector flat_;
};

/// Per-agent recurrent state; column i belongs to agent i.
template <class T>
struct HiddenState {
  MatrixT<T> h1, c1, h2, c2;

  static HiddenState zeros(int hidden, int n_agents) {
    HiddenState s;
    s.h1 = s.c1 = s.h2 = s.c2 = MatrixT<T>::Zero(hidden, n_agents);
    return s;
  }
  int n_agents() const { return static_cast<int>(h1.cols()); }
  int hidden() const { return static_cast<int>(h1.rows()); }
  bool all_finite() const { return h1.allFinite() && c1.allFinite() && h2.allFinite() && c2.allFinite(); }
};

/// Bivariate normal over one agent's next position, in normalised units.
struct GaussianParams {
  Vec2 mu = Vec2::Zero();
  Vec2 sigma = Vec2::Ones();
  double rho = 0.0;

  Eigen::Matrix2d covariance() const {
    const double cxy = rho * sigma.x() * sigma.y();
    Eigen::Matrix2d s;
    s << sigma.x() * sigma.x(), cxy, cxy, sigma.y() * sigma.y();
    return s;
  }
};

namespace seq_detail {

// Bounds on the raw head outputs keep sigma finite and |rho| < 1 in
// floating point.
inline constexpr double kLogSigmaBound = 20.0;
inline constexpr double kAtanhRhoBound = 10.0;

template <class T>
T clamp_log_sigma(T v) {
  return std::clamp(v, T(-kLogSigmaBound), T(kLogSigmaBound));
}
template <class T>
T clamp_atanh_rho(T v) {
  return std::clamp(v, T(-kAtanhRhoBound), T(kAtanhRhoBound));
}

template <class Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& x) {
  using T = typename Derived::Scalar;
  return (T(1) + (-x).exp()).inverse();
}

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2 pi)

}  // namespace seq_detail

/// Maps one raw head output column onto valid Gaussian parameters.
template <class T, class Col>
GaussianParams gaussian_from_raw(const Col& raw) {
  using namespace seq_detail;
  GaussianParams g;
  g.mu = Vec2(static_cast<double>(raw(0)), static_cast<double>(raw(1)));
  g.sigma = Vec2(std::exp(static_cast<double>(clamp_log_sigma(raw(2)))),
                 std::exp(static_cast<double>(clamp_log_sigma(raw(3)))));
  g.rho = std::tanh(static_cast<double>(clamp_atanh_rho(raw(4))));
  return g;
}

/// U = sqrt(det Sigma) = sigma_x sigma_y sqrt(1 - rho^2).
inline double uncertainty(const GaussianParams& g) {
  return g.sigma.x() * g.sigma.y() * std::sqrt(std::max(0.0, 1.0 - g.rho * g.rho));
}

/// -log N(target | g).
inline double gaussian_nll(const GaussianParams& g, const Vec2& target) {
  const double dx = (target.x() - g.mu.x()) / g.sigma.x();
  const double dy = (target.y() - g.mu.y()) / g.sigma.y();
  const double q = 1.0 - g.rho * g.rho;
  const double z = dx * dx + dy * dy - 2.0 * g.rho * dx * dy;
  return seq_detail::kLog2Pi + std::log(g.sigma.x()) + std::log(g.sigma.y()) + 0.5 * std::log(q) + z / (2.0 * q);
}

/// Sum of per-(step, agent) negative log-likelihoods. `outs[t][i]` is the
/// prediction for agent i at step t; `targets[t]` holds one column per agent.
inline double nll_loss(const std::vector<std::vector<GaussianParams>>& outs,
                       const std::vector<Eigen::Matrix2Xd>& targets) {
  if (outs.size() != targets.size()) throw ShapeError("nll_loss: step count mismatch");
  double loss = 0.0;
  for (std::size_t t = 0; t < outs.size(); ++t) {
    if (static_cast<Eigen::Index>(outs[t].size()) != targets[t].cols()) throw ShapeError("nll_loss: agent count mismatch");
    for (std::size_t i = 0; i < outs[t].size(); ++i) loss += gaussian_nll(outs[t][i], targets[t].col(static_cast<Eigen::Index>(i)));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Per-column inference path

namespace seq_detail {

template <class T>
struct ColumnScratch {
  VectorT<T> x, e, z1, z2, h1, c1, h2, c2, raw;
};

template <class T, class WMap, class BMap>
void lstm_column(const WMap& w, const BMap& b, const VectorT<T>& in, VectorT<T>& h, VectorT<T>& c, VectorT<T>& z) {
  const Eigen::Index H = h.size();
  z.noalias() = w.leftCols(in.size()) * in;
  z.noalias() += w.rightCols(H) * h;
  z += b.col(0);
  const auto i = sigmoid(z.segment(0, H).array());
  const auto f = sigmoid(z.segment(H, H).array());
  const auto g = z.segment(2 * H, H).array().tanh();
  const auto o = sigmoid(z.segment(3 * H, H).array());
  c = (f * c.array() + i * g).matrix();
  h = (o * c.array().tanh()).matrix();
}

/// One recurrent step for a single agent column held in `s`.
template <class T>
void column_step(const ModelParams<T>& p, bool decoder, ColumnScratch<T>& s, bool with_head) {
  s.e.noalias() = p.block(Block::kEmbedW) * s.x;
  s.e += p.block(Block::kEmbedB).col(0);
  s.e = s.e.cwiseMax(T(0));
  if (decoder) {
    lstm_column<T>(p.block(Block::kDec1W), p.block(Block::kDec1B), s.e, s.h1, s.c1, s.z1);
    lstm_column<T>(p.block(Block::kDec2W), p.block(Block::kDec2B), s.h1, s.h2, s.c2, s.z2);
  } else {
    lstm_column<T>(p.block(Block::kEnc1W), p.block(Block::kEnc1B), s.e, s.h1, s.c1, s.z1);
    lstm_column<T>(p.block(Block::kEnc2W), p.block(Block::kEnc2B), s.h1, s.h2, s.c2, s.z2);
  }
  if (with_head) {
    s.raw.noalias() = p.block(Block::kHeadW) * s.h2;
    s.raw += p.block(Block::kHeadB).col(0);
  }
}

template <class T>
void load_column(ColumnScratch<T>& s, const HiddenState<T>& st, Eigen::Index j) {
  s.h1 = st.h1.col(j);
  s.c1 = st.c1.col(j);
  s.h2 = st.h2.col(j);
  s.c2 = st.c2.col(j);
}

template <class T>
void store_column(const ColumnScratch<T>& s, HiddenState<T>& st, Eigen::Index j) {
  st.h1.col(j) = s.h1;
  st.c1.col(j) = s.c1;
  st.h2.col(j) = s.h2;
  st.c2.col(j) = s.c2;
}

}  // namespace seq_detail

/// Runs the encoder over `inputs` (one width x N matrix per step) from `h0`
/// (zeros when absent) and returns the final state. Agents are independent.
template <class T>
HiddenState<T> encode(const ModelParams<T>& p, const std::vector<MatrixT<T>>& inputs,
                      const HiddenState<T>* h0 = nullptr) {
  if (inputs.empty()) throw ShapeError("encode: encoder length must be >= 1");
  const Eigen::Index n = inputs.front().cols();
  for (const auto& m : inputs) {
    if (m.rows() != p.shape().input_width) {
      throw ShapeError("encode: input width " + std::to_string(m.rows()) + " does not match model width " +
                       std::to_string(p.shape().input_width));
    }
    if (m.cols() != n) throw ShapeError("encode: agent count changes between steps");
  }
  HiddenState<T> st = h0 ? *h0 : HiddenState<T>::zeros(p.shape().hidden, static_cast<int>(n));
  if (st.n_agents() != n || st.hidden() != p.shape().hidden) throw ShapeError("encode: initial state shape mismatch");
  seq_detail::ColumnScratch<T> s;
  for (Eigen::Index j = 0; j < n; ++j) {
    seq_detail::load_column(s, st, j);
    for (const auto& m : inputs) {
      s.x = m.col(j);
      seq_detail::column_step(p, false, s, false);
    }
    seq_detail::store_column(s, st, j);
  }
  return st;
}

template <class T>
struct DecodeOutput {
  HiddenState<T> state;
  std::vector<GaussianParams> out;  // one per agent
};

/// One decoder step for every agent column of `input` (width x N: agent
/// position or zeros, then the robot action position when width is 4).
template <class T>
DecodeOutput<T> decode_step(const ModelParams<T>& p, const MatrixT<T>& input, const HiddenState<T>& h) {
  if (input.rows() != p.shape().input_width) {
    throw ShapeError("decode_step: input width " + std::to_string(input.rows()) + " does not match model width " +
                     std::to_string(p.shape().input_width));
  }
  if (input.cols() != h.n_agents() || h.hidden() != p.shape().hidden) throw ShapeError("decode_step: state shape mismatch");
  DecodeOutput<T> res{h, {}};
  res.out.reserve(static_cast<std::size_t>(input.cols()));
  seq_detail::ColumnScratch<T> s;
  for (Eigen::Index j = 0; j < input.cols(); ++j) {
    seq_detail::load_column(s, h, j);
    s.x = input.col(j);
    seq_detail::column_step(p, true, s, true);
    seq_detail::store_column(s, res.state, j);
    res.out.push_back(gaussian_from_raw<T>(s.raw));
  }
  return res;
}

/// Single-column decoder step on raw buffers, for callers that manage their
/// own state storage (the planner). `state` holds h1, c1, h2, c2 back to back.
template <class T>
class ColumnDecoder {
 public:
  explicit ColumnDecoder(const ModelParams<T>& p) : p_(&p) {}

  GaussianParams step(std::span<const T> input, std::span<const T> state_in, std::span<T> state_out) {
    const Eigen::Index H = p_->shape().hidden;
    s_.x = Eigen::Map<const VectorT<T>>(input.data(), static_cast<Eigen::Index>(input.size()));
    s_.h1 = Eigen::Map<const VectorT<T>>(state_in.data(), H);
    s_.c1 = Eigen::Map<const VectorT<T>>(state_in.data() + H, H);
    s_.h2 = Eigen::Map<const VectorT<T>>(state_in.data() + 2 * H, H);
    s_.c2 = Eigen::Map<const VectorT<T>>(state_in.data() + 3 * H, H);
    seq_detail::column_step(*p_, true, s_, true);
    Eigen::Map<VectorT<T>>(state_out.data(), H) = s_.h1;
    Eigen::Map<VectorT<T>>(state_out.data() + H, H) = s_.c1;
    Eigen::Map<VectorT<T>>(state_out.data() + 2 * H, H) = s_.h2;
    Eigen::Map<VectorT<T>>(state_out.data() + 3 * H, H) = s_.c2;
    return gaussian_from_raw<T>(s_.raw);
  }

 private:
  const ModelParams<T>* p_;
  seq_detail::ColumnScratch<T> s_;
};

// ---------------------------------------------------------------------------
// Batched training path

/// Several windows with a common encoder length; agents of all windows are
/// concatenated column-wise.
template <class T>
struct Batch {
  int l_enc = 0;
  int width = 4;
  std::vector<MatrixT<T>> enc_inputs;  // l_enc x (width x cols)
  std::vector<MatrixT<T>> dec_inputs;  // 8 x (width x cols); agent rows zero after step 0
  std::vector<MatrixT<T>> targets;     // 8 x (2 x cols)
  Eigen::Index cols() const { return targets.empty() ? 0 : targets.front().cols(); }
};

template <class T>
Batch<T> make_batch(std::span<const Sample* const> samples) {
  if (samples.empty()) throw ShapeError("make_batch: no samples");
  Batch<T> b;
  b.l_enc = samples.front()->l_enc;
  b.width = samples.front()->input_width();
  Eigen::Index cols = 0;
  for (const Sample* s : samples) {
    if (s->l_enc != b.l_enc || s->input_width() != b.width) throw ShapeError("make_batch: samples disagree in shape");
    cols += s->n_agents();
  }
  b.enc_inputs.assign(static_cast<std::size_t>(b.l_enc), MatrixT<T>(b.width, cols));
  b.dec_inputs.assign(kPredictionSteps, MatrixT<T>::Zero(b.width, cols));
  b.targets.assign(kPredictionSteps, MatrixT<T>(2, cols));
  Eigen::Index c0 = 0;
  for (const Sample* s : samples) {
    const Eigen::Index n = s->n_agents();
    for (int k = 0; k < b.l_enc; ++k) {
      b.enc_inputs[static_cast<std::size_t>(k)].middleCols(c0, n) = s->enc_input(k).template cast<T>();
    }
    b.dec_inputs[0].topRows(2).middleCols(c0, n) = s->dec_seed().template cast<T>();
    for (int j = 0; j < kPredictionSteps; ++j) {
      if (b.width == 4) {
        b.dec_inputs[static_cast<std::size_t>(j)].bottomRows(2).middleCols(c0, n) =
            s->dec_robot(j).template cast<T>().replicate(1, n);
      }
      b.targets[static_cast<std::size_t>(j)].middleCols(c0, n) = s->target(j).template cast<T>();
    }
    c0 += n;
  }
  return b;
}

namespace seq_detail {

template <class T>
struct LstmCache {
  MatrixT<T> input, h_prev, c_prev, i, f, g, o, c, tanh_c;
};

template <class T>
struct StepCache {
  MatrixT<T> x, e_pre;
  LstmCache<T> l1, l2;
  MatrixT<T> raw;  // decoder steps only
};

template <class T, class WMap, class BMap>
void lstm_forward(const WMap& w, const BMap& b, const MatrixT<T>& input, MatrixT<T>& h, MatrixT<T>& c,
                  LstmCache<T>& cache) {
  const Eigen::Index H = h.rows();
  cache.input = input;
  cache.h_prev = h;
  cache.c_prev = c;
  MatrixT<T> z = w.leftCols(input.rows()) * input;
  z.noalias() += w.rightCols(H) * h;
  z.colwise() += b.col(0);
  cache.i = sigmoid(z.topRows(H).array()).matrix();
  cache.f = sigmoid(z.middleRows(H, H).array()).matrix();
  cache.g = z.middleRows(2 * H, H).array().tanh().matrix();
  cache.o = sigmoid(z.bottomRows(H).array()).matrix();
  c = (cache.f.array() * c.array() + cache.i.array() * cache.g.array()).matrix();
  cache.c = c;
  cache.tanh_c = c.array().tanh().matrix();
  h = (cache.o.array() * cache.tanh_c.array()).matrix();
}

// Accumulates weight gradients; updates dh, dc to the previous step and
// returns the gradient w.r.t. the layer input.
template <class T, class WMap, class GWMap, class GBMap>
MatrixT<T> lstm_backward(const WMap& w, GWMap gw, GBMap gb, const LstmCache<T>& k, MatrixT<T>& dh, MatrixT<T>& dc) {
  const Eigen::Index H = dh.rows();
  const Eigen::Index in = k.input.rows();
  dc.array() += dh.array() * k.o.array() * (T(1) - k.tanh_c.array().square());
  MatrixT<T> dz(4 * H, dh.cols());
  dz.topRows(H) = (dc.array() * k.g.array() * k.i.array() * (T(1) - k.i.array())).matrix();
  dz.middleRows(H, H) = (dc.array() * k.c_prev.array() * k.f.array() * (T(1) - k.f.array())).matrix();
  dz.middleRows(2 * H, H) = (dc.array() * k.i.array() * (T(1) - k.g.array().square())).matrix();
  dz.bottomRows(H) = (dh.array() * k.tanh_c.array() * k.o.array() * (T(1) - k.o.array())).matrix();
  gw.leftCols(in).noalias() += dz * k.input.transpose();
  gw.rightCols(H).noalias() += dz * k.h_prev.transpose();
  gb.col(0) += dz.rowwise().sum();
  dc = (dc.array() * k.f.array()).matrix();
  dh.noalias() = w.rightCols(H).transpose() * dz;
  return w.leftCols(in).transpose() * dz;
}

/// d(-log N)/d(raw) for every column; returns the summed loss.
template <class T>
T nll_and_grad(const MatrixT<T>& raw, const MatrixT<T>& target, MatrixT<T>* draw) {
  T loss = 0;
  if (draw) draw->resize(5, raw.cols());
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    const T lsx = clamp_log_sigma(raw(2, j));
    const T lsy = clamp_log_sigma(raw(3, j));
    const T r = clamp_atanh_rho(raw(4, j));
    const T sx = std::exp(lsx), sy = std::exp(lsy);
    const T rho = std::tanh(r);
    const T ch = std::cosh(r);
    const T q = T(1) / (ch * ch);  // 1 - rho^2, stable for large |r|
    const T dx = (target(0, j) - raw(0, j)) / sx;
    const T dy = (target(1, j) - raw(1, j)) / sy;
    const T z = dx * dx + dy * dy - T(2) * rho * dx * dy;
    loss += T(kLog2Pi) + lsx + lsy + T(0.5) * std::log(q) + z / (T(2) * q);
    if (draw) {
      auto d = draw->col(j);
      d(0) = -(dx - rho * dy) / (sx * q);
      d(1) = -(dy - rho * dx) / (sy * q);
      d(2) = raw(2, j) == lsx ? T(1) - dx * (dx - rho * dy) / q : T(0);
      d(3) = raw(3, j) == lsy ? T(1) - dy * (dy - rho * dx) / q : T(0);
      d(4) = raw(4, j) == r ? -rho - dx * dy + z * rho / q : T(0);
    }
  }
  return loss;
}

}  // namespace seq_detail

/// Summed Gaussian NLL of the batch; when `grad` is given, the exact gradient
/// of that sum is added into it.
template <class T>
T loss_and_gradient(const ModelParams<T>& p, const Batch<T>& b, ModelParams<T>* grad = nullptr) {
  using namespace seq_detail;
  using M = MatrixT<T>;
  if (b.width != p.shape().input_width) {
    throw ShapeError("batch width " + std::to_string(b.width) + " does not match model width " +
                     std::to_string(p.shape().input_width));
  }
  const Eigen::Index H = p.shape().hidden;
  const Eigen::Index n = b.cols();
  M h1 = M::Zero(H, n), c1 = M::Zero(H, n), h2 = M::Zero(H, n), c2 = M::Zero(H, n);

  std::vector<StepCache<T>> enc(static_cast<std::size_t>(b.l_enc));
  std::vector<StepCache<T>> dec(kPredictionSteps);
  auto embed = [&](const M& x, StepCache<T>& k) {
    k.x = x;
    k.e_pre = p.block(Block::kEmbedW) * x;
    k.e_pre.colwise() += p.block(Block::kEmbedB).col(0);
    return M(k.e_pre.cwiseMax(T(0)));
  };
  for (int t = 0; t < b.l_enc; ++t) {
    auto& k = enc[static_cast<std::size_t>(t)];
    const M e = embed(b.enc_inputs[static_cast<std::size_t>(t)], k);
    lstm_forward<T>(p.block(Block::kEnc1W), p.block(Block::kEnc1B), e, h1, c1, k.l1);
    lstm_forward<T>(p.block(Block::kEnc2W), p.block(Block::kEnc2B), h1, h2, c2, k.l2);
  }
  T loss = 0;
  std::vector<M> draws(kPredictionSteps);
  for (int t = 0; t < kPredictionSteps; ++t) {
    auto& k = dec[static_cast<std::size_t>(t)];
    const M e = embed(b.dec_inputs[static_cast<std::size_t>(t)], k);
    lstm_forward<T>(p.block(Block::kDec1W), p.block(Block::kDec1B), e, h1, c1, k.l1);
    lstm_forward<T>(p.block(Block::kDec2W), p.block(Block::kDec2B), h1, h2, c2, k.l2);
    k.raw = p.block(Block::kHeadW) * h2;
    k.raw.colwise() += p.block(Block::kHeadB).col(0);
    loss += nll_and_grad<T>(k.raw, b.targets[static_cast<std::size_t>(t)], grad ? &draws[static_cast<std::size_t>(t)] : nullptr);
  }
  if (!grad) return loss;

  M dh1 = M::Zero(H, n), dc1 = M::Zero(H, n), dh2 = M::Zero(H, n), dc2 = M::Zero(H, n);
  auto embed_backward = [&](const StepCache<T>& k, const M& de_post) {
    const M de = (de_post.array() * (k.e_pre.array() > T(0)).template cast<T>()).matrix();
    grad->block(Block::kEmbedW).noalias() += de * k.x.transpose();
    grad->block(Block::kEmbedB).col(0) += de.rowwise().sum();
  };
  for (int t = kPredictionSteps - 1; t >= 0; --t) {
    const auto& k = dec[static_cast<std::size_t>(t)];
    const M& d = draws[static_cast<std::size_t>(t)];
    const M h2_t = (k.l2.o.array() * k.l2.tanh_c.array()).matrix();
    grad->block(Block::kHeadW).noalias() += d * h2_t.transpose();
    grad->block(Block::kHeadB).col(0) += d.rowwise().sum();
    dh2.noalias() += p.block(Block::kHeadW).transpose() * d;
    const M dh1_in = lstm_backward<T>(p.block(Block::kDec2W), grad->block(Block::kDec2W), grad->block(Block::kDec2B), k.l2, dh2, dc2);
    dh1 += dh1_in;
    const M de = lstm_backward<T>(p.block(Block::kDec1W), grad->block(Block::kDec1W), grad->block(Block::kDec1B), k.l1, dh1, dc1);
    embed_backward(k, de);
  }
  for (int t = b.l_enc - 1; t >= 0; --t) {
    const auto& k = enc[static_cast<std::size_t>(t)];
    const M dh1_in = lstm_backward<T>(p.block(Block::kEnc2W), grad->block(Block::kEnc2W), grad->block(Block::kEnc2B), k.l2, dh2, dc2);
    dh1 += dh1_in;
    const M de = lstm_backward<T>(p.block(Block::kEnc1W), grad->block(Block::kEnc1W), grad->block(Block::kEnc1B), k.l1, dh1, dc1);
    embed_backward(k, de);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Optimisation

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global gradient-norm clip; <= 0 disables
};

template <class T>
class Adam {
 public:
  Adam(Eigen::Index n, AdamConfig cfg) : cfg_(cfg), m_(VectorT<T>::Zero(n)), v_(VectorT<T>::Zero(n)) {}

  void step(VectorT<T>& params, VectorT<T> grad) {
    if (cfg_.clip_norm > 0) {
      const T norm = grad.norm();
      if (norm > T(cfg_.clip_norm)) grad *= T(cfg_.clip_norm) / norm;
    }
    ++t_;
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    m_ = b1 * m_ + (T(1) - b1) * grad;
    v_ = b2 * v_ + (T(1) - b2) * grad.cwiseAbs2();
    const T c1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(t_)));
    params.array() -= T(cfg_.lr) * (m_.array() / c1) / ((v_.array() / c2).sqrt() + T(cfg_.eps));
  }

 private:
  AdamConfig cfg_;
  VectorT<T> m_, v_;
  long t_ = 0;
};

struct TrainConfig {
  int epochs = 100;
  int batch_windows = 16;
  int l_min = kMinEncoderSteps;
  int l_max = kMaxEncoderSteps;
  std::size_t max_windows_per_epoch = 0;  // 0: every training window each epoch
  std::size_t max_val_windows = 0;        // 0: every validation window
  std::uint64_t seed = 0;
  ModelShape shape;
  AdamConfig adam;
};

struct CurvePoint {
  int epoch = 0;
  double train_loss = 0.0;  // mean NLL per (agent, step)
  double val_loss = 0.0;
};

struct TrainResult {
  ModelParams<double> params;  // best validation epoch
  std::vector<CurvePoint> curve;
  double initial_loss = 0.0;  // mean training NLL before the first update
  int best_epoch = 0;
};

namespace seq_detail {

template <class T>
double mean_loss(const ModelParams<T>& p, const std::vector<const Sample*>& samples, int batch_windows) {
  double total = 0.0;
  double pairs = 0.0;
  // Group by encoder length so batches stay rectangular.
  std::vector<const Sample*> sorted = samples;
  std::stable_sort(sorted.begin(), sorted.end(), [](const Sample* a, const Sample* b) { return a->l_enc < b->l_enc; });
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j < sorted.size() && j - i < static_cast<std::size_t>(batch_windows) && sorted[j]->l_enc == sorted[i]->l_enc) ++j;
    const Batch<T> b = make_batch<T>(std::span<const Sample* const>(sorted.data() + i, j - i));
    total += static_cast<double>(loss_and_gradient<T>(p, b));
    pairs += static_cast<double>(b.cols()) * kPredictionSteps;
    i = j;
  }
  return pairs > 0 ? total / pairs : 0.0;
}

inline std::vector<const Sample*> subsample(const std::vector<Sample>& samples, std::size_t cap) {
  std::vector<const Sample*> out;
  if (cap == 0 || samples.size() <= cap) {
    for (const auto& s : samples) out.push_back(&s);
    return out;
  }
  const double stride = static_cast<double>(samples.size()) / static_cast<double>(cap);
  for (std::size_t i = 0; i < cap; ++i) out.push_back(&samples[static_cast<std::size_t>(static_cast<double>(i) * stride)]);
  return out;
}

}  // namespace seq_detail

/// Mean NLL per (agent, step) over `samples`.
template <class T>
double evaluate_loss(const ModelParams<T>& p, const std::vector<Sample>& samples, int batch_windows = 16) {
  return seq_detail::mean_loss<T>(p, seq_detail::subsample(samples, 0), batch_windows);
}

/// Minibatch ADAM on summed-NLL windows. Each minibatch draws one encoder
/// length uniformly from [l_min, l_max] and truncates its windows to it.
/// Returns the parameters of the best validation epoch.
template <class T = float>
TrainResult train(const std::vector<Sample>& train_samples, const std::vector<Sample>& val_samples, TrainConfig cfg,
                  const ModelMeta& meta, const ModelParams<double>* init = nullptr,
                  const std::function<void(const CurvePoint&)>& on_epoch = {}) {
  if (train_samples.empty()) throw std::invalid_argument("train: no training samples");
  const int width = train_samples.front().input_width();
  cfg.shape.input_width = width;
  for (const auto& s : train_samples) {
    if (s.l_enc < cfg.l_max) throw std::invalid_argument("train: windows must cover l_max encoder steps");
  }
  ModelParams<T> params = init ? init->cast<T>() : ModelParams<T>::initialized(cfg.shape, cfg.seed);
  if (params.shape().input_width != width) throw ShapeError("train: initial parameters have the wrong input width");
  params.meta = meta;
  Adam<T> adam(params.size(), cfg.adam);
  std::mt19937_64 rng(cfg.seed ^ 0x5DEECE66DULL);
  std::uniform_int_distribution<int> l_dist(cfg.l_min, cfg.l_max);

  const auto val_ptrs = seq_detail::subsample(val_samples.empty() ? train_samples : val_samples, cfg.max_val_windows);
  TrainResult result;
  {
    const auto probe = seq_detail::subsample(train_samples, cfg.max_val_windows ? cfg.max_val_windows : 0);
    result.initial_loss = seq_detail::mean_loss<T>(params, probe, cfg.batch_windows);
  }
  double best_val = std::numeric_limits<double>::infinity();
  result.params = params.template cast<double>();

  std::vector<std::size_t> order(train_samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  ModelParams<T> grad(params.shape());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_windows =
        cfg.max_windows_per_epoch ? std::min(cfg.max_windows_per_epoch, order.size()) : order.size();
    double epoch_loss = 0.0, epoch_pairs = 0.0;
    for (std::size_t start = 0; start < n_windows; start += static_cast<std::size_t>(cfg.batch_windows)) {
      const std::size_t end = std::min(n_windows, start + static_cast<std::size_t>(cfg.batch_windows));
      const int l = l_dist(rng);
      std::vector<Sample> cut;
      cut.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) cut.push_back(train_samples[order[i]].truncated(l));
      std::vector<const Sample*> ptrs;
      for (const auto& s : cut) ptrs.push_back(&s);
      const Batch<T> b = make_batch<T>(ptrs);
      grad.flat().setZero();
      const T loss = loss_and_gradient<T>(params, b, &grad);
      const T pairs = static_cast<T>(b.cols() * kPredictionSteps);
      if (!std::isfinite(static_cast<double>(loss)) || !grad.flat().allFinite()) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + " (batch starting at window " +
                               std::to_string(start) + ", loss " + std::to_string(static_cast<double>(loss)) + ")");
      }
      adam.step(params.flat(), grad.flat() / pairs);
      epoch_loss += static_cast<double>(loss);
      epoch_pairs += static_cast<double>(pairs);
    }
    CurvePoint pt;
    pt.epoch = epoch;
    pt.train_loss = epoch_loss / epoch_pairs;
    pt.val_loss = seq_detail::mean_loss<T>(params, val_ptrs, cfg.batch_windows);
    if (!std::isfinite(pt.val_loss)) throw TrainingDiverged("validation loss is not finite at epoch " + std::to_string(epoch));
    result.curve.push_back(pt);
    if (on_epoch) on_epoch(pt);
    if (pt.val_loss < best_val) {
      best_val = pt.val_loss;
      result.best_epoch = epoch;
      result.params = params.template cast<double>();
    }
  }
  result.params.meta = meta;
  return result;
}

// ---------------------------------------------------------------------------
// Inference helpers

enum class PointEstimate { kMean, kSample };

/// Zero-feed rollout of the 8 prediction steps, in meters. The decoder is
/// seeded with X at T_obs and fed the recorded robot lookahead positions.
template <class T>
std::vector<Eigen::Matrix2Xd> predict_rollout(const ModelParams<T>& p, const Sample& s,
                                              PointEstimate mode = PointEstimate::kMean,
                                              std::mt19937_64* rng = nullptr) {
  if (s.input_width() != p.shape().input_width) {
    throw ShapeError("predict_rollout: sample width " + std::to_string(s.input_width()) + " does not match model width " +
                     std::to_string(p.shape().input_width));
  }
  if (mode == PointEstimate::kSample && !rng) throw std::invalid_argument("predict_rollout: sampling needs an rng");
  std::vector<MatrixT<T>> enc;
  enc.reserve(static_cast<std::size_t>(s.l_enc));
  for (int k = 0; k < s.l_enc; ++k) enc.push_back(s.enc_input(k).cast<T>());
  HiddenState<T> h = encode(p, enc);
  const Eigen::Index n = s.n_agents();
  std::vector<Eigen::Matrix2Xd> out;
  std::normal_distribution<double> normal;
  for (int j = 0; j < kPredictionSteps; ++j) {
    MatrixT<T> in = MatrixT<T>::Zero(p.shape().input_width, n);
    if (j == 0) in.topRows(2) = s.dec_seed().cast<T>();
    if (p.shape().input_width == 4) in.bottomRows(2) = s.dec_robot(j).cast<T>().replicate(1, n);
    auto step = decode_step(p, in, h);
    h = std::move(step.state);
    Eigen::Matrix2Xd pos(2, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& g = step.out[static_cast<std::size_t>(i)];
      Vec2 q = g.mu;
      if (mode == PointEstimate::kSample) {
        const double z1 = normal(*rng), z2 = normal(*rng);
        q.x() += g.sigma.x() * z1;
        q.y() += g.sigma.y() * (g.rho * z1 + std::sqrt(1.0 - g.rho * g.rho) * z2);
      }
      pos.col(i) = p.meta.norm.invert(q);
    }
    out.push_back(std::move(pos));
  }
  return out;
}

/// Ground truth of a sample in meters: the 8 targets and X at T_obs.
inline std::pair<std::vector<Eigen::Matrix2Xd>, Eigen::Matrix2Xd> sample_truth(const Sample& s, const NormStats& norm) {
  std::vector<Eigen::Matrix2Xd> truth;
  auto to_m = [&](const Eigen::Matrix2Xd& m) {
    Eigen::Matrix2Xd out(2, m.cols());
    for (Eigen::Index i = 0; i < m.cols(); ++i) out.col(i) = norm.invert(m.col(i));
    return out;
  };
  for (int j = 0; j < kPredictionSteps; ++j) truth.push_back(to_m(s.target(j)));
  return {truth, to_m(s.dec_seed())};
}

// ---------------------------------------------------------------------------
// Model file: magic "CPRNN1", a dimension table, metadata, then every weight
// block in declaration order. All integers are little-endian uint64, all
// reals little-endian IEEE-754 binary64.
//
//   char[6]  "CPRNN1"
//   u64      n_dims (= 4)
//   u64[4]   input_width, embed, hidden, n_blocks
//   i64      delta_t (-1 when the model has no robot channel)
//   f64[4]   norm mean x, mean y, std x, std y
//   per block: u64 rows, u64 cols, f64[rows*cols] column-major

namespace seq_detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b.data(), 8);
}
inline std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), 8);
  if (!in) throw std::runtime_error("model file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}
inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

inline constexpr char kModelMagic[6] = {'C', 'P', 'R', 'N', 'N', '1'};

}  // namespace seq_detail

inline void write_model(std::ostream& out, const ModelParams<double>& p) {
  using namespace seq_detail;
  out.write(kModelMagic, 6);
  put_u64(out, 4);
  put_u64(out, static_cast<std::uint64_t>(p.shape().input_width));
  put_u64(out, static_cast<std::uint64_t>(p.shape().embed));
  put_u64(out, static_cast<std::uint64_t>(p.shape().hidden));
  put_u64(out, kBlockCount);
  put_u64(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(p.meta.delta_t.value_or(-1))));
  put_f64(out, p.meta.norm.mean.x());
  put_f64(out, p.meta.norm.mean.y());
  put_f64(out, p.meta.norm.std.x());
  put_f64(out, p.meta.norm.std.y());
  for (int b = 0; b < kBlockCount; ++b) {
    const auto m = p.block(static_cast<Block>(b));
    put_u64(out, static_cast<std::uint64_t>(m.rows()));
    put_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) put_f64(out, m.data()[i]);
  }
}

inline ModelParams<double> read_model(std::istream& in) {
  using namespace seq_detail;
  char magic[6] = {};
  in.read(magic, 6);
  if (!in || std::memcmp(magic, kModelMagic, 6) != 0) throw std::runtime_error("not a CPRNN1 model file");
  const auto n_dims = get_u64(in);
  if (n_dims != 4) throw std::runtime_error("unsupported model dimension table");
  ModelShape shape;
  shape.input_width = static_cast<int>(get_u64(in));
  shape.embed = static_cast<int>(get_u64(in));
  shape.hidden = static_cast<int>(get_u64(in));
  if (get_u64(in) != kBlockCount) throw std::runtime_error("unexpected block count in model file");
  ModelParams<double> p(shape);
  const auto dt = static_cast<std::int64_t>(get_u64(in));
  p.meta.delta_t = dt < 0 ? std::nullopt : std::optional<int>(static_cast<int>(dt));
  p.meta.norm.mean.x() = get_f64(in);
  p.meta.norm.mean.y() = get_f64(in);
  p.meta.norm.std.x() = get_f64(in);
  p.meta.norm.std.y() = get_f64(in);
  for (int b = 0; b < kBlockCount; ++b) {
    auto m = p.block(static_cast<Block>(b));
    if (get_u64(in) != static_cast<std::uint64_t>(m.rows()) || get_u64(in) != static_cast<std::uint64_t>(m.cols())) {
      throw std::runtime_error("model block " + std::to_string(b) + " has unexpected dimensions");
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_f64(in);
  }
  if ((p.meta.delta_t.has_value()) != (shape.input_width == 4)) {
    throw std::runtime_error("model file: delta_t and input width disagree");
  }
  return p;
}

inline void save_model(const std::filesystem::path& path, const ModelParams<double>& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_model(out, p);
}

inline ModelParams<double> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_model(in);
}

inline void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve) {
  out << "epoch,train_loss,val_loss\n";
  for (const auto& c : curve) out << c.epoch << ',' << fmt_fixed(c.train_loss) << ',' << fmt_fixed(c.val_loss) << '\n';
}

}  // namespace crowdplan
