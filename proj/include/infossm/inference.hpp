#pragma once

// Amortized variational posteriors: a backward recurrent encoder for the
// initial state q(x_1), a trajectory classifier for the initial dynamics code
// q(c_1), shift/rotation canonicalization of observation windows, and the
// reparameterized Gaussian / Gumbel-softmax samplers.

#include "infossm/core.hpp"
#include "infossm/diffmath.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace infossm::inference {

using diffmath::ParamSet;
using diffmath::Tape;
using diffmath::Value;

// ---------------------------------------------------------------------------
// Canonicalization
// ---------------------------------------------------------------------------

// Shift the first sample to the origin (all dims), then rotate the horizontal
// plane (first two dims) by `angle`. angle = 0 is the pure shift used by the
// state encoder; the classifier draws random angles for rotation invariance.
inline Matrix canonicalize(const Matrix& y, double angle) {
  if (y.rows() < 2) throw DimensionMismatch("canonicalize: need T >= 2");
  Matrix out = y.rowwise() - y.row(0);
  if (angle != 0.0) {
    if (y.cols() < 2)
      throw DimensionMismatch("canonicalize: rotation needs a horizontal plane");
    double c = std::cos(angle), s = std::sin(angle);
    for (Index t = 0; t < out.rows(); ++t) {
      double px = out(t, 0), py = out(t, 1);
      out(t, 0) = c * px - s * py;
      out(t, 1) = s * px + c * py;
    }
  }
  return out;
}

struct AnglePolicy {
  bool random = false;
  double angle = 0.0;

  static AnglePolicy fixed(double a) { return {false, a}; }
  static AnglePolicy random_angle() { return {true, 0.0}; }

  double draw(Rng& rng) const { return random ? 2.0 * M_PI * rng.uniform() : angle; }
};

// ---------------------------------------------------------------------------
// Network parameters
// ---------------------------------------------------------------------------

struct GumbelConfig {
  double temperature = 1.0;
  double anneal_start = 1.0;
  double anneal_end = 0.3;
  double anneal_decay = 0.995;  // multiplicative, per epoch
  bool straight_through = true;

  void validate() const {
    if (!(temperature > 0.0) || temperature > 10.0)
      throw ValidationError("GumbelConfig: temperature must lie in (0, 10]");
    if (anneal_end > anneal_start)
      throw ValidationError("GumbelConfig: anneal end must not exceed start");
  }

  double temperature_at(long epoch) const {
    return std::max(anneal_end, anneal_start * std::pow(anneal_decay, static_cast<double>(epoch)));
  }
};

// Parameter handles for the backward recurrent cell (gated, single layer), the
// initial-state head, and the code classifier. The collection is phi.
struct InferenceNets {
  int obs_dim = 2;
  int state_dim = 4;
  int t_len = 20;
  int num_codes = 3;
  int hidden = 32;
  int classifier_hidden = 64;

  // gated recurrent cell, weights stored input-major (in x out)
  int uz_id = -1, wz_id = -1, bz_id = -1;
  int ur_id = -1, wr_id = -1, br_id = -1;
  int un_id = -1, wn_id = -1, bn_id = -1;
  // head: hidden -> (mu, log diag V)
  int head_w_id = -1, head_b_id = -1;
  // classifier: flattened trajectory -> hidden -> hidden -> L logits
  int c1_w_id = -1, c1_b_id = -1, c2_w_id = -1, c2_b_id = -1, c3_w_id = -1, c3_b_id = -1;

  static InferenceNets create(ParamSet& store, int obs_dim, int state_dim, int t_len,
                              int num_codes, Rng& rng, int hidden = 32,
                              int classifier_hidden = 64) {
    auto glorot = [&rng](int in, int out) {
      double a = std::sqrt(6.0 / static_cast<double>(in + out));
      return Matrix((2.0 * rng.uniform_matrix(in, out).array() - 1.0) * a);
    };
    InferenceNets n;
    n.obs_dim = obs_dim;
    n.state_dim = state_dim;
    n.t_len = t_len;
    n.num_codes = num_codes;
    n.hidden = hidden;
    n.classifier_hidden = classifier_hidden;
    n.uz_id = store.add("brnn.Uz", glorot(obs_dim, hidden));
    n.wz_id = store.add("brnn.Wz", glorot(hidden, hidden));
    n.bz_id = store.add("brnn.bz", Matrix::Zero(1, hidden));
    n.ur_id = store.add("brnn.Ur", glorot(obs_dim, hidden));
    n.wr_id = store.add("brnn.Wr", glorot(hidden, hidden));
    n.br_id = store.add("brnn.br", Matrix::Zero(1, hidden));
    n.un_id = store.add("brnn.Un", glorot(obs_dim, hidden));
    n.wn_id = store.add("brnn.Wn", glorot(hidden, hidden));
    n.bn_id = store.add("brnn.bn", Matrix::Zero(1, hidden));
    n.head_w_id = store.add("head.W", glorot(hidden, 2 * state_dim));
    n.head_b_id = store.add("head.b", Matrix::Zero(1, 2 * state_dim));
    int flat = t_len * obs_dim;
    n.c1_w_id = store.add("cls.W1", glorot(flat, classifier_hidden));
    n.c1_b_id = store.add("cls.b1", Matrix::Zero(1, classifier_hidden));
    n.c2_w_id = store.add("cls.W2", glorot(classifier_hidden, classifier_hidden));
    n.c2_b_id = store.add("cls.b2", Matrix::Zero(1, classifier_hidden));
    n.c3_w_id = store.add("cls.W3", glorot(classifier_hidden, num_codes));
    n.c3_b_id = store.add("cls.b3", Matrix::Zero(1, num_codes));
    return n;
  }
};

// ---------------------------------------------------------------------------
// Batched forwards on tape
// ---------------------------------------------------------------------------

// N trajectories (each T x D) sliced into per-time batches: out[t] is N x D.
inline std::vector<Matrix> step_slices(const std::vector<Matrix>& ys) {
  const Index n = static_cast<Index>(ys.size());
  const Index t_len = ys.front().rows();
  const Index d = ys.front().cols();
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(t_len));
  for (Index t = 0; t < t_len; ++t) {
    Matrix m(n, d);
    for (Index i = 0; i < n; ++i) {
      if (ys[static_cast<std::size_t>(i)].rows() != t_len ||
          ys[static_cast<std::size_t>(i)].cols() != d)
        throw LengthMismatch("step_slices: trajectories differ in shape");
      m.row(i) = ys[static_cast<std::size_t>(i)].row(t);
    }
    out.push_back(std::move(m));
  }
  return out;
}

// Flatten each trajectory time-major: row n = [y_1, y_2, ..., y_T].
inline Matrix flatten_trajectories(const std::vector<Matrix>& ys) {
  const Index n = static_cast<Index>(ys.size());
  const Index t_len = ys.front().rows();
  const Index d = ys.front().cols();
  Matrix out(n, t_len * d);
  for (Index i = 0; i < n; ++i)
    for (Index t = 0; t < t_len; ++t)
      out.block(i, t * d, 1, d) = ys[static_cast<std::size_t>(i)].row(t);
  return out;
}

struct EncodeOnTape {
  Value mu;       // N x S
  Value log_var;  // N x S
  Value var;      // N x S, strictly positive by construction
};

// Backward recurrent encoder: consumes y_T .. y_1, then maps the final hidden
// state to (mu, log diag V) of the initial latent state.
inline EncodeOnTape encode_on_tape(const InferenceNets& n, const std::vector<Value>& leaves,
                                   Tape& tape, const std::vector<Matrix>& shifted_ys) {
  using namespace diffmath;
  if (static_cast<int>(shifted_ys.front().rows()) != n.t_len)
    throw LengthMismatch("encode_on_tape: trajectory length differs from the encoder");
  auto leaf = [&](int id) { return leaves[static_cast<std::size_t>(id)]; };
  std::vector<Matrix> slices = step_slices(shifted_ys);
  const Index batch = static_cast<Index>(shifted_ys.size());
  Value h = tape.constant(Matrix::Zero(batch, n.hidden));
  for (Index t = static_cast<Index>(slices.size()) - 1; t >= 0; --t) {
    Value xt = tape.constant(slices[static_cast<std::size_t>(t)]);
    Value zg = sigmoid(add_rowvec(add(matmul(xt, leaf(n.uz_id)), matmul(h, leaf(n.wz_id))),
                                  leaf(n.bz_id)));
    Value rg = sigmoid(add_rowvec(add(matmul(xt, leaf(n.ur_id)), matmul(h, leaf(n.wr_id))),
                                  leaf(n.br_id)));
    Value cand = tanh(add_rowvec(
        add(matmul(xt, leaf(n.un_id)), matmul(cmul(rg, h), leaf(n.wn_id))), leaf(n.bn_id)));
    h = add(cmul(sub(tape.constant(Matrix::Ones(batch, n.hidden)), zg), cand), cmul(zg, h));
  }
  Value raw = add_rowvec(matmul(h, leaf(n.head_w_id)), leaf(n.head_b_id));
  EncodeOnTape out;
  out.mu = cols(raw, 0, n.state_dim);
  out.log_var = cols(raw, n.state_dim, n.state_dim);
  out.var = exp(out.log_var);
  return out;
}

// Classifier logits from an already-flattened (and canonicalized) trajectory
// batch; the input may itself be tape-recorded, which is how the mutual
// information path backpropagates into generated trajectories.
inline Value classifier_logits_on_tape(const InferenceNets& n, const std::vector<Value>& leaves,
                                       const Value& flat) {
  using namespace diffmath;
  if (flat.cols() != static_cast<Index>(n.t_len * n.obs_dim))
    throw DimensionMismatch("classifier_logits_on_tape: flattened width mismatch");
  auto leaf = [&](int id) { return leaves[static_cast<std::size_t>(id)]; };
  Value h1 = tanh(add_rowvec(matmul(flat, leaf(n.c1_w_id)), leaf(n.c1_b_id)));
  Value h2 = tanh(add_rowvec(matmul(h1, leaf(n.c2_w_id)), leaf(n.c2_b_id)));
  return add_rowvec(matmul(h2, leaf(n.c3_w_id)), leaf(n.c3_b_id));
}

// ---------------------------------------------------------------------------
// Plain convenience wrappers (scratch tape, values only)
// ---------------------------------------------------------------------------

// q(x_1 | y): trajectory is canonicalized internally with angle = 0
// (shift only); the returned Gaussian lives in the shifted frame.
inline std::pair<Vector, Vector> encode_initial(const Matrix& y, const InferenceNets& nets,
                                                const ParamSet& store) {
  Tape tape;
  std::vector<Value> leaves = store.leaves_on(tape);
  EncodeOnTape enc = encode_on_tape(nets, leaves, tape, {canonicalize(y, 0.0)});
  return {enc.mu.data().row(0).transpose(), enc.var.data().row(0).transpose()};
}

// q(c_1 | y): canonicalization (shift + rotation per the policy) is applied
// internally; returns the softmax probability vector over codes.
inline Vector classify_code(const Matrix& y, const InferenceNets& nets, const ParamSet& store,
                            const AnglePolicy& policy, Rng* rng = nullptr) {
  double angle = policy.random ? policy.draw(*rng) : policy.angle;
  Tape tape;
  std::vector<Value> leaves = store.leaves_on(tape);
  Value flat = tape.constant(flatten_trajectories({canonicalize(y, angle)}));
  Value probs = diffmath::softmax_rows(classifier_logits_on_tape(nets, leaves, flat));
  return probs.data().row(0).transpose();
}

// ---------------------------------------------------------------------------
// Reparameterized samplers
// ---------------------------------------------------------------------------

inline Vector sample_gaussian(const Vector& mu, const Vector& var, const Vector& draw) {
  if (mu.size() != var.size() || mu.size() != draw.size())
    throw DimensionMismatch("sample_gaussian: size mismatch");
  if ((var.array() <= 0.0).any()) throw ValidationError("sample_gaussian: variance must be > 0");
  return mu + var.cwiseSqrt().cwiseProduct(draw);
}

inline double gaussian_diag_logpdf(const Vector& x, const Vector& mu, const Vector& var) {
  double ll = 0.0;
  for (Index i = 0; i < x.size(); ++i) {
    double r = x(i) - mu(i);
    ll += -0.5 * (std::log(2.0 * M_PI * var(i)) + r * r / var(i));
  }
  return ll;
}

struct CodeSample {
  Vector relaxed;  // sums to 1
  Index hard = 0;  // argmax of the perturbed logits (Gumbel-max draw)
};

// Gumbel-softmax draw from a categorical given uniform randoms, one per class.
// Log-probabilities are clamped at -30 so near-zero classes stay finite.
inline CodeSample sample_code(const Vector& probs, const GumbelConfig& cfg,
                              const Vector& uniform_draws) {
  cfg.validate();
  if (probs.size() != uniform_draws.size())
    throw DimensionMismatch("sample_code: draw count differs from class count");
  if ((probs.array() <= 0.0).all())
    throw DegenerateDistribution("sample_code: all probabilities vanish");
  Vector pert(probs.size());
  for (Index l = 0; l < probs.size(); ++l) {
    double logp = std::max(std::log(std::max(probs(l), 0.0)), -30.0);
    double gumbel = -std::log(-std::log(std::max(uniform_draws(l), 1e-300)));
    pert(l) = logp + gumbel;
  }
  CodeSample out;
  pert.maxCoeff(&out.hard);
  Eigen::ArrayXd scaled = (pert.array() - pert.maxCoeff()) / cfg.temperature;
  Eigen::ArrayXd e = scaled.exp();
  out.relaxed = (e / e.sum()).matrix();
  return out;
}

struct CodeSampleOnTape {
  Value weights;            // B x L; straight-through one-hot or soft relaxation
  std::vector<Index> hard;  // per-row hard index
};

// Batched Gumbel-softmax on tape. `log_probs` are tape-recorded classifier
// log-probabilities (B x L); uniform draws are per-row constants.
inline CodeSampleOnTape sample_code_on_tape(const Value& log_probs, double tau,
                                            bool straight_through, const Matrix& uniform_draws) {
  using namespace diffmath;
  Tape& tape = log_probs.tape();
  const Index b = log_probs.rows(), l = log_probs.cols();
  if (uniform_draws.rows() != b || uniform_draws.cols() != l)
    throw ShapeMismatch("sample_code_on_tape: draw shape mismatch");
  Matrix gumbel(b, l);
  for (Index i = 0; i < b; ++i)
    for (Index j = 0; j < l; ++j)
      gumbel(i, j) = -std::log(-std::log(std::max(uniform_draws(i, j), 1e-300)));
  Value pert = add(clamp_min(log_probs, -30.0), tape.constant(gumbel));
  Value soft = softmax_rows(scale(pert, 1.0 / tau));

  CodeSampleOnTape out;
  out.hard.resize(static_cast<std::size_t>(b));
  Matrix onehot = Matrix::Zero(b, l);
  for (Index i = 0; i < b; ++i) {
    Index arg;
    pert.data().row(i).maxCoeff(&arg);
    out.hard[static_cast<std::size_t>(i)] = arg;
    onehot(i, arg) = 1.0;
  }
  if (straight_through)
    out.weights = add(sub(soft, stop_gradient(soft)), tape.constant(onehot));
  else
    out.weights = soft;
  return out;
}

}  // namespace infossm::inference
