#pragma once

// Multi-modal state-space model: canonical integrator-chain state layout, the
// latent dynamics-code Markov chain, mixture transition with Euler
// propagation, the position-selection observation model, and trajectory
// generation. Plain and tape-recorded rollouts share the same step semantics
// (same draw order), so training and generation stay consistent.

#include "infossm/core.hpp"
#include "infossm/diffmath.hpp"
#include "infossm/gp.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace infossm::ssm {

using diffmath::ParamSet;
using diffmath::Tape;
using diffmath::Value;

// ---------------------------------------------------------------------------
// Layout, code chain, observation model
// ---------------------------------------------------------------------------

// State stacked as [position | velocity | acceleration] chains of spatial
// dimension D; the GP drives the highest derivative. gp input/output slots are
// contiguous blocks.
struct CanonicalLayout {
  int order = 2;        // 1: position chain only, 2: +velocity, 3: +acceleration
  int spatial_dim = 2;  // D
  int gp_input_start = 0;
  int gp_input_len = 0;

  int state_dim() const { return order * spatial_dim; }
  int gp_output_start() const { return (order - 1) * spatial_dim; }
  int gp_output_len() const { return spatial_dim; }

  std::vector<int> gp_input_indices() const {
    std::vector<int> idx;
    for (int i = 0; i < gp_input_len; ++i) idx.push_back(gp_input_start + i);
    return idx;
  }
  std::vector<int> gp_output_indices() const {
    std::vector<int> idx;
    for (int i = 0; i < gp_output_len(); ++i) idx.push_back(gp_output_start() + i);
    return idx;
  }

  // Standard wiring: order 1 feeds positions to the GP; higher orders feed all
  // non-position slots (velocity, then acceleration).
  static CanonicalLayout make(int order, int spatial_dim) {
    if (order < 1 || order > 3) throw ValidationError("CanonicalLayout: order must be 1..3");
    if (spatial_dim < 1) throw ValidationError("CanonicalLayout: spatial_dim must be >= 1");
    CanonicalLayout l;
    l.order = order;
    l.spatial_dim = spatial_dim;
    if (order == 1) {
      l.gp_input_start = 0;
      l.gp_input_len = spatial_dim;
    } else {
      l.gp_input_start = spatial_dim;
      l.gp_input_len = (order - 1) * spatial_dim;
    }
    return l;
  }
};

struct ModeTransitionMatrix {
  Matrix p;  // L x L row-stochastic

  Index size() const { return p.rows(); }

  void validate() const {
    if (p.rows() != p.cols() || p.rows() < 1)
      throw ShapeMismatch("ModeTransitionMatrix: matrix must be square");
    if ((p.array() < 0.0).any() || (p.array() > 1.0).any())
      throw ValidationError("ModeTransitionMatrix: entries must lie in [0, 1]");
    for (Index i = 0; i < p.rows(); ++i)
      if (std::abs(p.row(i).sum() - 1.0) > 1e-12)
        throw ValidationError("ModeTransitionMatrix: rows must sum to 1");
  }

  static ModeTransitionMatrix identity(Index l) { return {Matrix::Identity(l, l)}; }

  // Sticky chain used for tracking: diag on the diagonal, the rest spread
  // uniformly off-diagonal.
  static ModeTransitionMatrix sticky(Index l, double diag) {
    if (l == 1) return identity(1);
    Matrix m = Matrix::Constant(l, l, (1.0 - diag) / static_cast<double>(l - 1));
    m.diagonal().setConstant(diag);
    return {m};
  }
};

inline Vector code_step_distribution(Index c, const ModeTransitionMatrix& p) {
  if (c < 0 || c >= p.size()) throw IndexOutOfRange("code_step_distribution: bad mode index");
  return p.p.row(c).transpose();
}

// Observations select position slots and add independent Gaussian noise.
struct ObservationModel {
  std::vector<int> selected;  // state slot read by each observation row
  Vector noise_var;           // per-dimension variances
  bool trainable_noise = true;

  Index obs_dim() const { return static_cast<Index>(selected.size()); }

  Matrix selection_matrix(int state_dim) const {
    Matrix c = Matrix::Zero(obs_dim(), state_dim);
    for (Index i = 0; i < obs_dim(); ++i) c(i, selected[static_cast<std::size_t>(i)]) = 1.0;
    return c;
  }

  void validate(int state_dim) const {
    if (obs_dim() < 1) throw ValidationError("ObservationModel: empty selection");
    if (noise_var.size() != obs_dim())
      throw ShapeMismatch("ObservationModel: noise dimension differs from selection");
    if ((noise_var.array() <= 0.0).any())
      throw ValidationError("ObservationModel: noise variances must be positive");
    for (int s : selected)
      if (s < 0 || s >= state_dim) throw IndexOutOfRange("ObservationModel: slot out of range");
  }

  static ObservationModel positions(const CanonicalLayout& layout, const Vector& noise_var) {
    ObservationModel m;
    for (int i = 0; i < layout.spatial_dim; ++i) m.selected.push_back(i);
    m.noise_var = noise_var;
    return m;
  }

  Vector observe(const Vector& x) const {
    Vector y(obs_dim());
    for (Index i = 0; i < obs_dim(); ++i) y(i) = x(selected[static_cast<std::size_t>(i)]);
    return y;
  }
};

inline double observation_log_likelihood(const Vector& y, const Vector& x,
                                         const ObservationModel& obs) {
  if (y.size() != obs.obs_dim()) throw DimensionMismatch("observation_log_likelihood: bad y");
  double ll = 0.0;
  for (Index i = 0; i < obs.obs_dim(); ++i) {
    double r = y(i) - x(obs.selected[static_cast<std::size_t>(i)]);
    ll += -0.5 * (std::log(2.0 * M_PI * obs.noise_var(i)) + r * r / obs.noise_var(i));
  }
  return ll;
}

// ---------------------------------------------------------------------------
// The model bundle (plain snapshot)
// ---------------------------------------------------------------------------

struct MultiModalSsm {
  CanonicalLayout layout;
  double dt = 0.1;
  std::vector<gp::SparseGpMode> modes;
  ModeTransitionMatrix transition;
  ObservationModel obs;

  Index num_modes() const { return static_cast<Index>(modes.size()); }

  void validate() const {
    if (modes.empty()) throw ValidationError("MultiModalSsm: need at least one mode");
    if (!(dt > 0.0)) throw ValidationError("MultiModalSsm: dt must be positive");
    transition.validate();
    if (transition.size() != num_modes())
      throw ShapeMismatch("MultiModalSsm: transition size differs from mode count");
    obs.validate(layout.state_dim());
    for (const auto& m : modes) {
      m.validate();
      if (m.p() != layout.gp_input_len || m.q() != layout.gp_output_len())
        throw ShapeMismatch("MultiModalSsm: mode dimensions differ from layout");
    }
  }
};

struct GaussianState {
  Vector mean;
  Vector var_diag;
};

// Cached per-mode predictors for repeated plain-path transitions.
class ModelPredictor {
public:
  explicit ModelPredictor(const MultiModalSsm& model) : model_(model) {
    model_.validate();
    for (const auto& m : model_.modes) predictors_.emplace_back(m);
  }

  const MultiModalSsm& model() const { return model_; }
  const gp::GpPredictor& mode(Index l) const {
    return predictors_[static_cast<std::size_t>(l)];
  }

  // Euler-propagated Gaussian over x_{t+1} given the active code: chain slots
  // advance deterministically; the GP-driven block carries dt^2 (v~ Sigma + R).
  GaussianState transition_moments(const Vector& x, Index c) const {
    if (c < 0 || c >= model_.num_modes())
      throw IndexOutOfRange("transition_moments: bad mode index");
    const CanonicalLayout& lay = model_.layout;
    if (x.size() != lay.state_dim()) throw DimensionMismatch("transition_moments: bad state");
    Vector xgp = x.segment(lay.gp_input_start, lay.gp_input_len);
    auto [gp_mean, gp_var] = mode(c).moments(xgp);

    GaussianState out;
    out.mean = x;
    int d = lay.spatial_dim;
    for (int k = 0; k + 1 < lay.order; ++k)
      out.mean.segment(k * d, d) += model_.dt * x.segment((k + 1) * d, d);
    out.mean.segment(lay.gp_output_start(), d) += model_.dt * gp_mean;

    out.var_diag = Vector::Zero(lay.state_dim());
    const gp::SparseGpMode& gm = model_.modes[static_cast<std::size_t>(c)];
    out.var_diag.segment(lay.gp_output_start(), d) =
        model_.dt * model_.dt * (gp_var * gm.output_cov_diag + gm.process_noise);
    return out;
  }

  Vector step_with_draws(const Vector& x, Index c, const Vector& xi_f,
                         const Vector& xi_r) const {
    const CanonicalLayout& lay = model_.layout;
    int d = lay.spatial_dim;
    Vector xgp = x.segment(lay.gp_input_start, lay.gp_input_len);
    Vector fhat = mode(c).sample_function_value(xgp, xi_f);
    const gp::SparseGpMode& gm = model_.modes[static_cast<std::size_t>(c)];
    Vector vdot = fhat + gm.process_noise.cwiseSqrt().cwiseProduct(xi_r);
    Vector next = x;
    for (int k = 0; k + 1 < lay.order; ++k)
      next.segment(k * d, d) += model_.dt * x.segment((k + 1) * d, d);
    next.segment(lay.gp_output_start(), d) += model_.dt * vdot;
    return next;
  }

  // One ancestral step; draw order per step is (xi_f, xi_r), mirroring the
  // training-path rollout.
  Vector step_sample(const Vector& x, Index c, Rng& rng) const {
    int d = model_.layout.spatial_dim;
    Vector xi_f = rng.normal_matrix(d, 1).col(0);
    Vector xi_r = rng.normal_matrix(d, 1).col(0);
    return step_with_draws(x, c, xi_f, xi_r);
  }

  // States only (no observation noise): rows are x_1..x_T.
  Matrix rollout_states(const Vector& x1, const std::vector<Index>& codes, Index t_len,
                        Rng& rng) const {
    if (t_len < 2) throw ValidationError("rollout_states: need T >= 2");
    if (static_cast<Index>(codes.size()) < t_len - 1)
      throw LengthMismatch("rollout_states: need T-1 codes");
    Matrix states(t_len, model_.layout.state_dim());
    states.row(0) = x1.transpose();
    Vector x = x1;
    for (Index t = 0; t + 1 < t_len; ++t) {
      Index c = codes[static_cast<std::size_t>(t)];
      if (c < 0 || c >= model_.num_modes()) throw IndexOutOfRange("rollout_states: bad code");
      x = step_sample(x, c, rng);
      states.row(t + 1) = x.transpose();
    }
    return states;
  }

private:
  MultiModalSsm model_;
  std::vector<gp::GpPredictor> predictors_;
};

inline GaussianState transition_moments(const Vector& x, Index c, const MultiModalSsm& model) {
  return ModelPredictor(model).transition_moments(x, c);
}

// Ancestral code path under the Markov chain, starting from c1.
inline std::vector<Index> sample_code_path(Index c1, const ModeTransitionMatrix& p, Index t_len,
                                           Rng& rng) {
  std::vector<Index> codes;
  codes.push_back(c1);
  for (Index t = 1; t + 1 < t_len; ++t) {
    Vector row = code_step_distribution(codes.back(), p);
    double u = rng.uniform();
    double acc = 0.0;
    Index pick = p.size() - 1;
    for (Index j = 0; j < p.size(); ++j) {
      acc += row(j);
      if (u < acc) {
        pick = j;
        break;
      }
    }
    codes.push_back(pick);
  }
  return codes;
}

// Observation sequence y_1..y_T by ancestral sampling. Per-trajectory draw
// order: y_1 noise, then per step (xi_f, xi_r, obs noise).
inline Matrix generate_trajectory(const Vector& x1, const std::vector<Index>& codes,
                                  const MultiModalSsm& model, Index t_len, Rng& rng) {
  ModelPredictor pred(model);
  Index d_obs = model.obs.obs_dim();
  Matrix y(t_len, d_obs);
  Vector noise_std = model.obs.noise_var.cwiseSqrt();
  Vector x = x1;
  y.row(0) =
      (model.obs.observe(x) + noise_std.cwiseProduct(rng.normal_matrix(d_obs, 1).col(0)))
          .transpose();
  if (t_len < 2) throw ValidationError("generate_trajectory: need T >= 2");
  if (static_cast<Index>(codes.size()) < t_len - 1)
    throw LengthMismatch("generate_trajectory: need T-1 codes");
  for (Index t = 0; t + 1 < t_len; ++t) {
    Index c = codes[static_cast<std::size_t>(t)];
    if (c < 0 || c >= model.num_modes()) throw IndexOutOfRange("generate_trajectory: bad code");
    x = pred.step_sample(x, c, rng);
    y.row(t + 1) =
        (model.obs.observe(x) + noise_std.cwiseProduct(rng.normal_matrix(d_obs, 1).col(0)))
            .transpose();
  }
  return y;
}

// ---------------------------------------------------------------------------
// Trainable model (parameter handles) and the tape rollout
// ---------------------------------------------------------------------------

struct HybridSsm {
  CanonicalLayout layout;
  double dt = 0.1;
  int num_modes = 1;
  std::vector<gp::GpModeParams> modes;
  int log_obs_var_id = -1;
  ModeTransitionMatrix transition;      // used when not trainable
  bool trainable_transition = false;
  int p_logits_id = -1;

  static HybridSsm create(ParamSet& store, const CanonicalLayout& layout, double dt,
                          const std::vector<gp::SparseGpMode>& mode_inits,
                          const Vector& obs_noise_init, const ModeTransitionMatrix& transition,
                          bool trainable_transition = false) {
    HybridSsm out;
    out.layout = layout;
    out.dt = dt;
    out.num_modes = static_cast<int>(mode_inits.size());
    for (std::size_t l = 0; l < mode_inits.size(); ++l)
      out.modes.push_back(
          gp::GpModeParams::create(store, "mode" + std::to_string(l), mode_inits[l]));
    out.log_obs_var_id =
        store.add("obs.log_var", obs_noise_init.array().log().transpose());
    out.transition = transition;
    out.trainable_transition = trainable_transition;
    if (trainable_transition)
      out.p_logits_id = store.add("transition.logits", transition.p.array().log().matrix());
    return out;
  }

  MultiModalSsm snapshot(const ParamSet& store) const {
    MultiModalSsm out;
    out.layout = layout;
    out.dt = dt;
    for (const auto& m : modes) out.modes.push_back(m.snapshot(store));
    out.transition = current_transition(store);
    out.obs = ObservationModel::positions(
        layout, store.value(log_obs_var_id).row(0).array().exp().transpose());
    return out;
  }

  ModeTransitionMatrix current_transition(const ParamSet& store) const {
    if (!trainable_transition) return transition;
    const Matrix& logits = store.value(p_logits_id);
    Matrix p(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
      Eigen::ArrayXd e = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
      p.row(i) = (e / e.sum()).matrix();
    }
    return {p};
  }
};

struct SsmOnTape {
  CanonicalLayout layout;
  double dt = 0.1;
  int num_modes = 1;
  std::vector<gp::GpModeOnTape> modes;
  Value log_obs_var;   // 1 x D
  Value inv_obs_var;   // 1 x D
  Value sqrt_obs_var;  // 1 x D
  Value kl_total;      // 1 x 1, sum over modes
  Value transition_rows;  // L x L (softmax of logits when trainable, constant otherwise)
};

inline SsmOnTape ssm_on_tape(const HybridSsm& model, Tape& tape,
                             const std::vector<Value>& leaves) {
  using namespace diffmath;
  SsmOnTape out;
  out.layout = model.layout;
  out.dt = model.dt;
  out.num_modes = model.num_modes;
  Value kl;
  for (const auto& m : model.modes) {
    out.modes.push_back(gp::mode_on_tape(m, leaves));
    kl = kl.valid() ? add(kl, out.modes.back().kl) : out.modes.back().kl;
  }
  out.kl_total = kl;
  out.log_obs_var = leaves[static_cast<std::size_t>(model.log_obs_var_id)];
  out.inv_obs_var = exp(neg(out.log_obs_var));
  out.sqrt_obs_var = exp(scale(out.log_obs_var, 0.5));
  out.transition_rows =
      model.trainable_transition
          ? softmax_rows(leaves[static_cast<std::size_t>(model.p_logits_id)])
          : tape.constant(model.transition.p);
  return out;
}

// One blended Euler step for a batch of states. `weights` (B x L) are one-hot
// or straight-through relaxed code indicators; noise draws are shared across
// modes so the forward pass equals the hard-selected mode's sample.
inline Value step_on_tape(const SsmOnTape& m, const Value& x, const Value& weights,
                          const Value& xi_f, const Value& xi_r) {
  using namespace diffmath;
  const CanonicalLayout& lay = m.layout;
  int d = lay.spatial_dim;
  Value xgp = cols(x, lay.gp_input_start, lay.gp_input_len);
  Value vdot;
  for (int l = 0; l < m.num_modes; ++l) {
    const gp::GpModeOnTape& mode = m.modes[static_cast<std::size_t>(l)];
    gp::GpPredictOnTape pred = gp::predict_on_tape(mode, xgp);
    Value fhat = gp::sample_on_tape(mode, pred, xi_f);
    Value with_noise = add(fhat, mul_rowvec(xi_r, mode.sqrt_proc));
    Value weighted = mul_colvec(with_noise, cols(weights, l, 1));
    vdot = vdot.valid() ? add(vdot, weighted) : weighted;
  }
  // Integrator chain: block k advances by dt * block_{k+1}; the top block by
  // dt * vdot.
  Value next;
  for (int k = 0; k < lay.order; ++k) {
    Value block = cols(x, k * d, d);
    Value upd = (k + 1 < lay.order) ? cols(x, (k + 1) * d, d) : vdot;
    Value advanced = add(block, scale(upd, m.dt));
    next = next.valid() ? hstack(next, advanced) : advanced;
  }
  return next;
}

inline Value observe_positions_on_tape(const SsmOnTape& m, const Value& x) {
  return diffmath::cols(x, 0, m.layout.spatial_dim);
}

// Row-wise Gaussian log density of observations y against position slots of x.
inline Value obs_loglik_on_tape(const SsmOnTape& m, const Value& x, const Value& y) {
  using namespace diffmath;
  int d = m.layout.spatial_dim;
  Value resid = sub(cols(x, 0, d), y);
  Value quad = rowwise_sum(mul_rowvec(square(resid), m.inv_obs_var));
  Value log_norm = add_const(scale(sum(m.log_obs_var), 1.0),
                             static_cast<double>(d) * std::log(2.0 * M_PI));
  return scale(add_scalar(quad, log_norm), -0.5);
}

}  // namespace infossm::ssm
