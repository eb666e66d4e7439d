#pragma once

// Training losses: the K-sample Monte Carlo objective, the variational mutual
// information bound between the dynamics code and generated trajectories, the
// combined loss with the MI weight, and the end-to-end training loop (Adam,
// one recording per iteration, bit-reproducible under a seed).

#include "infossm/core.hpp"
#include "infossm/diffmath.hpp"
#include "infossm/gp.hpp"
#include "infossm/inference.hpp"
#include "infossm/ssm.hpp"

#include <chrono>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace infossm::objective {

using diffmath::ParamSet;
using diffmath::Tape;
using diffmath::Value;

struct TrainingConfig {
  int k_samples = 4;        // K Monte Carlo samples per trajectory
  int num_modes = 3;        // L
  double mi_weight = 0.0;   // lambda; 0 recovers H-GPSSM, 0 with L=1 is PRSSM
  int t_len = 20;           // window length T
  int epochs = 1000;
  int batch_size = 0;       // 0 = full batch
  std::uint64_t seed = 1;
  int mi_samples = 9;       // generated trajectories per MI estimate
  inference::GumbelConfig gumbel;
  diffmath::AdamConfig adam{1e-2, 0.9, 0.999, 1e-8};

  void validate() const {
    if (k_samples < 1) throw ValidationError("TrainingConfig: K must be >= 1");
    if (num_modes < 1) throw ValidationError("TrainingConfig: L must be >= 1");
    if (mi_weight < 0.0) throw ValidationError("TrainingConfig: lambda must be >= 0");
    if (t_len < 2) throw ValidationError("TrainingConfig: T must be >= 2");
    if (mi_samples < 1) throw ValidationError("TrainingConfig: mi_samples must be >= 1");
    gumbel.validate();
  }
};

// Fixed priors of Eq-ratio terms: a weak Gaussian over the initial state in
// the shifted frame and a uniform categorical over the initial code.
struct Priors {
  Vector x1_mean;
  Vector x1_var;
  int num_codes = 1;

  void validate() const {
    if (x1_mean.size() != x1_var.size()) throw ShapeMismatch("Priors: mean/var size differs");
    if ((x1_var.array() <= 0.0).any()) throw ValidationError("Priors: variances must be > 0");
    if (num_codes < 1) throw ValidationError("Priors: need at least one code");
  }

  // Position slots are pinned near the origin by canonicalization (std 1);
  // velocity and acceleration slots get std 10 in data units.
  static Priors standard(const ssm::CanonicalLayout& layout, int num_codes) {
    Priors p;
    int s = layout.state_dim();
    p.x1_mean = Vector::Zero(s);
    p.x1_var = Vector::Constant(s, 100.0);
    p.x1_var.head(layout.spatial_dim).setConstant(1.0);
    p.num_codes = num_codes;
    return p;
  }
};

namespace detail {

inline bool is_identity(const Matrix& p) {
  return (p - Matrix::Identity(p.rows(), p.cols())).cwiseAbs().maxCoeff() == 0.0;
}

// Repeat each row of a plain matrix k times (contiguous blocks).
inline Matrix repeat_rows_plain(const Matrix& m, Index k) {
  Matrix out(m.rows() * k, m.cols());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < k; ++j) out.row(i * k + j) = m.row(i);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Monte Carlo objective
// ---------------------------------------------------------------------------

// Variational inputs of the MCO; normally produced by the inference nets, but
// injectable so oracle tests can supply an exact posterior.
struct McoInputs {
  Value mu;       // N x S, q(x_1) means in the shifted frame
  Value log_var;  // N x S
  Value logq_c;   // N x L, log q(c_1 | y) (log-softmax of classifier logits)
};

struct McoParts {
  Value total;        // 1 x 1: sum of per-trajectory terms minus sum of KLs
  Value per_traj;     // N x 1: log (1/K) sum_k w_k per trajectory
  Value log_weights;  // (N*K) x 1
};

// Core estimator. Draw order per evaluation: xi_1 (B x S), Gumbel uniforms
// (B x L), then per transition step [per-row code uniforms when P is not the
// identity], xi_f (B x Q), xi_r (B x Q).
inline McoParts mco_core(Tape& tape, const ssm::SsmOnTape& st, const ssm::HybridSsm& model,
                         const McoInputs& inputs, const Priors& priors,
                         const TrainingConfig& cfg, double tau,
                         const std::vector<Matrix>& shifted_batch, Rng& rng) {
  using namespace diffmath;
  const Index n = static_cast<Index>(shifted_batch.size());
  const Index k = cfg.k_samples;
  const Index b = n * k;
  const Index s_dim = st.layout.state_dim();
  const Index q_dim = st.layout.gp_output_len();
  const Index d_obs = st.layout.spatial_dim;
  const Index t_len = shifted_batch.front().rows();
  const Index l_codes = st.num_modes;

  // Initial-state samples and the q/p density ratio. With x = mu + sqrt(V) xi,
  // log q(x) reduces to -1/2 (|xi|^2 + sum log V) - S/2 log 2pi.
  Matrix xi1 = rng.normal_matrix(b, s_dim);
  Value mu_rep = repeat_rows(inputs.mu, k);
  Value logv_rep = repeat_rows(inputs.log_var, k);
  Value x1 = add(mu_rep, cmul(exp(scale(logv_rep, 0.5)), tape.constant(xi1)));
  Matrix logq_const(b, 1);
  for (Index i = 0; i < b; ++i)
    logq_const(i, 0) = -0.5 * (xi1.row(i).squaredNorm() +
                               static_cast<double>(s_dim) * std::log(2.0 * M_PI));
  Value logq_x1 = add(scale(rowwise_sum(logv_rep), -0.5), tape.constant(logq_const));

  Matrix prior_mean_rep = Matrix::Ones(b, 1) * priors.x1_mean.transpose();
  Matrix inv_prior_var = priors.x1_var.array().inverse().transpose();
  double prior_norm = -0.5 * (static_cast<double>(s_dim) * std::log(2.0 * M_PI) +
                              priors.x1_var.array().log().sum());
  Value resid_p = sub(x1, tape.constant(prior_mean_rep));
  Value logp_x1 = add_const(
      scale(rowwise_sum(mul_rowvec(square(resid_p), tape.constant(inv_prior_var))), -0.5),
      prior_norm);

  // Initial codes: straight-through Gumbel draws from the classifier, with the
  // ratio log p(c_1) - log q(c_1) evaluated at the drawn code.
  Value logq_c_rep = repeat_rows(inputs.logq_c, k);
  Matrix gumbel_uniforms = rng.uniform_matrix(b, l_codes);
  inference::CodeSampleOnTape code = inference::sample_code_on_tape(
      logq_c_rep, tau, cfg.gumbel.straight_through, gumbel_uniforms);
  double logp_c = -std::log(static_cast<double>(priors.num_codes));
  Value ratio_c = scale(
      rowwise_sum(cmul(code.weights, add_const(logq_c_rep, -logp_c))), -1.0);

  // Rollout with blended transitions; the log-likelihood of the (shifted)
  // observations accumulates per row.
  std::vector<Matrix> slices = inference::step_slices(shifted_batch);
  const bool fixed_codes =
      !model.trainable_transition && detail::is_identity(model.transition.p);
  Value log_transition;
  if (model.trainable_transition)
    log_transition = log(clamp_min(st.transition_rows, 1e-300));

  Value x = x1;
  Value loglik =
      ssm::obs_loglik_on_tape(st, x, tape.constant(detail::repeat_rows_plain(slices[0], k)));
  Value weights = code.weights;
  std::vector<Index> hard = code.hard;
  for (Index t = 0; t + 1 < t_len; ++t) {
    if (t > 0 && !fixed_codes) {
      Matrix uniforms = rng.uniform_matrix(b, l_codes);
      if (model.trainable_transition) {
        Value rows_log = gather_rows(log_transition, hard);
        inference::CodeSampleOnTape step_code = inference::sample_code_on_tape(
            rows_log, tau, cfg.gumbel.straight_through, uniforms);
        weights = step_code.weights;
        hard = step_code.hard;
      } else {
        Matrix onehot = Matrix::Zero(b, l_codes);
        for (Index i = 0; i < b; ++i) {
          Vector row = model.transition.p.row(hard[static_cast<std::size_t>(i)]).transpose();
          double u = uniforms(i, 0);
          double acc = 0.0;
          Index pick = l_codes - 1;
          for (Index j = 0; j < l_codes; ++j) {
            acc += row(j);
            if (u < acc) {
              pick = j;
              break;
            }
          }
          hard[static_cast<std::size_t>(i)] = pick;
          onehot(i, pick) = 1.0;
        }
        weights = tape.constant(onehot);
      }
    }
    Value xi_f = tape.constant(rng.normal_matrix(b, q_dim));
    Value xi_r = tape.constant(rng.normal_matrix(b, q_dim));
    x = ssm::step_on_tape(st, x, weights, xi_f, xi_r);
    loglik = add(loglik,
                 ssm::obs_loglik_on_tape(
                     st, x,
                     tape.constant(detail::repeat_rows_plain(
                         slices[static_cast<std::size_t>(t + 1)], k))));
  }

  McoParts out;
  out.log_weights = add(add(loglik, sub(logp_x1, logq_x1)), ratio_c);
  Value grouped = reshape_rowmajor(out.log_weights, n, k);
  out.per_traj = add_const(logsumexp_rows(grouped), -std::log(static_cast<double>(k)));
  for (Index i = 0; i < n; ++i)
    if (!std::isfinite(out.per_traj.data()(i, 0)))
      throw NonFiniteObjective("mco: non-finite contribution at trajectory " +
                               std::to_string(i));
  out.total = sub(sum(out.per_traj), st.kl_total);
  (void)d_obs;
  return out;
}

// Full MCO: encoder and classifier feed the core estimator. Classifier input
// canonicalization draws one random rotation angle per trajectory; angles are
// consumed from `rng` first, before the core's draws.
inline McoParts mco_on_tape(Tape& tape, const ssm::SsmOnTape& st, const ssm::HybridSsm& model,
                            const inference::InferenceNets& nets,
                            const std::vector<Value>& leaves, const Priors& priors,
                            const TrainingConfig& cfg, double tau,
                            const std::vector<Matrix>& batch, Rng& rng) {
  std::vector<Matrix> shifted, rotated;
  shifted.reserve(batch.size());
  rotated.reserve(batch.size());
  const bool can_rotate = batch.front().cols() >= 2;
  for (const Matrix& y : batch) {
    double angle = can_rotate ? 2.0 * M_PI * rng.uniform() : 0.0;
    shifted.push_back(inference::canonicalize(y, 0.0));
    rotated.push_back(inference::canonicalize(y, angle));
  }
  inference::EncodeOnTape enc = inference::encode_on_tape(nets, leaves, tape, shifted);
  Value logits = inference::classifier_logits_on_tape(
      nets, leaves, tape.constant(inference::flatten_trajectories(rotated)));
  McoInputs inputs{enc.mu, enc.log_var, diffmath::log_softmax_rows(logits)};
  return mco_core(tape, st, model, inputs, priors, cfg, tau, shifted, rng);
}

// ---------------------------------------------------------------------------
// Mutual information bound
// ---------------------------------------------------------------------------

// E[ log q(c_1 ; G(x_1, c_{1:T-1})) ] under codes from the prior chain and
// x_1 from the prior; H(c_1) is constant and omitted, matching the reported
// convention. Differentiable through the generator and the classifier.
inline Value mi_on_tape(Tape& tape, const ssm::SsmOnTape& st,
                        const ssm::ModeTransitionMatrix& prior_chain,
                        const inference::InferenceNets& nets,
                        const std::vector<Value>& leaves, const Priors& priors,
                        const TrainingConfig& cfg, Rng& rng,
                        std::vector<Index>* codes_out = nullptr,
                        Value* logq_out = nullptr) {
  using namespace diffmath;
  const Index b = cfg.mi_samples;
  const Index s_dim = st.layout.state_dim();
  const Index q_dim = st.layout.gp_output_len();
  const Index d_obs = st.layout.spatial_dim;
  const Index t_len = cfg.t_len;
  const Index l_codes = st.num_modes;

  // Codes from the prior chain, initial states from the prior.
  std::vector<std::vector<Index>> code_paths;
  for (Index i = 0; i < b; ++i) {
    Index c1 = static_cast<Index>(rng.uniform_int(l_codes));
    code_paths.push_back(ssm::sample_code_path(c1, prior_chain, t_len, rng));
  }
  Matrix xi0 = rng.normal_matrix(b, s_dim);
  Matrix x1 = (xi0.array().rowwise() * priors.x1_var.transpose().array().sqrt()).matrix();
  x1.rowwise() += priors.x1_mean.transpose();

  std::vector<double> angles(static_cast<std::size_t>(b), 0.0);
  if (d_obs >= 2)
    for (Index i = 0; i < b; ++i) angles[static_cast<std::size_t>(i)] = 2.0 * M_PI * rng.uniform();

  // Generate observations; draw order mirrors generate_trajectory (y_1 noise,
  // then per step xi_f, xi_r, obs noise).
  Value x = tape.constant(x1);
  std::vector<Value> obs_blocks;
  auto observe = [&](const Value& state) {
    Value noise = tape.constant(rng.normal_matrix(b, d_obs));
    return add(ssm::observe_positions_on_tape(st, state),
               mul_rowvec(noise, st.sqrt_obs_var));
  };
  obs_blocks.push_back(observe(x));
  for (Index t = 0; t + 1 < t_len; ++t) {
    Matrix onehot = Matrix::Zero(b, l_codes);
    for (Index i = 0; i < b; ++i)
      onehot(i, code_paths[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)]) = 1.0;
    Value xi_f = tape.constant(rng.normal_matrix(b, q_dim));
    Value xi_r = tape.constant(rng.normal_matrix(b, q_dim));
    x = ssm::step_on_tape(st, x, tape.constant(onehot), xi_f, xi_r);
    obs_blocks.push_back(observe(x));
  }

  // Canonicalize on tape (shift to the first observation, rotate per-sample)
  // and classify.
  Value y1 = obs_blocks.front();
  Value flat;
  Matrix cos_col(b, 1), sin_col(b, 1);
  for (Index i = 0; i < b; ++i) {
    cos_col(i, 0) = std::cos(angles[static_cast<std::size_t>(i)]);
    sin_col(i, 0) = std::sin(angles[static_cast<std::size_t>(i)]);
  }
  Value c_col = tape.constant(cos_col), s_col = tape.constant(sin_col);
  for (Index t = 0; t < t_len; ++t) {
    Value block = sub(obs_blocks[static_cast<std::size_t>(t)], y1);
    if (d_obs >= 2) {
      Value px = cols(block, 0, 1), py = cols(block, 1, 1);
      Value rx = sub(cmul(px, c_col), cmul(py, s_col));
      Value ry = add(cmul(px, s_col), cmul(py, c_col));
      Value rot = hstack(rx, ry);
      if (d_obs > 2) rot = hstack(rot, cols(block, 2, d_obs - 2));
      block = rot;
    }
    flat = flat.valid() ? hstack(flat, block) : block;
  }
  Value logq = log_softmax_rows(inference::classifier_logits_on_tape(nets, leaves, flat));
  Matrix onehot_c1 = Matrix::Zero(b, l_codes);
  for (Index i = 0; i < b; ++i)
    onehot_c1(i, code_paths[static_cast<std::size_t>(i)][0]) = 1.0;
  Value picked = rowwise_sum(cmul(logq, tape.constant(onehot_c1)));
  if (codes_out) {
    codes_out->clear();
    for (Index i = 0; i < b; ++i)
      codes_out->push_back(code_paths[static_cast<std::size_t>(i)][0]);
  }
  if (logq_out) *logq_out = logq;
  return scale(sum(picked), 1.0 / static_cast<double>(b));
}

// ---------------------------------------------------------------------------
// Plain wrappers and the combined loss
// ---------------------------------------------------------------------------

struct LossParts {
  Value loss;      // scalar to minimize: -(mco + lambda * mi)
  Value mco_total; // maximization-sense MCO (sum over batch minus KLs)
  Value mi;        // MI bound estimate (always evaluated, for reporting)
  McoParts mco_parts;
};

// One recording of the full objective. The MCO consumes rng fork 1 and the MI
// term fork 2, so lambda = 0 reproduces the pure MCO bit-for-bit.
inline LossParts info_loss_on_tape(Tape& tape, const ssm::HybridSsm& model,
                                   const inference::InferenceNets& nets, const ParamSet& store,
                                   const std::vector<Value>& leaves, const Priors& priors,
                                   const TrainingConfig& cfg, double tau,
                                   const std::vector<Matrix>& batch, Rng& rng) {
  using namespace diffmath;
  ssm::SsmOnTape st = ssm::ssm_on_tape(model, tape, leaves);
  Rng rng_mco = rng.fork(1);
  Rng rng_mi = rng.fork(2);
  LossParts out;
  out.mco_parts =
      mco_on_tape(tape, st, model, nets, leaves, priors, cfg, tau, batch, rng_mco);
  out.mco_total = out.mco_parts.total;
  out.mi = mi_on_tape(tape, st, model.current_transition(store), nets, leaves, priors, cfg,
                      rng_mi);
  Value objective = out.mco_total;
  if (cfg.mi_weight > 0.0) objective = add(objective, scale(out.mi, cfg.mi_weight));
  out.loss = neg(objective);
  if (!std::isfinite(out.loss.scalar()))
    throw NonFiniteObjective("info_loss: objective is not finite");
  return out;
}

inline double mco(const TrajectoryBatch& batch, const ssm::HybridSsm& model,
                  const inference::InferenceNets& nets, const ParamSet& store,
                  const Priors& priors, const TrainingConfig& cfg) {
  cfg.validate();
  priors.validate();
  Tape tape;
  std::vector<Value> leaves = store.leaves_on(tape);
  ssm::SsmOnTape st = ssm::ssm_on_tape(model, tape, leaves);
  Rng rng = Rng(cfg.seed).fork(1);
  return mco_on_tape(tape, st, model, nets, leaves, priors, cfg,
                     cfg.gumbel.temperature, batch.trajectories, rng)
      .total.scalar();
}

inline double mi_bound(const ssm::HybridSsm& model, const inference::InferenceNets& nets,
                       const ParamSet& store, const Priors& priors, const TrainingConfig& cfg,
                       Rng& rng) {
  Tape tape;
  std::vector<Value> leaves = store.leaves_on(tape);
  ssm::SsmOnTape st = ssm::ssm_on_tape(model, tape, leaves);
  return mi_on_tape(tape, st, model.current_transition(store), nets, leaves, priors, cfg, rng)
      .scalar();
}

inline double info_loss(const TrajectoryBatch& batch, const ssm::HybridSsm& model,
                        const inference::InferenceNets& nets, const ParamSet& store,
                        const Priors& priors, const TrainingConfig& cfg) {
  cfg.validate();
  priors.validate();
  Tape tape;
  std::vector<Value> leaves = store.leaves_on(tape);
  Rng rng(cfg.seed);
  LossParts parts = info_loss_on_tape(tape, model, nets, store, leaves, priors, cfg,
                                      cfg.gumbel.temperature, batch.trajectories, rng);
  double mi_term = cfg.mi_weight > 0.0 ? cfg.mi_weight * parts.mi.scalar() : 0.0;
  return parts.mco_total.scalar() + mi_term;
}

// ---------------------------------------------------------------------------
// Training (Algorithm: iterate MCO + MI, update everything with Adam)
// ---------------------------------------------------------------------------

struct ModelSpec {
  ssm::CanonicalLayout layout;
  double dt = 0.1;
  int num_inducing = 20;  // M
  int brnn_hidden = 32;
  int classifier_hidden = 64;
  double obs_noise_var_init = 0.2;
  double proc_noise_var_init = 0.1;
  ssm::ModeTransitionMatrix transition;  // identity default set in train()
  bool trainable_transition = false;
};

struct EpochMetrics {
  long epoch = 0;
  double mco_sum = 0.0;   // batch sum minus KLs
  double mco_mean = 0.0;  // per-trajectory mean
  double mi = 0.0;
  double wallclock_s = 0.0;
};

struct TrainResult {
  ParamSet store;
  ssm::HybridSsm model;
  inference::InferenceNets nets;
  Priors priors;
  TrainingConfig config;
  std::vector<EpochMetrics> metrics;
  bool aborted_non_finite = false;
};

// Inducing inputs are drawn uniformly from encoder-initialized latent states
// of the training data, then perturbed with N(0, 0.01 I).
inline Matrix init_inducing_inputs(const Matrix& encoded_states, int m,
                                   const ssm::CanonicalLayout& layout, Rng& rng) {
  Matrix z(m, layout.gp_input_len);
  for (int i = 0; i < m; ++i) {
    Index pick = static_cast<Index>(rng.uniform_int(encoded_states.rows()));
    z.row(i) = encoded_states.row(pick).segment(layout.gp_input_start, layout.gp_input_len);
    for (Index j = 0; j < z.cols(); ++j) z(i, j) += 0.1 * rng.normal();
  }
  return z;
}

inline TrainResult train(const TrajectoryBatch& data, const ModelSpec& spec,
                         TrainingConfig cfg) {
  cfg.validate();
  data.validate();
  if (data.t_len() < cfg.t_len)
    throw ValidationError("train: trajectories shorter than the configured window");
  if (data.obs_dim() != spec.layout.spatial_dim)
    throw ValidationError("train: observation dim differs from layout");

  TrainResult res;
  res.config = cfg;
  Rng init_rng(mix_seed(cfg.seed, 0xA11CE));

  // Nets first: the encoder initializes the latent states that seed Z.
  res.nets = inference::InferenceNets::create(
      res.store, spec.layout.spatial_dim, spec.layout.state_dim(), cfg.t_len, cfg.num_modes,
      init_rng, spec.brnn_hidden, spec.classifier_hidden);

  std::vector<Matrix> windows;
  for (const Matrix& y : data.trajectories) windows.push_back(y.topRows(cfg.t_len));

  Matrix encoded(static_cast<Index>(windows.size()), spec.layout.state_dim());
  {
    Tape tape;
    std::vector<Value> leaves = res.store.leaves_on(tape);
    std::vector<Matrix> shifted;
    for (const Matrix& y : windows) shifted.push_back(inference::canonicalize(y, 0.0));
    inference::EncodeOnTape enc =
        inference::encode_on_tape(res.nets, leaves, tape, shifted);
    encoded = enc.mu.data();
  }

  std::vector<gp::SparseGpMode> mode_inits;
  for (int l = 0; l < cfg.num_modes; ++l) {
    gp::SparseGpMode m;
    m.inducing_inputs = init_inducing_inputs(encoded, spec.num_inducing, spec.layout, init_rng);
    m.kernel.signal_std = 1.0;
    m.kernel.length_scales = Vector::Ones(spec.layout.gp_input_len);
    m.mean.h = Matrix::Zero(spec.layout.gp_output_len(), spec.layout.gp_input_len);
    m.mean.b = Vector::Zero(spec.layout.gp_output_len());
    m.variational_mean = 0.01 * init_rng.normal_matrix(spec.num_inducing,
                                                       spec.layout.gp_output_len());
    Matrix kzz = gp::se_ard_cross(m.inducing_inputs, m.inducing_inputs, m.kernel);
    m.s_chol = gp::cholesky_with_jitter(kzz);
    m.output_cov_diag = Vector::Ones(spec.layout.gp_output_len());
    m.process_noise = Vector::Constant(spec.layout.gp_output_len(), spec.proc_noise_var_init);
    mode_inits.push_back(std::move(m));
  }

  ssm::ModeTransitionMatrix transition = spec.transition;
  if (transition.p.size() == 0)
    transition = ssm::ModeTransitionMatrix::identity(cfg.num_modes);
  res.model = ssm::HybridSsm::create(
      res.store, spec.layout, spec.dt, mode_inits,
      Vector::Constant(spec.layout.spatial_dim, spec.obs_noise_var_init), transition,
      spec.trainable_transition);
  res.priors = Priors::standard(spec.layout, cfg.num_modes);

  diffmath::AdamState adam(cfg.adam, res.store.values());
  std::vector<Matrix> last_good = res.store.values();
  const Index n_total = static_cast<Index>(windows.size());
  auto t0 = std::chrono::steady_clock::now();

  for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng_epoch = Rng(cfg.seed).fork(static_cast<std::uint64_t>(epoch) + 1);
    std::vector<Matrix> batch;
    if (cfg.batch_size > 0 && cfg.batch_size < n_total) {
      Rng rng_sel = rng_epoch.fork(99);
      for (int i = 0; i < cfg.batch_size; ++i)
        batch.push_back(windows[static_cast<std::size_t>(rng_sel.uniform_int(n_total))]);
    } else {
      batch = windows;
    }
    double tau = cfg.gumbel.temperature_at(epoch);

    try {
      Tape tape;
      std::vector<Value> leaves = res.store.leaves_on(tape);
      LossParts parts = info_loss_on_tape(tape, res.model, res.nets, res.store, leaves,
                                          res.priors, cfg, tau, batch, rng_epoch);
      last_good = res.store.values();
      std::vector<Matrix> grads = tape.gradients(parts.loss, leaves);
      adam.step(res.store.values(), grads);

      EpochMetrics m;
      m.epoch = epoch;
      m.mco_sum = parts.mco_total.scalar();
      m.mco_mean = m.mco_sum / static_cast<double>(batch.size());
      m.mi = parts.mi.scalar();
      m.wallclock_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.metrics.push_back(m);
    } catch (const NonFiniteObjective&) {
      res.store.values() = last_good;
      res.aborted_non_finite = true;
      break;
    }
  }
  return res;
}

}  // namespace infossm::objective
