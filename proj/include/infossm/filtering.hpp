#pragma once

// Sequential Monte Carlo state estimation with a learned model: the particle
// filter step (ancestral code draw, transition sample, likelihood weighting,
// ESS-triggered resampling) and the smoothing-initialized tracking loop that
// seeds particles from the amortized posteriors.

#include "infossm/core.hpp"
#include "infossm/inference.hpp"
#include "infossm/ssm.hpp"

#include <cmath>
#include <numeric>
#include <vector>

namespace infossm::filtering {

struct ParticleSet {
  Matrix states;             // K x state_dim
  std::vector<Index> codes;  // K mode indices
  Vector weights;            // K, sums to 1

  Index count() const { return states.rows(); }

  void validate() const {
    if (count() < 1) throw ValidationError("ParticleSet: need at least one particle");
    if (static_cast<Index>(codes.size()) != count() || weights.size() != count())
      throw ShapeMismatch("ParticleSet: member sizes differ");
    if ((weights.array() < 0.0).any())
      throw ValidationError("ParticleSet: weights must be non-negative");
    if (std::abs(weights.sum() - 1.0) > 1e-10)
      throw ValidationError("ParticleSet: weights must sum to 1");
  }
};

// Effective sample size 1 / sum w^2 for normalized weights.
inline double ess(const Vector& weights) {
  double sq = weights.squaredNorm();
  if (sq == 0.0) throw ZeroWeights("ess: all weights are zero");
  return 1.0 / sq;
}

// Counter for steps where every particle's likelihood underflowed to zero and
// the weights were reset to uniform.
inline std::uint64_t& degenerate_weight_count() {
  thread_local std::uint64_t count = 0;
  return count;
}

struct PfOptions {
  double resample_fraction = 0.5;  // resample when ESS <= fraction * K
  bool systematic = false;         // multinomial by default
};

// Joint multinomial (or systematic) resampling of states and codes; weights
// reset to 1/K.
inline void resample(ParticleSet& p, Rng& rng, bool systematic = false) {
  const Index k = p.count();
  Vector cdf(k);
  double acc = 0.0;
  for (Index i = 0; i < k; ++i) {
    acc += p.weights(i);
    cdf(i) = acc;
  }
  Matrix new_states(k, p.states.cols());
  std::vector<Index> new_codes(static_cast<std::size_t>(k));
  double step = 1.0 / static_cast<double>(k);
  double base = systematic ? rng.uniform() * step : 0.0;
  for (Index i = 0; i < k; ++i) {
    double u = systematic ? base + step * static_cast<double>(i) : rng.uniform();
    Index pick = static_cast<Index>(std::lower_bound(cdf.data(), cdf.data() + k, u * acc) -
                                    cdf.data());
    if (pick >= k) pick = k - 1;
    new_states.row(i) = p.states.row(pick);
    new_codes[static_cast<std::size_t>(i)] = p.codes[static_cast<std::size_t>(pick)];
  }
  p.states = std::move(new_states);
  p.codes = std::move(new_codes);
  p.weights.setConstant(step);
}

namespace detail {

// Likelihood reweighting in the log domain plus the ESS-triggered resample.
inline void weight_and_resample(ParticleSet& p, const Vector& y,
                                const ssm::ModelPredictor& ctx, Rng& rng,
                                const PfOptions& opt) {
  const Index k = p.count();
  Vector logw(k);
  for (Index i = 0; i < k; ++i) {
    double prev = p.weights(i) > 0.0 ? std::log(p.weights(i))
                                     : -std::numeric_limits<double>::infinity();
    logw(i) = prev + ssm::observation_log_likelihood(y, p.states.row(i).transpose(),
                                                     ctx.model().obs);
  }
  double m = logw.maxCoeff();
  if (!std::isfinite(m)) {
    // Every particle is equally implausible; reset rather than divide by zero.
    ++degenerate_weight_count();
    p.weights.setConstant(1.0 / static_cast<double>(k));
  } else {
    Vector w = (logw.array() - m).exp();
    p.weights = w / w.sum();
  }
  if (ess(p.weights) <= opt.resample_fraction * static_cast<double>(k))
    resample(p, rng, opt.systematic);
}

}  // namespace detail

// One filter step with externally supplied noise (row i drives particle i);
// used directly by exchangeability tests, and by pf_step below.
inline void pf_step_with_draws(ParticleSet& p, const Vector& y, const ssm::ModelPredictor& ctx,
                               const Vector& code_uniforms, const Matrix& xi_f,
                               const Matrix& xi_r, Rng& resample_rng,
                               const PfOptions& opt = {}) {
  p.validate();
  const Index k = p.count();
  const ssm::MultiModalSsm& model = ctx.model();
  for (Index i = 0; i < k; ++i) {
    Vector row = ssm::code_step_distribution(p.codes[static_cast<std::size_t>(i)],
                                             model.transition);
    double acc = 0.0;
    Index pick = model.num_modes() - 1;
    for (Index j = 0; j < model.num_modes(); ++j) {
      acc += row(j);
      if (code_uniforms(i) < acc) {
        pick = j;
        break;
      }
    }
    p.codes[static_cast<std::size_t>(i)] = pick;
    p.states.row(i) = ctx.step_with_draws(p.states.row(i).transpose(), pick,
                                          xi_f.row(i).transpose(), xi_r.row(i).transpose())
                          .transpose();
  }
  detail::weight_and_resample(p, y, ctx, resample_rng, opt);
}

// Algorithm step per particle: sample the code via the transition chain,
// sample the state via the GP transition, weight by the observation
// likelihood, renormalize, and resample when ESS <= K/2.
inline void pf_step(ParticleSet& p, const Vector& y, const ssm::ModelPredictor& ctx, Rng& rng,
                    const PfOptions& opt = {}) {
  const Index k = p.count();
  const Index q = ctx.model().layout.gp_output_len();
  Vector code_uniforms(k);
  for (Index i = 0; i < k; ++i) code_uniforms(i) = rng.uniform();
  Matrix xi_f = rng.normal_matrix(k, q);
  Matrix xi_r = rng.normal_matrix(k, q);
  pf_step_with_draws(p, y, ctx, code_uniforms, xi_f, xi_r, rng, opt);
}

inline void pf_step(ParticleSet& p, const Vector& y, const ssm::MultiModalSsm& model, Rng& rng,
                    const PfOptions& opt = {}) {
  ssm::ModelPredictor ctx(model);
  pf_step(p, y, ctx, rng, opt);
}

// ---------------------------------------------------------------------------
// Tracking (smoothing init + filtering loop + estimation)
// ---------------------------------------------------------------------------

struct TrackResult {
  Matrix mean_states;     // T x S posterior-mean states, world frame
  Matrix code_marginals;  // T x L
  Vector ess_trace;       // T (first entry = K)
  ParticleSet particles;  // final weighted set, world frame
};

// Track a window of observations: particles initialize from the encoder
// posterior q(x_1) and classifier q(c_1) on the shift-canonicalized window,
// filter forward over the remaining observations, and report weighted
// summaries mapped back to world coordinates.
inline TrackResult track(const Matrix& y_window, const ssm::MultiModalSsm& model,
                         const inference::InferenceNets& nets,
                         const diffmath::ParamSet& store, Index k_particles, Rng& rng,
                         const PfOptions& opt = {}) {
  if (y_window.rows() < 2) throw ValidationError("track: window must have length >= 2");
  model.validate();
  ssm::ModelPredictor ctx(model);
  const Index t_len = y_window.rows();
  const Index s_dim = model.layout.state_dim();
  const Index l_codes = model.num_modes();
  const Index d = model.layout.spatial_dim;

  Matrix shifted = inference::canonicalize(y_window, 0.0);
  auto [mu, var] = inference::encode_initial(y_window, nets, store);
  Vector probs = inference::classify_code(y_window, nets, store,
                                          inference::AnglePolicy::fixed(0.0));

  ParticleSet p;
  p.states.resize(k_particles, s_dim);
  p.codes.resize(static_cast<std::size_t>(k_particles));
  p.weights = Vector::Constant(k_particles, 1.0 / static_cast<double>(k_particles));
  for (Index i = 0; i < k_particles; ++i) {
    // hard code draw from the classifier, then a reparameterized state draw
    double u = rng.uniform();
    double acc = 0.0;
    Index pick = l_codes - 1;
    for (Index j = 0; j < l_codes; ++j) {
      acc += probs(j);
      if (u < acc) {
        pick = j;
        break;
      }
    }
    p.codes[static_cast<std::size_t>(i)] = pick;
    Vector draw = rng.normal_matrix(s_dim, 1).col(0);
    p.states.row(i) = inference::sample_gaussian(mu, var, draw).transpose();
  }

  TrackResult res;
  res.mean_states.resize(t_len, s_dim);
  res.code_marginals = Matrix::Zero(t_len, l_codes);
  res.ess_trace.resize(t_len);

  auto record = [&](Index t) {
    Vector mean = Vector::Zero(s_dim);
    Vector marg = Vector::Zero(l_codes);
    for (Index i = 0; i < p.count(); ++i) {
      mean += p.weights(i) * p.states.row(i).transpose();
      marg(p.codes[static_cast<std::size_t>(i)]) += p.weights(i);
    }
    mean.head(d) += y_window.row(0).head(d).transpose();  // undo the shift
    res.mean_states.row(t) = mean.transpose();
    res.code_marginals.row(t) = marg.transpose();
    res.ess_trace(t) = ess(p.weights);
  };

  record(0);
  for (Index t = 1; t < t_len; ++t) {
    pf_step(p, shifted.row(t).transpose(), ctx, rng, opt);
    record(t);
  }
  for (Index i = 0; i < p.count(); ++i)
    p.states.row(i).head(d) += y_window.row(0).head(d);
  res.particles = std::move(p);
  return res;
}

}  // namespace infossm::filtering
