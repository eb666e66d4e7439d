#include "infossm/ssm.hpp"

#include "oracles.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace infossm;
using namespace infossm::ssm;

namespace {

// Mode whose posterior mean is exactly the affine map H x + b and whose
// predictive variance is negligible (tiny signal, posterior = prior).
gp::SparseGpMode affine_mode(const Matrix& h, const Vector& b, double proc_var,
                             Index p_dim) {
  gp::SparseGpMode m;
  Index q = h.rows();
  m.inducing_inputs = Matrix::Zero(2, p_dim);
  m.inducing_inputs.row(1).setConstant(1.0);
  m.kernel.signal_std = 1e-8;
  m.kernel.length_scales = Vector::Ones(p_dim);
  m.mean.h = h;
  m.mean.b = b;
  m.variational_mean =
      (m.inducing_inputs * h.transpose()).rowwise() + b.transpose();
  m.s_chol = 1e-9 * Matrix::Identity(2, 2);
  m.output_cov_diag = Vector::Ones(q);
  m.process_noise = Vector::Constant(q, proc_var);
  return m;
}

MultiModalSsm dubins_like_model(double dt, const std::vector<Matrix>& hs, double proc_var,
                                double obs_var) {
  MultiModalSsm model;
  model.layout = CanonicalLayout::make(2, 2);
  model.dt = dt;
  for (const auto& h : hs) model.modes.push_back(affine_mode(h, Vector::Zero(2), proc_var, 2));
  model.transition = ModeTransitionMatrix::identity(static_cast<Index>(hs.size()));
  model.obs = ObservationModel::positions(model.layout, Vector::Constant(2, obs_var));
  return model;
}

Matrix rot90() {
  Matrix h(2, 2);
  h << 0, -1, 1, 0;
  return h;
}

}  // namespace

TEST_CASE("canonical layout wiring") {
  CanonicalLayout l2 = CanonicalLayout::make(2, 2);
  REQUIRE(l2.state_dim() == 4);
  REQUIRE(l2.gp_input_indices() == std::vector<int>{2, 3});
  REQUIRE(l2.gp_output_indices() == std::vector<int>{2, 3});

  CanonicalLayout l3 = CanonicalLayout::make(3, 2);
  REQUIRE(l3.state_dim() == 6);
  REQUIRE(l3.gp_input_indices() == std::vector<int>{2, 3, 4, 5});
  REQUIRE(l3.gp_output_indices() == std::vector<int>{4, 5});

  CanonicalLayout l1 = CanonicalLayout::make(1, 3);
  REQUIRE(l1.gp_input_indices() == std::vector<int>{0, 1, 2});
  REQUIRE(l1.gp_output_indices() == std::vector<int>{0, 1, 2});

  REQUIRE_THROWS_AS(CanonicalLayout::make(4, 2), ValidationError);
}

TEST_CASE("code_step_distribution") {
  ModeTransitionMatrix ident = ModeTransitionMatrix::identity(3);
  Vector row = code_step_distribution(1, ident);
  REQUIRE(row(1) == 1.0);
  REQUIRE(row(0) == 0.0);

  ModeTransitionMatrix sticky = ModeTransitionMatrix::sticky(3, 0.9);
  sticky.validate();
  Vector r0 = code_step_distribution(0, sticky);
  REQUIRE(r0(0) == Catch::Approx(0.9));
  REQUIRE(r0(1) == Catch::Approx(0.05));
  REQUIRE(r0(2) == Catch::Approx(0.05));

  ModeTransitionMatrix uniform{Matrix::Constant(4, 4, 0.25)};
  Vector ru = code_step_distribution(2, uniform);
  REQUIRE((ru.array() == 0.25).all());

  REQUIRE_THROWS_AS(code_step_distribution(5, ident), IndexOutOfRange);
}

TEST_CASE("row-stochasticity preserved under the trainable parameterization") {
  diffmath::ParamSet store;
  std::vector<gp::SparseGpMode> inits = {affine_mode(Matrix::Zero(2, 2), Vector::Zero(2), 0.1, 2)};
  HybridSsm model = HybridSsm::create(store, CanonicalLayout::make(2, 2), 0.1, inits,
                                      Vector::Constant(2, 0.1),
                                      ModeTransitionMatrix::identity(1), true);
  // Perturb the logits arbitrarily; rows must stay stochastic.
  Rng rng(5);
  store.value(model.p_logits_id) += rng.normal_matrix(1, 1);
  ModeTransitionMatrix p = model.current_transition(store);
  for (Index i = 0; i < p.size(); ++i) REQUIRE(std::abs(p.p.row(i).sum() - 1.0) <= 1e-12);
  REQUIRE_NOTHROW(p.validate());
}

TEST_CASE("transition_moments: prior-mean chain step and hand Euler case") {
  SECTION("far-field GP with zero mean contributes nothing") {
    MultiModalSsm model = dubins_like_model(0.1, {Matrix::Zero(2, 2)}, 1e-30, 0.1);
    Vector x(4);
    x << 5.0, -3.0, 1.0, 2.0;
    GaussianState g = transition_moments(x, 0, model);
    Vector expect(4);
    expect << 5.0 + 0.1 * 1.0, -3.0 + 0.1 * 2.0, 1.0, 2.0;
    REQUIRE((g.mean - expect).cwiseAbs().maxCoeff() < 1e-9);
  }

  SECTION("Dubins layout hand step: g([1,0]) = [0,1]") {
    MultiModalSsm model = dubins_like_model(0.1, {rot90()}, 1e-30, 0.1);
    Vector x(4);
    x << 0, 0, 1, 0;
    GaussianState g = transition_moments(x, 0, model);
    Vector expect(4);
    expect << 0.1, 0.0, 1.0, 0.1;
    REQUIRE((g.mean - expect).cwiseAbs().maxCoeff() < 1e-7);
  }

  SECTION("covariance scales as dt^2") {
    Rng rng(11);
    gp::SparseGpMode mode = affine_mode(rot90(), Vector::Zero(2), 0.05, 2);
    mode.kernel.signal_std = 0.7;  // non-trivial predictive variance
    MultiModalSsm m1;
    m1.layout = CanonicalLayout::make(2, 2);
    m1.dt = 0.1;
    m1.modes = {mode};
    m1.transition = ModeTransitionMatrix::identity(1);
    m1.obs = ObservationModel::positions(m1.layout, Vector::Constant(2, 0.1));
    MultiModalSsm m2 = m1;
    m2.dt = 0.05;
    Vector x = rng.normal_matrix(4, 1).col(0);
    GaussianState g1 = transition_moments(x, 0, m1);
    GaussianState g2 = transition_moments(x, 0, m2);
    Vector v1 = g1.var_diag.segment(2, 2);
    Vector v2 = g2.var_diag.segment(2, 2);
    REQUIRE((v1 - 4.0 * v2).cwiseAbs().maxCoeff() < 1e-12);
    // chain slots carry zero covariance
    REQUIRE(g1.var_diag.head(2).cwiseAbs().maxCoeff() == 0.0);
  }

  MultiModalSsm model = dubins_like_model(0.1, {rot90()}, 1e-30, 0.1);
  Vector x(4);
  x << 0, 0, 1, 0;
  REQUIRE_THROWS_AS(transition_moments(x, 3, model), IndexOutOfRange);
}

TEST_CASE("L=1 transition reduces bitwise to the single-GP propagation") {
  Rng rng(13);
  gp::SparseGpMode mode = affine_mode(rot90(), Vector::Zero(2), 0.05, 2);
  mode.kernel.signal_std = 0.9;
  MultiModalSsm model;
  model.layout = CanonicalLayout::make(2, 2);
  model.dt = 0.1;
  model.modes = {mode};
  model.transition = ModeTransitionMatrix::identity(1);
  model.obs = ObservationModel::positions(model.layout, Vector::Constant(2, 0.1));

  ModelPredictor pred(model);
  gp::GpPredictor single(mode);
  for (int trial = 0; trial < 10; ++trial) {
    Vector x = rng.normal_matrix(4, 1).col(0);
    GaussianState g = pred.transition_moments(x, 0);
    // PRSSM-style reference: same formulas with the lone GP.
    auto [gm, gv] = single.moments(x.segment(2, 2));
    Vector mean_ref = x;
    mean_ref.segment(0, 2) += model.dt * x.segment(2, 2);
    mean_ref.segment(2, 2) += model.dt * gm;
    Vector var_ref = Vector::Zero(4);
    var_ref.segment(2, 2) =
        model.dt * model.dt * (gv * mode.output_cov_diag + mode.process_noise);
    REQUIRE((g.mean - mean_ref).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((g.var_diag - var_ref).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("generate_trajectory: fixed point, Markov restart, noise statistics") {
  SECTION("zero-GP order-1 model holds y constant") {
    MultiModalSsm model;
    model.layout = CanonicalLayout::make(1, 2);
    model.dt = 0.1;
    model.modes = {affine_mode(Matrix::Zero(2, 2), Vector::Zero(2), 1e-30, 2)};
    model.transition = ModeTransitionMatrix::identity(1);
    model.obs = ObservationModel::positions(model.layout, Vector::Constant(2, 1e-30));
    Rng rng(17);
    Vector x1(2);
    x1 << 0.4, -0.2;
    std::vector<Index> codes(19, 0);
    Matrix y = generate_trajectory(x1, codes, model, 20, rng);
    for (Index t = 0; t < 20; ++t)
      REQUIRE((y.row(t).transpose() - x1).cwiseAbs().maxCoeff() < 1e-7);
  }

  SECTION("restarting from (x_t, c_t) with the same draw stream reproduces the suffix") {
    MultiModalSsm model = dubins_like_model(0.1, {rot90()}, 0.05, 0.1);
    ModelPredictor pred(model);
    Vector x1(4);
    x1 << 0, 0, 1, 0;
    const Index t_len = 12;
    std::vector<Index> codes(t_len - 1, 0);

    Rng rng_a(23);
    Matrix states = pred.rollout_states(x1, codes, t_len, rng_a);

    // Replay: burn the draws of the first 5 steps, then continue from x_6.
    Rng rng_b(23);
    for (int burn = 0; burn < 5; ++burn) rng_b.normal_matrix(4, 1);
    const Index split = 5;
    std::vector<Index> suffix_codes(t_len - 1 - split, 0);
    Matrix suffix = pred.rollout_states(states.row(split).transpose(), suffix_codes,
                                        t_len - split, rng_b);
    REQUIRE((suffix - states.bottomRows(t_len - split)).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("observation noise statistics match the configured variance") {
    // Deterministic states (order-1 zero-GP), so y - Cx is exactly the noise.
    MultiModalSsm model;
    model.layout = CanonicalLayout::make(1, 2);
    model.dt = 0.1;
    model.modes = {affine_mode(Matrix::Zero(2, 2), Vector::Zero(2), 1e-30, 2)};
    model.transition = ModeTransitionMatrix::identity(1);
    const double var = 0.1;
    model.obs = ObservationModel::positions(model.layout, Vector::Constant(2, var));
    Rng rng(29);
    Vector x1 = Vector::Zero(2);
    std::vector<Index> codes(1, 0);
    const int n = 10000;
    Vector sq_sum = Vector::Zero(2);
    for (int i = 0; i < n; ++i) {
      Matrix y = generate_trajectory(x1, codes, model, 2, rng);
      sq_sum += y.row(0).transpose().cwiseAbs2();
    }
    for (Index d = 0; d < 2; ++d) {
      double emp = sq_sum(d) / n;
      REQUIRE(std::abs(emp - var) <= 3.0 * var * std::sqrt(2.0 / n));
    }
  }
}

TEST_CASE("observation_log_likelihood hand values") {
  CanonicalLayout layout = CanonicalLayout::make(2, 2);
  ObservationModel obs = ObservationModel::positions(layout, Vector::Ones(2));
  Vector x(4);
  x << 1.0, 2.0, 0.3, 0.4;
  Vector y_at_mean(2);
  y_at_mean << 1.0, 2.0;
  REQUIRE(observation_log_likelihood(y_at_mean, x, obs) ==
          Catch::Approx(-std::log(2.0 * M_PI)).epsilon(1e-10));

  Vector y_off(2);
  y_off << 2.0, 2.0;  // residual [1, 0]
  REQUIRE(observation_log_likelihood(y_off, x, obs) ==
          Catch::Approx(-std::log(2.0 * M_PI) - 0.5).epsilon(1e-10));

  // Larger noise always lowers the density at the mean.
  ObservationModel wide = ObservationModel::positions(layout, Vector::Constant(2, 4.0));
  REQUIRE(observation_log_likelihood(y_at_mean, x, wide) <
          observation_log_likelihood(y_at_mean, x, obs));

  Vector bad(3);
  REQUIRE_THROWS_AS(observation_log_likelihood(bad, x, obs), DimensionMismatch);
}

TEST_CASE("degenerate affine mode reproduces a linear-Gaussian SSM oracle") {
  // Order-1, 1-D: x' = (1 + dt h) x + dt b + dt eps, y = x + nu.
  const double h = -0.4, b = 0.25, dt = 0.1, proc_var = 0.04, obs_var = 0.02;
  MultiModalSsm model;
  model.layout = CanonicalLayout::make(1, 1);
  model.dt = dt;
  model.modes = {affine_mode(Matrix::Constant(1, 1, h), Vector::Constant(1, b), proc_var, 1)};
  model.transition = ModeTransitionMatrix::identity(1);
  model.obs = ObservationModel::positions(model.layout, Vector::Constant(1, obs_var));

  const Index t_len = 15;
  const int n_mc = 4000;
  Rng rng(31);
  Vector x1 = Vector::Constant(1, 1.0);
  std::vector<Index> codes(t_len - 1, 0);
  Matrix ys(n_mc, t_len);
  for (int i = 0; i < n_mc; ++i) {
    Matrix y = generate_trajectory(x1, codes, model, t_len, rng);
    ys.row(i) = y.col(0).transpose();
  }

  // Hand LGSSM marginals.
  double a_lin = 1.0 + dt * h;
  double bias = dt * b;
  double q_lin = dt * dt * proc_var;
  double mean = 1.0, var = 0.0;
  for (Index t = 0; t < t_len; ++t) {
    double y_mean = mean;
    double y_var = var + obs_var;
    double emp_mean = ys.col(t).mean();
    double emp_var = (ys.col(t).array() - emp_mean).square().sum() / (n_mc - 1);
    double se_mean = std::sqrt(y_var / n_mc);
    double se_var = y_var * std::sqrt(2.0 / n_mc);
    REQUIRE(std::abs(emp_mean - y_mean) <= 3.5 * se_mean);
    REQUIRE(std::abs(emp_var - y_var) <= 3.5 * se_var);
    mean = a_lin * mean + bias;
    var = a_lin * a_lin * var + q_lin;
  }
}

TEST_CASE("tape rollout step matches the plain step on hard one-hot weights") {
  Rng rng(37);
  diffmath::ParamSet store;
  gp::SparseGpMode m0 = affine_mode(rot90(), Vector::Zero(2), 0.05, 2);
  m0.kernel.signal_std = 0.8;
  gp::SparseGpMode m1 = affine_mode(-rot90(), Vector::Zero(2), 0.03, 2);
  m1.kernel.signal_std = 0.6;
  HybridSsm hs = HybridSsm::create(store, CanonicalLayout::make(2, 2), 0.1, {m0, m1},
                                   Vector::Constant(2, 0.1),
                                   ModeTransitionMatrix::identity(2));
  MultiModalSsm plain = hs.snapshot(store);
  ModelPredictor pred(plain);

  const Index b_rows = 4;
  Matrix x = rng.normal_matrix(b_rows, 4);
  Matrix xi_f = rng.normal_matrix(b_rows, 2);
  Matrix xi_r = rng.normal_matrix(b_rows, 2);
  Matrix w = Matrix::Zero(b_rows, 2);
  std::vector<Index> codes = {0, 1, 1, 0};
  for (Index i = 0; i < b_rows; ++i) w(i, codes[static_cast<std::size_t>(i)]) = 1.0;

  diffmath::Tape tape;
  std::vector<diffmath::Value> leaves = store.leaves_on(tape);
  SsmOnTape st = ssm_on_tape(hs, tape, leaves);
  diffmath::Value next = step_on_tape(st, tape.constant(x), tape.constant(w),
                                      tape.constant(xi_f), tape.constant(xi_r));
  for (Index i = 0; i < b_rows; ++i) {
    Vector ref = pred.step_with_draws(x.row(i).transpose(), codes[static_cast<std::size_t>(i)],
                                      xi_f.row(i).transpose(), xi_r.row(i).transpose());
    REQUIRE((next.data().row(i).transpose() - ref).cwiseAbs().maxCoeff() < 1e-12);
  }

  // Observation log-likelihood agrees across paths too.
  Matrix y = rng.normal_matrix(b_rows, 2);
  diffmath::Value ll =
      obs_loglik_on_tape(st, tape.constant(x), tape.constant(y));
  for (Index i = 0; i < b_rows; ++i) {
    double ref =
        observation_log_likelihood(y.row(i).transpose(), x.row(i).transpose(), plain.obs);
    REQUIRE(ll.data()(i, 0) == Catch::Approx(ref).epsilon(1e-12));
  }
}

TEST_CASE("sample_code_path follows the chain and stays constant under identity P") {
  Rng rng(41);
  ModeTransitionMatrix ident = ModeTransitionMatrix::identity(3);
  std::vector<Index> codes = sample_code_path(2, ident, 20, rng);
  REQUIRE(codes.size() == 19);
  for (Index c : codes) REQUIRE(c == 2);

  // Sticky chain: empirical stay-rate near 0.9.
  ModeTransitionMatrix sticky = ModeTransitionMatrix::sticky(3, 0.9);
  int stay = 0, total = 0;
  for (int rep = 0; rep < 400; ++rep) {
    std::vector<Index> path = sample_code_path(rep % 3, sticky, 21, rng);
    for (std::size_t t = 1; t < path.size(); ++t) {
      ++total;
      if (path[t] == path[t - 1]) ++stay;
    }
  }
  double rate = static_cast<double>(stay) / total;
  REQUIRE(std::abs(rate - 0.9) < 3.0 * std::sqrt(0.9 * 0.1 / total));
}
