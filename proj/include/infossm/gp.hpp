#pragma once

// Sparse matrix-variate Gaussian process experts: SE-ARD kernel, affine mean,
// variational posterior prediction, reparameterized function sampling, and the
// closed-form matrix-normal KL against the inducing prior.
//
// Two evaluation paths share the same formulas:
//   * plain Eigen (no tape) for rollouts, filtering and evaluation, and
//   * tape-recorded for training, with all hyperparameters differentiable.

#include "infossm/core.hpp"
#include "infossm/diffmath.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace infossm::gp {

using diffmath::ParamSet;
using diffmath::Tape;
using diffmath::Value;

// ---------------------------------------------------------------------------
// Plain types
// ---------------------------------------------------------------------------

struct KernelHyper {
  double signal_std = 1.0;     // sigma_f
  Vector length_scales;       // lambda_p, length P, all > 0
};

struct AffineMean {
  Matrix h;  // Q x P
  Vector b;  // Q
};

// One expert: inducing posterior q(U) = MN(A, S, Sigma) against the prior
// MN(m(Z), K_ZZ, Sigma), plus per-output process-noise variances.
struct SparseGpMode {
  Matrix inducing_inputs;   // Z: M x P
  Matrix variational_mean;  // A: M x Q
  Matrix s_chol;            // lower-triangular factor C with S = C C^T: M x M
  Vector output_cov_diag;   // Sigma diagonal: Q, > 0
  Vector process_noise;     // R: Q variances (epsilon_f), > 0
  KernelHyper kernel;
  AffineMean mean;

  Index m() const { return inducing_inputs.rows(); }
  Index p() const { return inducing_inputs.cols(); }
  Index q() const { return variational_mean.cols(); }

  void validate() const {
    if (m() < 1) throw ValidationError("SparseGpMode: need at least one inducing point");
    if (variational_mean.rows() != m() || s_chol.rows() != m() || s_chol.cols() != m())
      throw ShapeMismatch("SparseGpMode: inconsistent inducing shapes");
    if (kernel.length_scales.size() != p())
      throw ShapeMismatch("SparseGpMode: length-scale count differs from input dim");
    if (mean.h.rows() != q() || mean.h.cols() != p() || mean.b.size() != q())
      throw ShapeMismatch("SparseGpMode: affine mean shapes inconsistent");
    if (output_cov_diag.size() != q() || process_noise.size() != q())
      throw ShapeMismatch("SparseGpMode: output covariance shapes inconsistent");
    if ((output_cov_diag.array() <= 0.0).any() || (process_noise.array() <= 0.0).any() ||
        kernel.signal_std <= 0.0 || (kernel.length_scales.array() <= 0.0).any())
      throw ValidationError("SparseGpMode: scale parameters must be positive");
    for (Index i = 0; i < m(); ++i)
      for (Index j = i + 1; j < m(); ++j)
        if ((inducing_inputs.row(i) - inducing_inputs.row(j)).norm() == 0.0)
          throw ValidationError("SparseGpMode: inducing inputs must be distinct");
  }
};

// Counter for predictive variances clamped at zero (round-off).
inline std::uint64_t& variance_clamp_count() {
  thread_local std::uint64_t count = 0;
  return count;
}

// ---------------------------------------------------------------------------
// Kernel and mean, plain path
// ---------------------------------------------------------------------------

inline double se_ard_kernel(const Vector& x, const Vector& xp, const KernelHyper& k) {
  if (x.size() != xp.size() || x.size() != k.length_scales.size())
    throw DimensionMismatch("se_ard_kernel: dimension mismatch");
  double d2 = ((x - xp).array() / k.length_scales.array()).square().sum();
  return k.signal_std * k.signal_std * std::exp(-0.5 * d2);
}

inline Vector affine_mean(const Vector& x, const AffineMean& m) {
  if (m.h.cols() != x.size()) throw DimensionMismatch("affine_mean: dimension mismatch");
  return m.h * x + m.b;
}

// Kernel block between row sets X (B x P) and Z (M x P).
inline Matrix se_ard_cross(const Matrix& x, const Matrix& z, const KernelHyper& k) {
  if (x.cols() != z.cols() || x.cols() != k.length_scales.size())
    throw DimensionMismatch("se_ard_cross: dimension mismatch");
  Matrix xs = x.array().rowwise() / k.length_scales.transpose().array();
  Matrix zs = z.array().rowwise() / k.length_scales.transpose().array();
  Vector xx = xs.rowwise().squaredNorm();
  Vector zz = zs.rowwise().squaredNorm();
  Matrix d2 = (-2.0 * xs * zs.transpose()).colwise() + xx;
  d2.rowwise() += zz.transpose();
  d2 = d2.cwiseMax(0.0);
  return (k.signal_std * k.signal_std) * (-0.5 * d2.array()).exp().matrix();
}

// Lower Cholesky factor with the jitter ladder used throughout: plain attempt
// first, then 1e-6 and 1e-4 of the mean diagonal.
inline Matrix cholesky_with_jitter(const Matrix& a) {
  Matrix l;
  if (diffmath::detail::try_llt(a, l)) return l;
  double mean_diag = a.diagonal().mean();
  Matrix work = a;
  work.diagonal().array() += 1e-6 * mean_diag;
  if (diffmath::detail::try_llt(work, l)) return l;
  work = a;
  work.diagonal().array() += 1e-4 * mean_diag;
  if (diffmath::detail::try_llt(work, l)) return l;
  throw NotPositiveDefinite("cholesky_with_jitter: matrix not positive definite after jitter");
}

// ---------------------------------------------------------------------------
// Plain predictor (precomputes factorizations once per parameter snapshot)
// ---------------------------------------------------------------------------

class GpPredictor {
public:
  explicit GpPredictor(SparseGpMode mode) : mode_(std::move(mode)) {
    mode_.validate();
    Matrix kzz = se_ard_cross(mode_.inducing_inputs, mode_.inducing_inputs, mode_.kernel);
    lkzz_ = cholesky_with_jitter(kzz);
    Matrix mz = (mode_.inducing_inputs * mode_.mean.h.transpose()).rowwise() +
                mode_.mean.b.transpose();
    Matrix d = mode_.variational_mean - mz;
    alpha_ = lkzz_.transpose().triangularView<Eigen::Upper>().solve(
        lkzz_.triangularView<Eigen::Lower>().solve(d));
    sqrt_sigma_ = mode_.output_cov_diag.cwiseSqrt();
  }

  const SparseGpMode& mode() const { return mode_; }
  const Matrix& kzz_chol() const { return lkzz_; }

  // Posterior mean r~ (B x Q) and scalar variance factor v~ (B) for a batch of
  // inputs; full predictive covariance of f-hat is v~ * Sigma.
  void moments_batch(const Matrix& x, Matrix& mean, Vector& var) const {
    if (x.cols() != mode_.p()) throw DimensionMismatch("GpPredictor: input dimension mismatch");
    Matrix kxz = se_ard_cross(x, mode_.inducing_inputs, mode_.kernel);
    mean = (x * mode_.mean.h.transpose()).rowwise() + mode_.mean.b.transpose();
    mean += kxz * alpha_;
    Matrix w = lkzz_.triangularView<Eigen::Lower>().solve(kxz.transpose());  // M x B
    Matrix ainv = lkzz_.transpose().triangularView<Eigen::Upper>().solve(w);  // K^{-1} k_Zx
    Matrix v2 = mode_.s_chol.transpose() * ainv;
    double sf2 = mode_.kernel.signal_std * mode_.kernel.signal_std;
    var = Vector::Constant(x.rows(), sf2) - w.colwise().squaredNorm().transpose() +
          v2.colwise().squaredNorm().transpose();
    for (Index i = 0; i < var.size(); ++i) {
      if (var(i) < 0.0) {
        ++variance_clamp_count();
        var(i) = 0.0;
      }
    }
  }

  std::pair<Vector, double> moments(const Vector& x) const {
    Matrix mean;
    Vector var;
    moments_batch(x.transpose(), mean, var);
    return {mean.row(0).transpose(), var(0)};
  }

  // Reparameterized draw: r~(x) + sqrt(v~(x)) * chol(Sigma) * draw.
  Vector sample_function_value(const Vector& x, const Vector& draw) const {
    if (draw.size() != mode_.q())
      throw DimensionMismatch("sample_function_value: draw dimension mismatch");
    auto [mean, var] = moments(x);
    return mean + std::sqrt(var) * sqrt_sigma_.cwiseProduct(draw);
  }

private:
  SparseGpMode mode_;
  Matrix lkzz_;
  Matrix alpha_;
  Vector sqrt_sigma_;
};

inline std::pair<Vector, double> predict_moments(const Vector& x, const SparseGpMode& mode) {
  return GpPredictor(mode).moments(x);
}

inline Vector sample_function_value(const Vector& x, const SparseGpMode& mode,
                                    const Vector& draw) {
  return GpPredictor(mode).sample_function_value(x, draw);
}

// KL( q(U) || p(U) ) for matrix-normal q = MN(A, S, Sigma) and
// p = MN(m(Z), K_ZZ, Sigma):
//   1/2 [ Q tr(K^{-1} S) + tr(Sigma^{-1} (A-m)^T K^{-1} (A-m)) - MQ
//         + Q ln(det K / det S) ]
inline double matrix_normal_kl(const SparseGpMode& mode) {
  mode.validate();
  Matrix kzz = se_ard_cross(mode.inducing_inputs, mode.inducing_inputs, mode.kernel);
  Matrix l = cholesky_with_jitter(kzz);
  Matrix mz =
      (mode.inducing_inputs * mode.mean.h.transpose()).rowwise() + mode.mean.b.transpose();
  Matrix d = mode.variational_mean - mz;
  Matrix v = l.triangularView<Eigen::Lower>().solve(d);
  double mean_term =
      (v.array().square().rowwise() * mode.output_cov_diag.transpose().array().inverse()).sum();
  Matrix w = l.triangularView<Eigen::Lower>().solve(mode.s_chol);
  double trace_term = w.array().square().sum();
  double logdet_k = 2.0 * l.diagonal().array().log().sum();
  double logdet_s = 2.0 * mode.s_chol.diagonal().array().log().sum();
  double mq = static_cast<double>(mode.m() * mode.q());
  double qd = static_cast<double>(mode.q());
  return 0.5 * (qd * trace_term + mean_term - mq + qd * (logdet_k - logdet_s));
}

// ---------------------------------------------------------------------------
// Trainable parameter block and tape path
// ---------------------------------------------------------------------------

// Handles of one expert's parameters inside a ParamSet. Positive quantities
// are stored as logs; S is stored as a free matrix whose strict lower triangle
// plus exponentiated diagonal forms the Cholesky factor of S.
struct GpModeParams {
  Index m = 0, p = 0, q = 0;
  int z_id = -1, a_id = -1, s_raw_id = -1, log_sigma_id = -1, log_r_id = -1;
  int log_sf_id = -1, log_lambda_id = -1, h_id = -1, b_id = -1;

  static GpModeParams create(ParamSet& store, const std::string& prefix,
                             const SparseGpMode& init) {
    init.validate();
    GpModeParams out;
    out.m = init.m();
    out.p = init.p();
    out.q = init.q();
    Matrix s_raw = init.s_chol.triangularView<Eigen::StrictlyLower>();
    s_raw.diagonal() = init.s_chol.diagonal().array().log();
    out.z_id = store.add(prefix + ".Z", init.inducing_inputs);
    out.a_id = store.add(prefix + ".A", init.variational_mean);
    out.s_raw_id = store.add(prefix + ".S_raw", s_raw);
    out.log_sigma_id =
        store.add(prefix + ".log_Sigma", init.output_cov_diag.array().log().transpose());
    out.log_r_id = store.add(prefix + ".log_R", init.process_noise.array().log().transpose());
    Matrix log_sf(1, 1);
    log_sf(0, 0) = std::log(init.kernel.signal_std);
    out.log_sf_id = store.add(prefix + ".log_sf", log_sf);
    out.log_lambda_id =
        store.add(prefix + ".log_lambda", init.kernel.length_scales.array().log().transpose());
    out.h_id = store.add(prefix + ".H", init.mean.h);
    out.b_id = store.add(prefix + ".b", init.mean.b.transpose());
    return out;
  }

  SparseGpMode snapshot(const ParamSet& store) const {
    SparseGpMode out;
    out.inducing_inputs = store.value(z_id);
    out.variational_mean = store.value(a_id);
    const Matrix& s_raw = store.value(s_raw_id);
    out.s_chol = s_raw.triangularView<Eigen::StrictlyLower>();
    out.s_chol.diagonal() = s_raw.diagonal().array().exp();
    out.output_cov_diag = store.value(log_sigma_id).row(0).array().exp().transpose();
    out.process_noise = store.value(log_r_id).row(0).array().exp().transpose();
    out.kernel.signal_std = std::exp(store.value(log_sf_id)(0, 0));
    out.kernel.length_scales = store.value(log_lambda_id).row(0).array().exp().transpose();
    out.mean.h = store.value(h_id);
    out.mean.b = store.value(b_id).row(0).transpose();
    return out;
  }
};

// Per-evaluation bundle: leaf views plus quantities hoisted out of the
// time-step loop (kernel factorization, regression weights, KL).
struct GpModeOnTape {
  Index m = 0, p = 0, q = 0;
  Value z;            // M x P
  Value a;            // M x Q
  Value s_chol;       // M x M lower factor of S
  Value sigma;        // 1 x Q
  Value sqrt_sigma;   // 1 x Q
  Value proc_var;     // 1 x Q
  Value sqrt_proc;    // 1 x Q
  Value inv_lambda;   // 1 x P
  Value log_sf2;      // 1 x 1
  Value sf2;          // 1 x 1
  Value h;            // Q x P
  Value b;            // 1 x Q
  Value lkzz;         // M x M
  Value alpha;        // M x Q, K^{-1}(A - m(Z))
  Value kl;           // 1 x 1
};

namespace detail {

// SE-ARD block between row sets; shares inv_lambda/log_sf2 nodes.
inline Value kernel_cross_on_tape(const Value& x, const Value& z, const Value& inv_lambda,
                                  const Value& log_sf2) {
  using namespace diffmath;
  Value xs = mul_rowvec(x, inv_lambda);
  Value zs = mul_rowvec(z, inv_lambda);
  Value xx = rowwise_sum(square(xs));
  Value zz = rowwise_sum(square(zs));
  Value cross = matmul(xs, transpose(zs));
  Value d2 = clamp_min(add_colvec(add_rowvec(scale(cross, -2.0), transpose(zz)), xx), 0.0);
  return exp(add_scalar(scale(d2, -0.5), log_sf2));
}

}  // namespace detail

inline GpModeOnTape mode_on_tape(const GpModeParams& ids, const std::vector<Value>& leaves) {
  using namespace diffmath;
  GpModeOnTape t;
  t.m = ids.m;
  t.p = ids.p;
  t.q = ids.q;
  t.z = leaves[static_cast<std::size_t>(ids.z_id)];
  t.a = leaves[static_cast<std::size_t>(ids.a_id)];
  Value s_raw = leaves[static_cast<std::size_t>(ids.s_raw_id)];
  t.s_chol = add(tril_strict(s_raw), diag_mat(exp(diag_part(s_raw))));
  Value log_sigma = leaves[static_cast<std::size_t>(ids.log_sigma_id)];
  t.sigma = exp(log_sigma);
  t.sqrt_sigma = exp(scale(log_sigma, 0.5));
  Value log_r = leaves[static_cast<std::size_t>(ids.log_r_id)];
  t.proc_var = exp(log_r);
  t.sqrt_proc = exp(scale(log_r, 0.5));
  Value log_sf = leaves[static_cast<std::size_t>(ids.log_sf_id)];
  t.log_sf2 = scale(log_sf, 2.0);
  t.sf2 = exp(t.log_sf2);
  t.inv_lambda = exp(neg(leaves[static_cast<std::size_t>(ids.log_lambda_id)]));
  t.h = leaves[static_cast<std::size_t>(ids.h_id)];
  t.b = leaves[static_cast<std::size_t>(ids.b_id)];

  Value kzz = detail::kernel_cross_on_tape(t.z, t.z, t.inv_lambda, t.log_sf2);
  t.lkzz = cholesky(kzz);
  Value mean_z = add_rowvec(matmul(t.z, transpose(t.h)), t.b);
  Value d = sub(t.a, mean_z);
  t.alpha = cholesky_solve(t.lkzz, d);

  // KL(q(U) || p(U)), closed form.
  Value v = tri_solve(t.lkzz, d, false);
  Value inv_sigma = exp(neg(log_sigma));
  Value mean_term = sum(mul_rowvec(square(v), inv_sigma));
  Value w = tri_solve(t.lkzz, t.s_chol, false);
  Value trace_term = sum(square(w));
  Value logdet_k = scale(sum(log(diag_part(t.lkzz))), 2.0);
  Value logdet_s = scale(sum(diag_part(s_raw)), 2.0);
  double mq = static_cast<double>(ids.m * ids.q);
  double qd = static_cast<double>(ids.q);
  t.kl = scale(add(add(scale(trace_term, qd), mean_term),
                   add_const(scale(sub(logdet_k, logdet_s), qd), -mq)),
               0.5);
  return t;
}

struct GpPredictOnTape {
  Value mean;  // B x Q
  Value var;   // B x 1, clamped at zero
};

inline GpPredictOnTape predict_on_tape(const GpModeOnTape& m, const Value& x) {
  using namespace diffmath;
  if (x.cols() != m.p) throw DimensionMismatch("predict_on_tape: input dimension mismatch");
  Value kxz = detail::kernel_cross_on_tape(x, m.z, m.inv_lambda, m.log_sf2);
  Value mean = add(add_rowvec(matmul(x, transpose(m.h)), m.b), matmul(kxz, m.alpha));
  Value w = tri_solve(m.lkzz, transpose(kxz), false);
  Value t1 = transpose(colwise_sum(square(w)));
  Value kinv_kzx = tri_solve(m.lkzz, w, true);
  Value v2 = matmul(transpose(m.s_chol), kinv_kzx);
  Value t2 = transpose(colwise_sum(square(v2)));
  Value var_raw = add_scalar(sub(t2, t1), m.sf2);
  for (Index i = 0; i < var_raw.rows(); ++i)
    if (var_raw.data()(i, 0) < 0.0) ++variance_clamp_count();
  return {mean, clamp_min(var_raw, 0.0)};
}

// Reparameterized function draw for a batch: mean + sqrt(var) .* (draw * sqrt(Sigma)).
inline Value sample_on_tape(const GpModeOnTape& m, const GpPredictOnTape& pred,
                            const Value& draw) {
  using namespace diffmath;
  return add(pred.mean, mul_colvec(mul_rowvec(draw, m.sqrt_sigma), sqrt_guarded(pred.var)));
}

}  // namespace infossm::gp
