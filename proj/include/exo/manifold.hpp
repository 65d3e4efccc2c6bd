#pragma once

// Riemannian steepest descent on the Stiefel manifold St(d, k) = {W : W'W = I}.
//
// The solver only needs objective values: the Euclidean gradient is formed by
// central finite differences over the matrix entries, projected onto the
// tangent space at W, and a step is taken along the negative Riemannian
// gradient with Armijo backtracking and a QR retraction. The first trial step
// of each iteration is the Barzilai-Borwein length from the previous move.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace exo {

using Objective = std::function<double(const Eigen::MatrixXd&)>;

/// ||W'W - I||_F
inline double orthonormality_residual(const Eigen::MatrixXd& w) {
  return (w.transpose() * w - Eigen::MatrixXd::Identity(w.cols(), w.cols())).norm();
}

/// A d x k matrix with orthonormal columns.
class StiefelPoint {
 public:
  static constexpr double kTolerance = 1e-8;

  StiefelPoint() = default;
  explicit StiefelPoint(Eigen::MatrixXd w) : w_(std::move(w)) {
    if (orthonormality_residual(w_) >= kTolerance)
      throw std::invalid_argument("StiefelPoint: columns are not orthonormal");
  }

  const Eigen::MatrixXd& matrix() const { return w_; }
  Eigen::Index ambient_dim() const { return w_.rows(); }
  Eigen::Index dim() const { return w_.cols(); }

 private:
  Eigen::MatrixXd w_;
};

struct SolverOptions {
  int max_iters = 500;
  double grad_tol = 1e-6;
  /// First trial step of the first iteration; later ones start from the
  /// Barzilai-Borwein length clamped to [1e-6, 1e3] * step_init.
  double step_init = 1.0;
  double armijo_c = 1e-4;
  double armijo_shrink = 0.5;
  double fd_step = 1e-5;
  int restarts = 5;
  std::uint64_t seed = 0;
  /// Backtracking halts after this many shrinks; the iterate is then stationary
  /// to working precision.
  int max_backtracks = 60;

  void validate() const {
    if (max_iters <= 0 || restarts <= 0 || max_backtracks <= 0)
      throw std::invalid_argument("SolverOptions: iteration counts must be positive");
    if (!(grad_tol > 0.0) || !(step_init > 0.0) || !(fd_step > 0.0))
      throw std::invalid_argument("SolverOptions: tolerances and steps must be positive");
    if (!(armijo_c > 0.0 && armijo_c < 1.0) || !(armijo_shrink > 0.0 && armijo_shrink < 1.0))
      throw std::invalid_argument("SolverOptions: Armijo parameters must lie in (0, 1)");
  }
};

struct SolveReport {
  StiefelPoint W_star;
  double f_star = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

/// Called once per accepted iterate: (restart, iteration, W, f(W)).
using IterationObserver = std::function<void(int, int, const Eigen::MatrixXd&, double)>;

/// xi = G - W sym(W'G)
inline Eigen::MatrixXd project_tangent(const Eigen::MatrixXd& w, const Eigen::MatrixXd& g) {
  if (w.rows() != g.rows() || w.cols() != g.cols())
    throw std::invalid_argument("project_tangent: dimension mismatch");
  const Eigen::MatrixXd wtg = w.transpose() * g;
  return g - w * (0.5 * (wtg + wtg.transpose()));
}

/// Q factor of W + xi with the diagonal of R made positive.
inline Eigen::MatrixXd retract_qr(const Eigen::MatrixXd& w, const Eigen::MatrixXd& xi) {
  if (w.rows() != xi.rows() || w.cols() != xi.cols())
    throw std::invalid_argument("retract_qr: dimension mismatch");
  const Eigen::Index d = w.rows(), k = w.cols();
  if (k == 0) return w;
  const Eigen::MatrixXd y = w + xi;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(y);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, k);
  const Eigen::MatrixXd& r = qr.matrixQR();
  const double scale = std::max(y.norm(), 1.0);
  for (Eigen::Index j = 0; j < k; ++j) {
    if (std::abs(r(j, j)) <= 1e-12 * scale)
      throw std::runtime_error("retract_qr: W + xi is rank deficient");
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return q;
}

/// Uniformly distributed point on St(d, k): Q factor of a Gaussian matrix.
template <class Rng>
Eigen::MatrixXd random_stiefel(Eigen::Index d, Eigen::Index k, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(d, k);
  for (Eigen::Index j = 0; j < k; ++j)
    for (Eigen::Index i = 0; i < d; ++i) g(i, j) = normal(rng);
  return retract_qr(Eigen::MatrixXd::Zero(d, k), g);
}

/// Central-difference Euclidean gradient over all d*k entries.
inline Eigen::MatrixXd fd_gradient(const Objective& f, const Eigen::MatrixXd& w, double h) {
  Eigen::MatrixXd g(w.rows(), w.cols());
  Eigen::MatrixXd probe = w;
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      const double orig = probe(i, j);
      probe(i, j) = orig + h;
      const double fp = f(probe);
      probe(i, j) = orig - h;
      const double fm = f(probe);
      probe(i, j) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("fd_gradient: objective is not finite near the current point");
      g(i, j) = (fp - fm) / (2.0 * h);
    }
  }
  return g;
}

namespace detail {

inline std::string describe(const Eigen::MatrixXd& w) {
  std::ostringstream os;
  os.precision(17);
  os << w;
  return os.str();
}

inline double checked_eval(const Objective& f, const Eigen::MatrixXd& w) {
  const double v = f(w);
  if (!std::isfinite(v))
    throw std::runtime_error("objective is not finite at feasible point W =\n" + describe(w));
  return v;
}

struct DescentRun {
  Eigen::MatrixXd w;
  double f = 0.0;
  int iterations = 0;
  bool converged = false;
};

inline DescentRun descend(const Objective& f, Eigen::MatrixXd w, const SolverOptions& opts,
                          int restart, const IterationObserver& observer) {
  DescentRun run;
  double fw = checked_eval(f, w);
  if (observer) observer(restart, 0, w, fw);
  Eigen::MatrixXd prev_w, prev_xi;
  for (int it = 0; it < opts.max_iters; ++it) {
    const Eigen::MatrixXd xi = project_tangent(w, fd_gradient(f, w, opts.fd_step));
    const double gnorm2 = xi.squaredNorm();
    if (std::sqrt(gnorm2) < opts.grad_tol) {
      run.converged = true;
      break;
    }
    // First trial step: Barzilai-Borwein from the last move, else step_init.
    double t = opts.step_init;
    if (it > 0) {
      const Eigen::MatrixXd s = w - prev_w, y = xi - prev_xi;
      const double sy = std::abs((s.array() * y.array()).sum());
      if (sy > 0.0) t = std::clamp(s.squaredNorm() / sy, 1e-6 * opts.step_init, 1e3 * opts.step_init);
    }
    bool accepted = false;
    for (int b = 0; b < opts.max_backtracks; ++b, t *= opts.armijo_shrink) {
      Eigen::MatrixXd trial = retract_qr(w, -t * xi);
      const double ft = checked_eval(f, trial);
      if (ft <= fw - opts.armijo_c * t * gnorm2) {
        prev_w = w;
        prev_xi = xi;
        w = std::move(trial);
        fw = ft;
        accepted = true;
        break;
      }
    }
    run.iterations = it + 1;
    if (!accepted) break;  // no descent left at working precision
    if (orthonormality_residual(w) >= StiefelPoint::kTolerance)
      throw std::runtime_error("Stiefel iterate drifted off the manifold");
    if (observer) observer(restart, run.iterations, w, fw);
  }
  run.w = std::move(w);
  run.f = fw;
  return run;
}

}  // namespace detail

/// Minimizes f over St(d, k) from `opts.restarts` seeded random starts and
/// returns the best result. `converged` reports whether the winning run ended
/// with a Riemannian gradient norm below opts.grad_tol.
inline SolveReport minimize(const Objective& f, Eigen::Index d, Eigen::Index k,
                            const SolverOptions& opts, const IterationObserver& observer = {}) {
  opts.validate();
  if (k < 0 || k > d || d <= 0) throw std::invalid_argument("minimize: need 0 <= k <= d, d > 0");
  std::mt19937_64 rng(opts.seed);
  SolveReport best;
  for (int r = 0; r < opts.restarts; ++r) {
    Eigen::MatrixXd w0 = random_stiefel(d, k, rng);
    detail::DescentRun run = detail::descend(f, std::move(w0), opts, r, observer);
    if (run.f < best.f_star) {
      best.W_star = StiefelPoint(std::move(run.w));
      best.f_star = run.f;
      best.iterations = run.iterations;
      best.converged = run.converged;
    }
  }
  return best;
}

}  // namespace exo
