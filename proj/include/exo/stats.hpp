#pragma once

// Sample moments, normalized partial covariance, the partial correlation
// coefficient (PCC) and ordinary least squares.
//
// Covariances use the population convention (divide by n). The PCC of blocks
// X, Y given Z is
//
//   V(X,Y,Z) = Sxx^{-1/2} (Sxy - Sxz Szz^{-1} Szy) Syy^{-1/2},   PCC = tr(V'V),
//
// i.e. the squared Frobenius norm of the normalized partial covariance. Inverse
// and inverse square roots go through a symmetric eigendecomposition with the
// eigenvalues floored at the ridge, so rank-deficient blocks (such as the
// endogenous residual S - S W W') stay well posed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace exo {

/// An n x p block of samples (rows are samples). p == 0 is a legal empty block
/// and behaves as "nothing to condition on".
class SampleMatrix {
 public:
  SampleMatrix() = default;

  /// Wraps data that the caller guarantees is already centered.
  static SampleMatrix assume_centered(Eigen::MatrixXd data) {
    SampleMatrix m;
    m.data_ = std::move(data);
    m.centered_ = true;
    return m;
  }

  /// Subtracts the column means.
  static SampleMatrix center(const Eigen::MatrixXd& raw) {
    SampleMatrix m;
    if (raw.cols() > 0) {
      const Eigen::RowVectorXd mean = raw.colwise().mean();
      m.data_ = raw.rowwise() - mean;
    } else {
      m.data_ = raw;
    }
    m.centered_ = true;
    return m;
  }

  static SampleMatrix raw(Eigen::MatrixXd data) {
    SampleMatrix m;
    m.data_ = std::move(data);
    return m;
  }

  static SampleMatrix empty(Eigen::Index n) { return assume_centered(Eigen::MatrixXd(n, 0)); }

  const Eigen::MatrixXd& data() const { return data_; }
  Eigen::Index rows() const { return data_.rows(); }
  Eigen::Index cols() const { return data_.cols(); }
  bool centered() const { return centered_; }

 private:
  Eigen::MatrixXd data_;
  bool centered_ = false;
};

/// Horizontal concatenation [X, Y] of two blocks with the same row count.
inline SampleMatrix hstack(const SampleMatrix& x, const SampleMatrix& y) {
  if (x.rows() != y.rows()) throw std::invalid_argument("hstack: row count mismatch");
  Eigen::MatrixXd out(x.rows(), x.cols() + y.cols());
  out << x.data(), y.data();
  return x.centered() && y.centered() ? SampleMatrix::assume_centered(std::move(out))
                                      : SampleMatrix::raw(std::move(out));
}

/// (1/n) X'Y for two centered blocks.
inline Eigen::MatrixXd covariance_matrix(const SampleMatrix& x, const SampleMatrix& y) {
  if (x.rows() != y.rows())
    throw std::invalid_argument("covariance_matrix: sample counts differ (" +
                                std::to_string(x.rows()) + " vs " + std::to_string(y.rows()) + ")");
  if (x.rows() < 2) throw std::invalid_argument("covariance_matrix: need at least two samples");
  if (!x.centered() || !y.centered())
    throw std::invalid_argument("covariance_matrix: blocks must be centered");
  return x.data().transpose() * y.data() / static_cast<double>(x.rows());
}

/// How much to add to each covariance block's diagonal before inverting it.
/// The per-block ridge is `absolute + relative * trace(block) / dim(block)`.
struct RidgePolicy {
  double absolute = 0.0;
  double relative = 0.0;

  static RidgePolicy fixed(double r) { return {r, 0.0}; }
  static RidgePolicy scaled(double rel) { return {0.0, rel}; }

  double for_block(const Eigen::MatrixXd& cov) const {
    if (cov.rows() == 0) return absolute;
    return absolute + relative * cov.trace() / static_cast<double>(cov.rows());
  }
};

namespace detail {

// Eigenvalues at or below this fraction of the largest one are treated as
// exact zeros when no ridge is in effect (pseudo-inverse behaviour).
inline constexpr double kRankTolerance = 1e-13;

template <class F>
Eigen::MatrixXd spectral_map(const Eigen::MatrixXd& sym, double floor, F&& fn) {
  const Eigen::Index p = sym.rows();
  if (p == 0) return Eigen::MatrixXd(0, 0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
  const Eigen::VectorXd& lam = es.eigenvalues();
  const double cutoff = kRankTolerance * std::max(lam.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd mapped(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    const double l = std::max(lam(i), floor);
    mapped(i) = l > cutoff && l > 0.0 ? fn(l) : 0.0;
  }
  return es.eigenvectors() * mapped.asDiagonal() * es.eigenvectors().transpose();
}

inline void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

}  // namespace detail

/// Inverse square root of a symmetric PSD matrix, eigenvalues floored at `floor`.
inline Eigen::MatrixXd inverse_sqrt_psd(const Eigen::MatrixXd& sym, double floor) {
  return detail::spectral_map(sym, floor, [](double l) { return 1.0 / std::sqrt(l); });
}

/// Inverse of a symmetric PSD matrix, eigenvalues floored at `floor`.
inline Eigen::MatrixXd inverse_psd(const Eigen::MatrixXd& sym, double floor) {
  return detail::spectral_map(sym, floor, [](double l) { return 1.0 / l; });
}

/// Second-moment blocks of a triple (X, Y, Z). Lets callers that already hold
/// a joint covariance matrix (the decomposition objective) skip the O(n) pass.
struct BlockMoments {
  Eigen::MatrixXd xx, xy, xz, yy, yz, zz;
};

inline BlockMoments block_moments(const SampleMatrix& x, const SampleMatrix& y,
                                  const SampleMatrix& z) {
  if (x.rows() != y.rows() || x.rows() != z.rows())
    throw std::invalid_argument("partial_covariance: blocks have different sample counts");
  return {covariance_matrix(x, x), covariance_matrix(x, y), covariance_matrix(x, z),
          covariance_matrix(y, y), covariance_matrix(y, z), covariance_matrix(z, z)};
}

struct PartialCovariance {
  Eigen::MatrixXd V;
  double ridge = 0.0;
};

inline PartialCovariance partial_covariance(const BlockMoments& m, const RidgePolicy& ridge) {
  detail::require_finite(m.xx, "partial_covariance");
  detail::require_finite(m.xy, "partial_covariance");
  detail::require_finite(m.xz, "partial_covariance");
  detail::require_finite(m.yy, "partial_covariance");
  detail::require_finite(m.yz, "partial_covariance");
  detail::require_finite(m.zz, "partial_covariance");

  const double rx = ridge.for_block(m.xx);
  const double ry = ridge.for_block(m.yy);
  const double rz = ridge.for_block(m.zz);
  const auto with_ridge = [](const Eigen::MatrixXd& c, double r) {
    Eigen::MatrixXd out = c;
    out.diagonal().array() += r;
    return out;
  };

  Eigen::MatrixXd cross = m.xy;
  if (m.zz.rows() > 0) cross -= m.xz * inverse_psd(with_ridge(m.zz, rz), rz) * m.yz.transpose();

  PartialCovariance out;
  out.V = inverse_sqrt_psd(with_ridge(m.xx, rx), rx) * cross *
          inverse_sqrt_psd(with_ridge(m.yy, ry), ry);
  out.ridge = std::max({rx, ry, rz});
  if (!out.V.allFinite()) throw std::runtime_error("partial_covariance: non-finite result");
  return out;
}

inline PartialCovariance partial_covariance(const SampleMatrix& x, const SampleMatrix& y,
                                            const SampleMatrix& z, double ridge) {
  if (ridge < 0.0) throw std::invalid_argument("partial_covariance: ridge must be >= 0");
  detail::require_finite(x.data(), "partial_covariance");
  detail::require_finite(y.data(), "partial_covariance");
  detail::require_finite(z.data(), "partial_covariance");
  return partial_covariance(block_moments(x, y, z), RidgePolicy::fixed(ridge));
}

inline double pcc(const BlockMoments& m, const RidgePolicy& ridge) {
  return partial_covariance(m, ridge).V.squaredNorm();
}

/// PCC(X; Y | Z) = tr(V'V).
inline double pcc(const SampleMatrix& x, const SampleMatrix& y, const SampleMatrix& z,
                  double ridge) {
  return partial_covariance(x, y, z, ridge).V.squaredNorm();
}

/// Ordinary least squares with an intercept.
struct LinearModel {
  Eigen::VectorXd weights;
  double intercept = 0.0;
  double residual_variance = 0.0;

  double predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    return intercept + (weights.size() ? weights.dot(x) : 0.0);
  }
  Eigen::VectorXd predict_all(const Eigen::MatrixXd& x) const {
    Eigen::VectorXd out = Eigen::VectorXd::Constant(x.rows(), intercept);
    if (weights.size()) out += x * weights;
    return out;
  }
};

inline constexpr double kGramRidge = 1e-8;

/// Least squares through the normal equations (Gram ridge 1e-8). The columns
/// are centered internally, so the intercept absorbs all mean offsets.
inline LinearModel fit_linear(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  const Eigen::Index n = x.rows(), p = x.cols();
  if (y.size() != n) throw std::invalid_argument("fit_linear: x and y have different lengths");
  if (n <= p) throw std::invalid_argument("fit_linear: need more samples than regressors");

  LinearModel model;
  const double ybar = y.mean();
  if (p == 0) {
    model.weights = Eigen::VectorXd(0);
    model.intercept = ybar;
  } else {
    const Eigen::RowVectorXd xbar = x.colwise().mean();
    const Eigen::MatrixXd xc = x.rowwise() - xbar;
    Eigen::MatrixXd gram = xc.transpose() * xc;
    gram.diagonal().array() += kGramRidge;
    model.weights = gram.ldlt().solve(xc.transpose() * (y.array() - ybar).matrix());
    model.intercept = ybar - xbar.dot(model.weights);
  }
  const Eigen::VectorXd resid = y - model.predict_all(x);
  model.residual_variance = resid.squaredNorm() / static_cast<double>(n);
  return model;
}

inline LinearModel fit_linear(const SampleMatrix& x, const Eigen::VectorXd& y) {
  return fit_linear(x.data(), y);
}

}  // namespace exo
