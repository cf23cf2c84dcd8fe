/**
 * @file linear_model.hpp
 * @brief Dense least squares and sandwich covariances shared by the estimators.
 */
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

#include "decaybound/error.hpp"

namespace decaybound {

struct OlsFit {
  Eigen::VectorXd coef;
  Eigen::VectorXd residuals;
  Eigen::MatrixXd xtx_inv;  // (X'X)^-1
  double ssr{};
  double sst{};  // centred total sum of squares
  double r2{};
};

/// Ordinary least squares via column-pivoted QR. Throws SingularJacobian on
/// rank-deficient designs.
inline OlsFit ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  if (x.rows() != y.size()) throw Error(ErrorCode::InvalidArgument, "design/response size mismatch");
  if (x.rows() < x.cols()) throw Error(ErrorCode::TooFewObservations, "fewer rows than regressors");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-12);
  if (qr.rank() < x.cols()) throw Error(ErrorCode::SingularJacobian, "design matrix is rank deficient");

  OlsFit f;
  f.coef = qr.solve(y);
  f.residuals = y - x * f.coef;
  f.ssr = f.residuals.squaredNorm();
  const double mean = y.mean();
  f.sst = (y.array() - mean).square().sum();
  f.r2 = f.sst > 0.0 ? 1.0 - f.ssr / f.sst : (f.ssr == 0.0 ? 1.0 : 0.0);
  const Eigen::MatrixXd xtx = x.transpose() * x;
  f.xtx_inv = xtx.ldlt().solve(Eigen::MatrixXd::Identity(x.cols(), x.cols()));
  return f;
}

/// Symmetrises and clips negative eigenvalues to zero.
inline Eigen::MatrixXd nearest_psd(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  const Eigen::VectorXd ev = es.eigenvalues();
  if (ev.minCoeff() >= 0.0) return sym;
  const Eigen::VectorXd clipped = ev.cwiseMax(0.0);
  Eigen::MatrixXd out = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

inline Eigen::MatrixXd sandwich(const Eigen::MatrixXd& bread, const Eigen::MatrixXd& meat) {
  Eigen::MatrixXd v = bread * meat * bread;
  return nearest_psd(v);
}

/// HC0 heteroskedasticity-robust covariance.
inline Eigen::MatrixXd robust_covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& residuals,
                                         const Eigen::MatrixXd& xtx_inv) {
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(x.cols(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::VectorXd s = x.row(i).transpose() * residuals(i);
    meat.noalias() += s * s.transpose();
  }
  return sandwich(xtx_inv, meat);
}

/**
 * Cluster-robust covariance with the G/(G-1) finite-cluster factor.
 * `cluster` holds a dense cluster index in [0, n_clusters) per row.
 */
inline Eigen::MatrixXd cluster_covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& residuals,
                                          const Eigen::MatrixXd& xtx_inv, std::span<const std::size_t> cluster,
                                          std::size_t n_clusters) {
  Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_clusters), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    scores.row(static_cast<Eigen::Index>(cluster[static_cast<std::size_t>(i)])) += x.row(i) * residuals(i);
  const Eigen::MatrixXd meat = scores.transpose() * scores;
  const double g = static_cast<double>(n_clusters);
  const double factor = n_clusters > 1 ? g / (g - 1.0) : 1.0;
  return sandwich(xtx_inv, factor * meat);
}

inline Eigen::VectorXd standard_errors(const Eigen::MatrixXd& cov) {
  return cov.diagonal().cwiseMax(0.0).cwiseSqrt();
}

}  // namespace decaybound
