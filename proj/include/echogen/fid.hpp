#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <string>

#include "echogen/error.hpp"
#include "echogen/tensor.hpp"

namespace echogen {

namespace detail {

struct GaussianFit {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

inline GaussianFit fit_gaussian(const Tensor& features) {
    if (features.rank() != 2)
        throw ShapeError("frechet distance: features must be (count, dim), got " + shape_str(features.shape()));
    const i64 n = features.dim(0), d = features.dim(1);
    if (n < 2) throw ValueError("frechet distance: need at least 2 feature vectors per side");
    Eigen::MatrixXd x(n, d);
    for (i64 i = 0; i < n; i++)
        for (i64 j = 0; j < d; j++) x(i, j) = static_cast<double>(features.data()[i * d + j]);
    GaussianFit fit;
    fit.mean = x.colwise().mean();
    const Eigen::MatrixXd centered = x.rowwise() - fit.mean.transpose();
    fit.cov = centered.transpose() * centered / static_cast<double>(n - 1);
    // Diagonal jitter keeps the square roots well-posed for rank-deficient fits.
    fit.cov.diagonal().array() += 1e-6;
    return fit;
}

// Symmetric positive-semidefinite square root; eigenvalues pushed negative
// by roundoff are clamped to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success) throw ValueError("frechet distance: eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    for (Eigen::Index i = 0; i < ev.size(); i++) ev[i] = ev[i] > 0.0 ? std::sqrt(ev[i]) : 0.0;
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// Frechet distance between Gaussian fits of two feature sets:
// ||mu1-mu2||^2 + Tr(S1 + S2 - 2*(S1^{1/2} S2 S1^{1/2})^{1/2}).
inline double fid(const Tensor& features_a, const Tensor& features_b) {
    const auto a = detail::fit_gaussian(features_a);
    const auto b = detail::fit_gaussian(features_b);
    if (a.mean.size() != b.mean.size())
        throw ShapeError("frechet distance: feature dimensions " + std::to_string(a.mean.size()) + " and " +
                         std::to_string(b.mean.size()) + " differ");
    const Eigen::MatrixXd root_a = detail::psd_sqrt(a.cov);
    const Eigen::MatrixXd inner = detail::psd_sqrt(root_a * b.cov * root_a);
    const double mean_term = (a.mean - b.mean).squaredNorm();
    const double trace_term = a.cov.trace() + b.cov.trace() - 2.0 * inner.trace();
    const double value = mean_term + trace_term;
    return value > 0.0 ? value : 0.0;
}

}  // namespace echogen
