#pragma once

// Standardization and 2-D projection of activation matrices.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace actgate::features {

struct ScalerStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;  // strictly positive
  std::int64_t n_fit = 0;

  Eigen::Index dim() const { return mean.size(); }
};

/// Column mean and population standard deviation; columns whose std is below
/// 1e-12 get std = 1.
ScalerStats fit_scaler(const Eigen::MatrixXd& X);

Eigen::MatrixXd transform(const ScalerStats& stats, const Eigen::MatrixXd& X);
Eigen::VectorXd transform(const ScalerStats& stats, std::span<const double> x);

struct PcaResult {
  Eigen::MatrixXd components;  // k x d, orthonormal rows
  Eigen::MatrixXd projected;   // n x k
  Eigen::VectorXd explained_variance_ratio;
  Eigen::VectorXd mean;
};

/// Eigendecomposition of the covariance (or of the Gram matrix when d > n).
/// Each component is signed so that its largest-magnitude entry is positive.
PcaResult pca(const Eigen::MatrixXd& X, int k);

struct ProjectionConfig {
  int pca_dims = 128;
  double perplexity = 30.0;
  int iterations = 1000;
  // Recorded for reproducibility; the PCA initialization is deterministic,
  // so the embedding does not depend on it.
  std::uint64_t seed = 42;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  // nullopt = "auto": max(n / early_exaggeration / 4, 50).
  std::optional<double> learning_rate;

  void validate() const;
};

struct Embedding2D {
  Eigen::MatrixXd coords;  // n x 2
  double initial_kl = 0.0;
  double final_kl = 0.0;
};

/// Row-conditional affinities p_{j|i} for squared distances `d2` (n x n),
/// each row's precision found by bisection on the entropy (50 steps,
/// tolerance 1e-5 nats). Rows sum to 1.
Eigen::MatrixXd conditional_affinities(const Eigen::MatrixXd& d2, double perplexity);

/// Exact O(n^2) t-SNE with PCA initialization.
Embedding2D tsne(const Eigen::MatrixXd& X, const ProjectionConfig& config);

}  // namespace actgate::features
