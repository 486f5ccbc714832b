#pragma once

// Binary RBF-kernel SVM trained with SMO on standardized activations.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "actgate/features.hpp"

namespace actgate::svm {

inline constexpr int kFormatVersion = 1;

struct SvmConfig {
  double C = 1.0;
  // nullopt = "scale", resolved with gamma_scale() on the training matrix.
  std::optional<double> gamma;
  // Stop when the maximal KKT violation m(a) - M(a) drops below tol.
  double tol = 1e-3;
  // 0 = 10 * n^2 pair updates, capped at kMaxIterCap.
  std::int64_t max_iter = 0;
  // Floor for the pair curvature K_ii + K_jj - 2 K_ij, which bounds the
  // largest alpha step a single update can take.
  double eps = 1e-8;
  // Kernel row cache budget.
  std::size_t cache_mb = 256;

  static constexpr std::int64_t kMaxIterCap = 10'000'000;
  void validate() const;
};

struct SvmModel {
  int format_version = kFormatVersion;
  std::string model_id;
  std::string created_at;
  int layer = 0;

  Eigen::MatrixXd support_vectors;  // s x d, scaled space
  Eigen::VectorXd dual_coefs;       // alpha_i * y_i with y in {-1, +1}
  double bias = 0.0;
  double gamma = 1.0;
  double C = 1.0;
  features::ScalerStats scaler;

  // Training diagnostics.
  bool converged = true;
  std::int64_t iterations = 0;
  double kkt_gap = 0.0;

  Eigen::Index dim() const { return support_vectors.cols(); }
};

/// exp(-gamma * ||u - v||^2).
double rbf(std::span<const double> u, std::span<const double> v, double gamma);

/// 1 / (d * Var), Var the population variance of all n*d entries.
double gamma_scale(const Eigen::MatrixXd& X);

/// Solves the C-SVC dual by SMO with maximal-violating-pair selection (ties to
/// the lowest index). Labels are {0, 1}; class 1 maps to +1. The returned
/// model has an identity scaler of matching dimension; pipelines overwrite it.
/// On hitting max_iter the model is returned with converged = false.
SvmModel train(const Eigen::MatrixXd& X, std::span<const int> y, const SvmConfig& config);

/// StandardScaler followed by train(); the scaler is stored in the model.
SvmModel fit_pipeline(const Eigen::MatrixXd& X_raw, std::span<const int> y,
                      const SvmConfig& config);

/// Signed score sum_i coef_i K(sv_i, x) + b for a scaled vector.
double decision(const SvmModel& model, std::span<const double> x_scaled);

/// Applies the stored scaler first.
double decision_raw(const SvmModel& model, std::span<const double> x_raw);

/// 1 when score >= 0: a zero score refuses.
constexpr int predict_from_score(double score) { return score >= 0.0 ? 1 : 0; }

int predict(const SvmModel& model, std::span<const double> x_scaled);

/// Versioned JSON document; doubles round-trip bit-exactly.
std::string serialize_model(const SvmModel& model);
SvmModel parse_model(std::string_view text);

void save_model(const SvmModel& model, const std::filesystem::path& path);
SvmModel load_model(const std::filesystem::path& path);

}  // namespace actgate::svm
