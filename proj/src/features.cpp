#include "actgate/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "actgate/error.hpp"

namespace actgate::features {
namespace {

constexpr double kZeroVarianceGuard = 1e-12;
constexpr int kBisectionSteps = 50;
constexpr double kEntropyTol = 1e-5;
constexpr double kMachineEps = std::numeric_limits<double>::epsilon();
constexpr double kMinGain = 0.01;

void require_finite(const Eigen::MatrixXd& X) {
  if (!X.allFinite()) throw Error("non-finite input");
}

// Largest-magnitude entry of each row made positive.
void fix_signs(Eigen::MatrixXd& components) {
  for (Eigen::Index r = 0; r < components.rows(); ++r) {
    Eigen::Index arg = 0;
    components.row(r).cwiseAbs().maxCoeff(&arg);
    if (components(r, arg) < 0) components.row(r) *= -1.0;
  }
}

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& X) {
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d2(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (X.row(i) - X.row(j)).squaredNorm();
      d2(i, j) = v;
      d2(j, i) = v;
    }
  }
  return d2;
}

// Student-t affinities of the embedding; returns KL(P || Q) and fills grad.
double kl_and_gradient(const Eigen::MatrixXd& P, const Eigen::MatrixXd& Y, Eigen::MatrixXd* grad) {
  const Eigen::Index n = Y.rows();
  Eigen::MatrixXd w(n, n);
  double sum_w = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    w(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double dx = Y(i, 0) - Y(j, 0);
      const double dy = Y(i, 1) - Y(j, 1);
      const double v = 1.0 / (1.0 + dx * dx + dy * dy);
      w(i, j) = v;
      w(j, i) = v;
      sum_w += 2.0 * v;
    }
  }
  double kl = 0.0;
  if (grad) grad->setZero(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double q = std::max(w(i, j) / sum_w, kMachineEps);
      const double p = P(i, j);
      kl += p * std::log(std::max(p, kMachineEps) / q);
      if (grad) {
        const double c = 4.0 * (p - q) * w(i, j);
        (*grad)(i, 0) += c * (Y(i, 0) - Y(j, 0));
        (*grad)(i, 1) += c * (Y(i, 1) - Y(j, 1));
      }
    }
  }
  return kl;
}

void descend(const Eigen::MatrixXd& P, Eigen::MatrixXd& Y, int iterations, double momentum,
             double learning_rate) {
  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(Y.rows(), 2);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(Y.rows(), 2);
  Eigen::MatrixXd grad;
  for (int it = 0; it < iterations; ++it) {
    kl_and_gradient(P, Y, &grad);
    for (Eigen::Index i = 0; i < Y.rows(); ++i) {
      for (Eigen::Index c = 0; c < 2; ++c) {
        const bool opposite = update(i, c) * grad(i, c) < 0.0;
        double& g = gains(i, c);
        g = opposite ? g + 0.2 : g * 0.8;
        g = std::max(g, kMinGain);
        update(i, c) = momentum * update(i, c) - learning_rate * g * grad(i, c);
        Y(i, c) += update(i, c);
      }
    }
  }
}

}  // namespace

ScalerStats fit_scaler(const Eigen::MatrixXd& X) {
  if (X.rows() < 2) throw Error("need >= 2 samples to fit a scaler");
  require_finite(X);
  ScalerStats s;
  s.n_fit = X.rows();
  s.mean = X.colwise().mean().transpose();
  s.std.resize(X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const double var = (X.col(j).array() - s.mean(j)).square().mean();
    const double sd = std::sqrt(var);
    s.std(j) = sd < kZeroVarianceGuard ? 1.0 : sd;
  }
  return s;
}

Eigen::MatrixXd transform(const ScalerStats& stats, const Eigen::MatrixXd& X) {
  if (X.cols() != stats.dim()) {
    throw Error("dimension mismatch: " + std::to_string(X.cols()) + " columns, scaler has " +
                std::to_string(stats.dim()));
  }
  Eigen::MatrixXd out(X.rows(), X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    out.col(j) = (X.col(j).array() - stats.mean(j)) / stats.std(j);
  }
  return out;
}

Eigen::VectorXd transform(const ScalerStats& stats, std::span<const double> x) {
  if (static_cast<Eigen::Index>(x.size()) != stats.dim()) {
    throw Error("dimension mismatch: vector of length " + std::to_string(x.size()) +
                ", scaler has " + std::to_string(stats.dim()));
  }
  Eigen::VectorXd out(stats.dim());
  for (Eigen::Index j = 0; j < stats.dim(); ++j) {
    out(j) = (x[static_cast<std::size_t>(j)] - stats.mean(j)) / stats.std(j);
  }
  return out;
}

PcaResult pca(const Eigen::MatrixXd& X, int k) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  if (k < 1 || k > std::min<Eigen::Index>(n - 1, d)) {
    throw Error("k out of range: " + std::to_string(k) + " not in [1, min(n-1, d)]");
  }
  require_finite(X);
  PcaResult r;
  r.mean = X.colwise().mean().transpose();
  const Eigen::MatrixXd centered = X.rowwise() - r.mean.transpose();
  const double total = centered.squaredNorm();

  r.components.resize(k, d);
  Eigen::VectorXd eig(k);
  if (d <= n) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(centered.transpose() * centered);
    for (int c = 0; c < k; ++c) {
      const Eigen::Index idx = d - 1 - c;  // eigenvalues ascend
      eig(c) = std::max(es.eigenvalues()(idx), 0.0);
      r.components.row(c) = es.eigenvectors().col(idx).transpose();
    }
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(centered * centered.transpose());
    const double top = std::max(es.eigenvalues()(n - 1), 0.0);
    for (int c = 0; c < k; ++c) {
      const Eigen::Index idx = n - 1 - c;
      const double lambda = std::max(es.eigenvalues()(idx), 0.0);
      eig(c) = lambda;
      Eigen::VectorXd v;
      if (lambda > 1e-12 * top && lambda > 0.0) {
        v = centered.transpose() * es.eigenvectors().col(idx) / std::sqrt(lambda);
      } else {
        // Null direction: any unit vector orthogonal to the earlier components.
        v = Eigen::VectorXd::Zero(d);
        for (Eigen::Index e = 0; e < d; ++e) {
          Eigen::VectorXd cand = Eigen::VectorXd::Unit(d, e);
          for (int p = 0; p < c; ++p) cand -= r.components.row(p).dot(cand) * r.components.row(p).transpose();
          if (cand.norm() > 1e-6) {
            v = cand;
            break;
          }
        }
      }
      r.components.row(c) = v.normalized().transpose();
    }
  }
  fix_signs(r.components);
  r.projected = centered * r.components.transpose();
  r.explained_variance_ratio = total > 0.0 ? Eigen::VectorXd(eig / total) : Eigen::VectorXd::Zero(k);
  return r;
}

void ProjectionConfig::validate() const {
  if (!(perplexity >= 2.0)) throw Error("perplexity must be >= 2");
  if (iterations < 250) throw Error("iterations must be >= 250");
  if (pca_dims < 2) throw Error("pca_dims must be >= 2");
  if (exaggeration_iterations < 0 || exaggeration_iterations > iterations) {
    throw Error("exaggeration_iterations must lie in [0, iterations]");
  }
  if (learning_rate && !(*learning_rate > 0.0)) throw Error("learning_rate must be > 0");
}

Eigen::MatrixXd conditional_affinities(const Eigen::MatrixXd& d2, double perplexity) {
  const Eigen::Index n = d2.rows();
  const double target = std::log(perplexity);
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  std::vector<double> shifted(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) dmin = std::min(dmin, d2(i, j));
    }
    for (Eigen::Index j = 0; j < n; ++j) shifted[static_cast<std::size_t>(j)] = d2(i, j) - dmin;

    double beta = 1.0;
    double beta_min = -std::numeric_limits<double>::infinity();
    double beta_max = std::numeric_limits<double>::infinity();
    for (int step = 0; step < kBisectionSteps; ++step) {
      double sum_p = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        const double p = j == i ? 0.0 : std::exp(-shifted[static_cast<std::size_t>(j)] * beta);
        P(i, j) = p;
        sum_p += p;
      }
      double weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        P(i, j) /= sum_p;
        weighted += shifted[static_cast<std::size_t>(j)] * P(i, j);
      }
      const double entropy = std::log(sum_p) + beta * weighted;
      const double diff = entropy - target;
      if (std::abs(diff) <= kEntropyTol) break;
      if (diff > 0.0) {
        beta_min = beta;
        beta = std::isinf(beta_max) ? beta * 2.0 : 0.5 * (beta + beta_max);
      } else {
        beta_max = beta;
        beta = std::isinf(beta_min) ? beta / 2.0 : 0.5 * (beta + beta_min);
      }
    }
  }
  return P;
}

Embedding2D tsne(const Eigen::MatrixXd& X, const ProjectionConfig& config) {
  config.validate();
  const Eigen::Index n = X.rows();
  if (static_cast<double>(n) < 3.0 * config.perplexity + 1.0) {
    throw Error("n < 3*perplexity+1: n=" + std::to_string(n));
  }
  require_finite(X);

  Eigen::MatrixXd input = X;
  if (X.cols() > config.pca_dims) {
    const int k = static_cast<int>(std::min<Eigen::Index>(config.pca_dims, n - 1));
    input = pca(X, k).projected;
  }

  const Eigen::MatrixXd d2 = squared_distances(input);
  if (d2.maxCoeff() <= 0.0) throw Error("degenerate distances: all pairwise distances are zero");

  Eigen::MatrixXd P = conditional_affinities(d2, config.perplexity);
  P = P + P.transpose();
  P /= P.sum();
  P = P.cwiseMax(kMachineEps);
  P.diagonal().setZero();

  // PCA initialization scaled to std 1e-4 along the first axis.
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, 2);
  const int k_init = static_cast<int>(std::min<Eigen::Index>(2, input.cols()));
  Y.leftCols(k_init) = pca(input, k_init).projected;
  const double sd0 = std::sqrt((Y.col(0).array() - Y.col(0).mean()).square().mean());
  if (sd0 > 0.0) Y *= 1e-4 / sd0;

  Embedding2D out;
  out.initial_kl = kl_and_gradient(P, Y, nullptr);

  const double lr = config.learning_rate.value_or(
      std::max(static_cast<double>(n) / config.early_exaggeration / 4.0, 50.0));
  descend(P * config.early_exaggeration, Y, config.exaggeration_iterations, 0.5, lr);
  descend(P, Y, config.iterations - config.exaggeration_iterations, 0.8, lr);

  out.final_kl = kl_and_gradient(P, Y, nullptr);
  out.coords = std::move(Y);
  if (!out.coords.allFinite()) throw Error("t-SNE diverged");
  return out;
}

}  // namespace actgate::features
