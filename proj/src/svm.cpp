#include "actgate/svm.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <list>
#include <fstream>
#include <limits>
#include <sstream>

#include "actgate/error.hpp"
#include "json.hpp"

namespace actgate::svm {
namespace {

using nlohmann::json;

constexpr std::string_view kFormatName = "actgate-svm-rbf";

double squared_distance(const double* u, const double* v, Eigen::Index d) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < d; ++k) {
    const double diff = u[k] - v[k];
    s += diff * diff;
  }
  return s;
}

// Row-major copy so each sample is contiguous.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Lazily computed kernel rows, least-recently-used eviction once the budget
// is spent. The two most recent rows always stay resident.
class KernelRows {
 public:
  KernelRows(const RowMatrix& X, double gamma, std::size_t budget_bytes)
      : X_(X), gamma_(gamma), rows_(static_cast<std::size_t>(X.rows())) {
    const std::size_t row_bytes = static_cast<std::size_t>(X.rows()) * sizeof(double);
    capacity_ = std::max<std::size_t>(2, budget_bytes / std::max<std::size_t>(row_bytes, 1));
  }

  const std::vector<double>& row(Eigen::Index i) {
    const auto idx = static_cast<std::size_t>(i);
    auto& slot = rows_[idx];
    if (!slot.empty()) {
      order_.splice(order_.end(), order_, where_[idx]);
      return slot;
    }
    if (order_.size() >= capacity_) {
      rows_[order_.front()].clear();
      rows_[order_.front()].shrink_to_fit();
      order_.pop_front();
    }
    const Eigen::Index n = X_.rows();
    const Eigen::Index d = X_.cols();
    slot.resize(static_cast<std::size_t>(n));
    const double* xi = X_.row(i).data();
    for (Eigen::Index j = 0; j < n; ++j) {
      slot[static_cast<std::size_t>(j)] =
          std::exp(-gamma_ * squared_distance(xi, X_.row(j).data(), d));
    }
    order_.push_back(idx);
    where_[idx] = std::prev(order_.end());
    return slot;
  }

 private:
  const RowMatrix& X_;
  double gamma_;
  std::size_t capacity_;
  std::vector<std::vector<double>> rows_;
  std::list<std::size_t> order_;
  std::vector<std::list<std::size_t>::iterator> where_ = std::vector<std::list<std::size_t>::iterator>(rows_.size());
};

template <typename T>
T require(const json& doc, const char* key) {
  if (!doc.is_object() || !doc.contains(key)) throw Error(std::string("schema: ") + key);
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(std::string("schema: ") + key);
  }
}

json vector_json(const Eigen::VectorXd& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Eigen::VectorXd vector_from(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void SvmConfig::validate() const {
  if (!(C > 0.0)) throw Error("C must be > 0");
  if (!(tol > 0.0)) throw Error("tol must be > 0");
  if (gamma && !(*gamma > 0.0)) throw Error("gamma must be > 0");
  if (max_iter < 0) throw Error("max_iter must be >= 0");
  if (!(eps > 0.0)) throw Error("eps must be > 0");
}

double rbf(std::span<const double> u, std::span<const double> v, double gamma) {
  if (u.size() != v.size()) throw Error("length mismatch in rbf");
  if (!(gamma > 0.0)) throw Error("gamma must be > 0");
  return std::exp(-gamma * squared_distance(u.data(), v.data(), static_cast<Eigen::Index>(u.size())));
}

double gamma_scale(const Eigen::MatrixXd& X) {
  if (X.size() == 0) throw Error("zero variance: empty matrix");
  const double mean = X.mean();
  const double var = (X.array() - mean).square().mean();
  if (!(var > 0.0)) throw Error("zero variance");
  return 1.0 / (static_cast<double>(X.cols()) * var);
}

SvmModel train(const Eigen::MatrixXd& X, std::span<const int> labels, const SvmConfig& config) {
  config.validate();
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  if (static_cast<std::size_t>(n) != labels.size()) throw Error("row count does not match labels");
  if (n < 2) throw Error("need >= 2 samples");
  if (!X.allFinite()) throw Error("non-finite input");
  std::vector<double> y(static_cast<std::size_t>(n));
  bool seen_pos = false;
  bool seen_neg = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    if (l != 0 && l != 1) throw Error("labels must be 0 or 1");
    y[static_cast<std::size_t>(i)] = l == 1 ? 1.0 : -1.0;
    (l == 1 ? seen_pos : seen_neg) = true;
  }
  if (!seen_pos || !seen_neg) throw Error("single class: training needs both labels");

  const double gamma = config.gamma.value_or(gamma_scale(X));
  const double C = config.C;
  const std::int64_t max_iter =
      config.max_iter > 0
          ? config.max_iter
          : std::min<std::int64_t>(10 * static_cast<std::int64_t>(n) * n, SvmConfig::kMaxIterCap);

  const RowMatrix Xr = X;
  KernelRows kernel(Xr, gamma, config.cache_mb << 20);

  // alpha, gradient of 0.5 a'Qa - e'a with Q_ij = y_i y_j K_ij.
  std::vector<double> alpha(static_cast<std::size_t>(n), 0.0);
  std::vector<double> G(static_cast<std::size_t>(n), -1.0);
  auto in_up = [&](std::size_t t) {
    return (y[t] > 0 && alpha[t] < C) || (y[t] < 0 && alpha[t] > 0);
  };
  auto in_low = [&](std::size_t t) {
    return (y[t] < 0 && alpha[t] < C) || (y[t] > 0 && alpha[t] > 0);
  };

  SvmModel model;
  std::int64_t iter = 0;
  double gap = std::numeric_limits<double>::infinity();
  bool converged = false;
  while (true) {
    double g_max = -std::numeric_limits<double>::infinity();
    double g_min = std::numeric_limits<double>::infinity();
    std::size_t i = 0;
    std::size_t j = 0;
    for (std::size_t t = 0; t < alpha.size(); ++t) {
      const double v = -y[t] * G[t];
      if (in_up(t) && v > g_max) {
        g_max = v;
        i = t;
      }
      if (in_low(t) && v < g_min) {
        g_min = v;
        j = t;
      }
    }
    gap = g_max - g_min;
    if (gap < config.tol) {
      converged = true;
      break;
    }
    if (iter >= max_iter) break;
    ++iter;

    const auto& Ki = kernel.row(static_cast<Eigen::Index>(i));
    const auto& Kj = kernel.row(static_cast<Eigen::Index>(j));
    const double Kii = Ki[i];
    const double Kjj = Kj[j];
    const double Kij = Ki[j];
    const double old_ai = alpha[i];
    const double old_aj = alpha[j];
    const double curvature = std::max(Kii + Kjj - 2.0 * Kij, config.eps);

    if (y[i] != y[j]) {
      const double delta = (-G[i] - G[j]) / curvature;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0) {
        if (alpha[j] < 0) {
          alpha[j] = 0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0) {
        alpha[i] = 0;
        alpha[j] = -diff;
      }
      if (diff > 0) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = C - diff;
        }
      } else if (alpha[j] > C) {
        alpha[j] = C;
        alpha[i] = C + diff;
      }
    } else {
      const double delta = (G[i] - G[j]) / curvature;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > C) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = sum - C;
        }
      } else if (alpha[j] < 0) {
        alpha[j] = 0;
        alpha[i] = sum;
      }
      if (sum > C) {
        if (alpha[j] > C) {
          alpha[j] = C;
          alpha[i] = sum - C;
        }
      } else if (alpha[i] < 0) {
        alpha[i] = 0;
        alpha[j] = sum;
      }
    }

    const double dai = alpha[i] - old_ai;
    const double daj = alpha[j] - old_aj;
    for (std::size_t t = 0; t < G.size(); ++t) {
      G[t] += y[t] * (y[i] * Ki[t] * dai + y[j] * Kj[t] * daj);
    }
  }

  // Bias from free vectors; interval midpoint when every alpha sits at a bound.
  double ub = std::numeric_limits<double>::infinity();
  double lb = -std::numeric_limits<double>::infinity();
  double sum_free = 0.0;
  int n_free = 0;
  for (std::size_t t = 0; t < alpha.size(); ++t) {
    const double yg = y[t] * G[t];
    if (alpha[t] >= C) {
      if (y[t] < 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (alpha[t] <= 0) {
      if (y[t] > 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }
  const double rho = n_free > 0 ? sum_free / n_free : 0.5 * (ub + lb);

  std::vector<Eigen::Index> sv;
  for (std::size_t t = 0; t < alpha.size(); ++t) {
    if (alpha[t] > 0) sv.push_back(static_cast<Eigen::Index>(t));
  }
  model.support_vectors.resize(static_cast<Eigen::Index>(sv.size()), d);
  model.dual_coefs.resize(static_cast<Eigen::Index>(sv.size()));
  for (std::size_t s = 0; s < sv.size(); ++s) {
    model.support_vectors.row(static_cast<Eigen::Index>(s)) = X.row(sv[s]);
    model.dual_coefs(static_cast<Eigen::Index>(s)) =
        alpha[static_cast<std::size_t>(sv[s])] * y[static_cast<std::size_t>(sv[s])];
  }
  model.bias = -rho;
  model.gamma = gamma;
  model.C = C;
  model.scaler.mean = Eigen::VectorXd::Zero(d);
  model.scaler.std = Eigen::VectorXd::Ones(d);
  model.scaler.n_fit = n;
  model.converged = converged;
  model.iterations = iter;
  model.kkt_gap = gap;
  return model;
}

SvmModel fit_pipeline(const Eigen::MatrixXd& X_raw, std::span<const int> y,
                      const SvmConfig& config) {
  auto scaler = features::fit_scaler(X_raw);
  auto model = train(features::transform(scaler, X_raw), y, config);
  model.scaler = std::move(scaler);
  return model;
}

double decision(const SvmModel& model, std::span<const double> x) {
  const Eigen::Index d = model.dim();
  if (static_cast<Eigen::Index>(x.size()) != d) {
    throw Error("dimension mismatch: vector of length " + std::to_string(x.size()) +
                ", model expects " + std::to_string(d));
  }
  double score = 0.0;
  for (Eigen::Index s = 0; s < model.support_vectors.rows(); ++s) {
    double d2 = 0.0;
    for (Eigen::Index k = 0; k < d; ++k) {
      const double diff = model.support_vectors(s, k) - x[static_cast<std::size_t>(k)];
      d2 += diff * diff;
    }
    score += model.dual_coefs(s) * std::exp(-model.gamma * d2);
  }
  return score + model.bias;
}

double decision_raw(const SvmModel& model, std::span<const double> x_raw) {
  const Eigen::VectorXd scaled = features::transform(model.scaler, x_raw);
  return decision(model, std::span<const double>(scaled.data(), static_cast<std::size_t>(scaled.size())));
}

int predict(const SvmModel& model, std::span<const double> x_scaled) {
  return predict_from_score(decision(model, x_scaled));
}

std::string serialize_model(const SvmModel& m) {
  json doc;
  doc["format"] = kFormatName;
  doc["format_version"] = m.format_version;
  doc["model_id"] = m.model_id;
  doc["created_at"] = m.created_at;
  doc["layer"] = m.layer;
  doc["kernel"] = "rbf";
  doc["gamma"] = m.gamma;
  doc["C"] = m.C;
  doc["bias"] = m.bias;
  doc["class_map"] = {{"0", -1}, {"1", 1}};
  doc["scaler"] = {{"mean", vector_json(m.scaler.mean)},
                   {"std", vector_json(m.scaler.std)},
                   {"n_fit", m.scaler.n_fit}};
  json svs = json::array();
  for (Eigen::Index s = 0; s < m.support_vectors.rows(); ++s) {
    svs.push_back(vector_json(m.support_vectors.row(s).transpose()));
  }
  doc["support_vectors"] = std::move(svs);
  doc["dual_coefs"] = vector_json(m.dual_coefs);
  doc["training"] = {{"converged", m.converged}, {"iterations", m.iterations}, {"kkt_gap", m.kkt_gap}};
  return doc.dump(2) + "\n";
}

SvmModel parse_model(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("schema: invalid JSON: ") + e.what());
  }
  if (require<std::string>(doc, "format") != kFormatName) throw Error("schema: format");
  SvmModel m;
  m.format_version = require<int>(doc, "format_version");
  if (m.format_version != kFormatVersion) {
    throw Error("unsupported version " + std::to_string(m.format_version));
  }
  m.model_id = require<std::string>(doc, "model_id");
  m.created_at = require<std::string>(doc, "created_at");
  m.layer = require<int>(doc, "layer");
  if (require<std::string>(doc, "kernel") != "rbf") throw Error("schema: kernel");
  m.gamma = require<double>(doc, "gamma");
  m.C = require<double>(doc, "C");
  m.bias = require<double>(doc, "bias");
  if (!(m.gamma > 0.0)) throw Error("schema: gamma");
  if (!(m.C > 0.0)) throw Error("schema: C");

  const json scaler = require<json>(doc, "scaler");
  m.scaler.mean = vector_from(require<std::vector<double>>(scaler, "mean"));
  m.scaler.std = vector_from(require<std::vector<double>>(scaler, "std"));
  m.scaler.n_fit = require<std::int64_t>(scaler, "n_fit");
  if (m.scaler.mean.size() != m.scaler.std.size()) throw Error("schema: scaler");
  if ((m.scaler.std.array() <= 0.0).any()) throw Error("schema: scaler.std");

  const auto svs = require<std::vector<std::vector<double>>>(doc, "support_vectors");
  const auto coefs = require<std::vector<double>>(doc, "dual_coefs");
  if (svs.empty() || svs.size() != coefs.size()) throw Error("schema: dual_coefs");
  const auto d = static_cast<Eigen::Index>(m.scaler.mean.size());
  m.support_vectors.resize(static_cast<Eigen::Index>(svs.size()), d);
  for (std::size_t s = 0; s < svs.size(); ++s) {
    if (static_cast<Eigen::Index>(svs[s].size()) != d) throw Error("schema: support_vectors");
    for (Eigen::Index k = 0; k < d; ++k) {
      m.support_vectors(static_cast<Eigen::Index>(s), k) = svs[s][static_cast<std::size_t>(k)];
    }
  }
  m.dual_coefs = vector_from(coefs);
  if (doc.contains("training")) {
    const json& t = doc["training"];
    m.converged = t.value("converged", true);
    m.iterations = t.value("iterations", std::int64_t{0});
    m.kkt_gap = t.value("kkt_gap", 0.0);
  }
  return m;
}

void save_model(const SvmModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << serialize_model(model);
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

SvmModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_model(buf.str());
}

}  // namespace actgate::svm
