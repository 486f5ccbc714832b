#include "actgate/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "actgate/error.hpp"
#include "actgate/features.hpp"
#include "actgate/prng.hpp"

namespace actgate::sweep {
namespace {

std::string percent(std::int64_t correct, std::int64_t total) {
  if (total <= 0) return "n/a";
  // Round half up to two decimals in integer arithmetic.
  const std::int64_t basis_points = (correct * 20000 + total) / (2 * total);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%lld.%02lld%%", static_cast<long long>(basis_points / 100),
                static_cast<long long>(basis_points % 100));
  return buf;
}

std::string format_fraction(double f) {
  std::ostringstream os;
  os << f;
  return os.str();
}

std::vector<int> present_categories(const SweepResult& r) {
  std::vector<int> cats;
  if (r.reports.empty()) return cats;
  for (int c = 0; c < store::kNumCategories; ++c) {
    if (r.reports.front().per_category[static_cast<std::size_t>(c)].count > 0) cats.push_back(c);
  }
  return cats;
}

std::string group_name(const SweepResult& r, int layer) {
  return r.groups ? std::string(r.groups->group_of(layer)) : std::string("-");
}

LayerReport evaluate_layer(const store::ActivationDataset& ds, const Split& sp, int layer,
                           const SweepConfig& config, svm::SvmModel& model_out) {
  const auto train = store::select_layer(ds, layer, sp.train);
  auto model = svm::fit_pipeline(train.X, train.y, config.svm);
  model.layer = layer;
  model.model_id = ds.model_id;
  model.created_at = config.created_at;

  LayerReport rep;
  rep.layer = layer;
  std::vector<double> x(ds.hidden_dim);
  for (auto idx : sp.test) {
    const auto v = ds.vector(idx, static_cast<std::size_t>(layer));
    std::copy(v.begin(), v.end(), x.begin());
    const int pred = svm::predict_from_score(svm::decision_raw(model, x));
    const auto& rec = ds.records[idx];
    const int truth = rec.label;
    if (pred == 1 && truth == 1) ++rep.confusion.tp;
    if (pred == 1 && truth == 0) ++rep.confusion.fp;
    if (pred == 0 && truth == 0) ++rep.confusion.tn;
    if (pred == 0 && truth == 1) ++rep.confusion.fn;
    auto& cat = rep.per_category[static_cast<std::size_t>(rec.category)];
    ++cat.count;
    if (pred == truth) ++cat.correct;
  }
  rep.accuracy = static_cast<double>(rep.confusion.tp + rep.confusion.tn) /
                 static_cast<double>(rep.confusion.total());
  model_out = std::move(model);
  return rep;
}

}  // namespace

void SweepConfig::validate() const {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error("test_fraction must lie in (0, 1)");
  }
  svm.validate();
}

Split split(const store::ActivationDataset& dataset, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error("test_fraction must lie in (0, 1)");
  }
  const std::uint64_t salt = SplitMix64::mix(seed ^ 0x6a09e667f3bcc909ULL);
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    by_class[dataset.records[i].label].push_back(i);
  }
  Split out;
  for (auto& members : by_class) {
    if (members.size() < 2) {
      throw Error("cannot stratify: a class has " + std::to_string(members.size()) +
                  " record(s), need >= 2");
    }
    auto key = [&](std::size_t i) {
      const auto id = dataset.records[i].prompt_id;
      return std::pair(SplitMix64::mix(id ^ salt), id);
    };
    std::sort(members.begin(), members.end(),
              [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
    const auto n = static_cast<long>(members.size());
    const long n_test = std::clamp(std::lround(test_fraction * static_cast<double>(n)), 1L, n - 1);
    out.test.insert(out.test.end(), members.begin(), members.begin() + n_test);
    out.train.insert(out.train.end(), members.begin() + n_test, members.end());
  }
  auto by_id = [&](std::size_t a, std::size_t b) {
    return dataset.records[a].prompt_id < dataset.records[b].prompt_id;
  };
  std::sort(out.train.begin(), out.train.end(), by_id);
  std::sort(out.test.begin(), out.test.end(), by_id);
  return out;
}

std::string_view LayerGroups::group_of(int layer) const {
  if (early.contains(layer)) return "early";
  if (middle.contains(layer)) return "middle";
  if (late.contains(layer)) return "late";
  throw Error("layer " + std::to_string(layer) + " outside every group");
}

LayerGroups group_layers(int num_layers) {
  if (num_layers < 3) throw Error("layer grouping needs N >= 3");
  if (num_layers == 32) return {{0, 10}, {11, 21}, {22, 31}};
  // floor(0.4 N) and floor(0.7 N) in integers; 0.7 has no exact binary form.
  const int middle_start = 4 * num_layers / 10;
  const int late_start = 7 * num_layers / 10;
  return {{0, middle_start - 1}, {middle_start, late_start - 1}, {late_start, num_layers - 1}};
}

int select_best_layer(std::span<const LayerReport> reports) {
  if (reports.empty()) throw Error("no layer reports to select from");
  const LayerReport* best = &reports.front();
  for (const auto& r : reports) {
    if (r.accuracy > best->accuracy || (r.accuracy == best->accuracy && r.layer < best->layer)) {
      best = &r;
    }
  }
  return best->layer;
}

std::string SweepResult::protocol() const {
  return "split=" + format_fraction(test_fraction) + "/seed=" + std::to_string(split_seed);
}

SweepResult sweep_layers(const store::ActivationDataset& dataset, const SweepConfig& config) {
  config.validate();
  dataset.validate();

  const store::ActivationDataset* ds = &dataset;
  store::ActivationDataset filtered;
  if (!config.include_direct) {
    filtered.model_id = dataset.model_id;
    filtered.num_layers = dataset.num_layers;
    filtered.hidden_dim = dataset.hidden_dim;
    for (const auto& r : dataset.records) {
      if (r.category != store::Category::kMalicious) filtered.records.push_back(r);
    }
    ds = &filtered;
  }

  std::vector<int> layers = config.layers;
  if (layers.empty()) {
    for (std::uint32_t l = 0; l < ds->num_layers; ++l) layers.push_back(static_cast<int>(l));
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (int l : layers) {
    if (l < 0 || static_cast<std::uint32_t>(l) >= ds->num_layers) {
      throw Error("layer out of range: " + std::to_string(l));
    }
  }

  const Split sp = split(*ds, config.test_fraction, config.split_seed);

  SweepResult result;
  result.reports.resize(layers.size());
  result.models.resize(layers.size());
  result.test_fraction = config.test_fraction;
  result.split_seed = config.split_seed;
  result.n_train = sp.train.size();
  result.n_test = sp.test.size();
  result.model_id = ds->model_id;
  if (ds->num_layers >= 3) result.groups = group_layers(static_cast<int>(ds->num_layers));

  // Layers are independent jobs; each writes only its own slot.
  unsigned workers = config.threads != 0 ? config.threads : std::thread::hardware_concurrency();
  workers = std::clamp<unsigned>(workers, 1, static_cast<unsigned>(layers.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    for (std::size_t k = next++; k < layers.size(); k = next++) {
      try {
        result.reports[k] = evaluate_layer(*ds, sp, layers[k], config, result.models[k]);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);

  result.selected_layer = select_best_layer(result.reports);
  return result;
}

std::string format_accuracy(const LayerReport& report) {
  return percent(report.confusion.tp + report.confusion.tn, report.confusion.total());
}

std::string emit_report(const SweepResult& result, ReportFormat format) {
  const auto cats = present_categories(result);
  std::ostringstream os;
  if (format == ReportFormat::kCsv) {
    os << "layer,group,accuracy,tp,fp,tn,fn";
    for (int c : cats) os << ",acc_" << store::category_name(static_cast<store::Category>(c));
    os << ",protocol\n";
    for (const auto& r : result.reports) {
      os << r.layer << ',' << group_name(result, r.layer) << ',' << format_accuracy(r) << ','
         << r.confusion.tp << ',' << r.confusion.fp << ',' << r.confusion.tn << ','
         << r.confusion.fn;
      for (int c : cats) {
        const auto& s = r.per_category[static_cast<std::size_t>(c)];
        os << ',' << percent(s.correct, s.count);
      }
      os << ',' << result.protocol() << '\n';
    }
    return os.str();
  }

  os << "# Layer-wise jailbreak detection accuracy\n\n";
  os << "- model: `" << result.model_id << "`\n";
  os << "- protocol: " << result.protocol() << " (stratified), train=" << result.n_train
     << ", test=" << result.n_test << "\n";
  os << "- selected layer: " << result.selected_layer << "\n\n";
  os << "| Layer | Group | Acc(%)";
  for (int c : cats) os << " | " << store::category_name(static_cast<store::Category>(c));
  os << " |\n|---:|:---|---:";
  for (std::size_t i = 0; i < cats.size(); ++i) os << "|---:";
  os << "|\n";
  for (const auto& r : result.reports) {
    os << "| " << r.layer << " | " << group_name(result, r.layer) << " | " << format_accuracy(r);
    for (int c : cats) {
      const auto& s = r.per_category[static_cast<std::size_t>(c)];
      os << " | " << percent(s.correct, s.count);
    }
    os << " |\n";
  }
  return os.str();
}

}  // namespace actgate::sweep
