#pragma once

// Per-layer classifier training and evaluation, target-layer selection and
// layer-wise accuracy reports.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "actgate/store.hpp"
#include "actgate/svm.hpp"

namespace actgate::sweep {

struct SweepConfig {
  double test_fraction = 0.2;
  std::uint64_t split_seed = 42;
  svm::SvmConfig svm;
  // Empty = every layer.
  std::vector<int> layers;
  // Direct-malicious prompts (category 1) train as label 1 unless disabled.
  bool include_direct = true;
  // 0 = hardware concurrency. Results do not depend on this value.
  unsigned threads = 0;
  std::string created_at;

  void validate() const;
};

struct Split {
  std::vector<std::size_t> train;  // record indices, ascending prompt_id
  std::vector<std::size_t> test;
};

/// Stratified by binary label. Within each class, records are ordered by a
/// SplitMix64 hash of (prompt_id, seed) and the first round(f * n_class)
/// (clamped to [1, n_class - 1]) go to test, so the split depends on ids and
/// seed only, never on record order.
Split split(const store::ActivationDataset& dataset, double test_fraction, std::uint64_t seed);

struct Confusion {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
};

struct CategoryScore {
  std::int64_t count = 0;
  std::int64_t correct = 0;
  double rate() const { return count == 0 ? 0.0 : static_cast<double>(correct) / count; }
};

struct LayerReport {
  int layer = 0;
  double accuracy = 0.0;
  Confusion confusion;
  // Test-set share of each category classified as its true label (refusal
  // rate for attack categories, pass rate for benign).
  std::array<CategoryScore, store::kNumCategories> per_category{};
};

struct LayerRange {
  int first = 0;
  int last = 0;  // inclusive
  bool contains(int layer) const { return layer >= first && layer <= last; }
};

struct LayerGroups {
  LayerRange early;
  LayerRange middle;
  LayerRange late;

  std::string_view group_of(int layer) const;
};

/// N = 32 gives early 0-10, middle 11-21, late 22-31; otherwise the
/// boundaries fall at floor(0.4 N) and floor(0.7 N).
LayerGroups group_layers(int num_layers);

struct SweepResult {
  std::vector<LayerReport> reports;  // ascending layer
  int selected_layer = 0;
  std::optional<LayerGroups> groups;  // absent when N < 3
  std::vector<svm::SvmModel> models;  // parallel to reports
  double test_fraction = 0.0;
  std::uint64_t split_seed = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::string model_id;

  std::string protocol() const;
};

SweepResult sweep_layers(const store::ActivationDataset& dataset, const SweepConfig& config);

/// Argmax accuracy, lowest layer on ties.
int select_best_layer(std::span<const LayerReport> reports);

enum class ReportFormat { kCsv, kMarkdown };

/// "99.50%" style, computed from the confusion counts.
std::string format_accuracy(const LayerReport& report);

std::string emit_report(const SweepResult& result, ReportFormat format);

}  // namespace actgate::sweep
