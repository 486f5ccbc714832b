#pragma once

// Activation-space gating: one prefill pass per request, classify the
// last-token activation at the model's layer, then refuse or keep decoding
// from the same cached states.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "actgate/refmodel.hpp"
#include "actgate/svm.hpp"

namespace actgate::gate {

enum class Backend { kTiny, kExternalActivation };

std::string_view backend_name(Backend b);
Backend parse_backend(std::string_view name);

inline constexpr std::string_view kDefaultRefusal = "I cannot help with that request.";

struct GateConfig {
  std::filesystem::path model_file;
  Backend backend = Backend::kTiny;
  std::string refusal_text = std::string(kDefaultRefusal);
  int max_new_tokens = 512;
  refmodel::Truncation truncation = refmodel::Truncation::kKeepFirst;
};

enum class Verdict { kBenign, kJailbreak };
enum class Action { kGenerate, kRefuse };

std::string_view verdict_name(Verdict v);
std::string_view action_name(Action a);

struct Classification {
  Verdict verdict = Verdict::kBenign;
  double score = 0.0;
};

struct GateDecision {
  Verdict verdict = Verdict::kBenign;
  double score = 0.0;
  Action action = Action::kGenerate;
  std::string text;
  int new_tokens = 0;
  int forward_passes = 0;
  int added_prompt_tokens = 0;
  double latency_ms = 0.0;
};

struct GateStats {
  std::int64_t requests = 0;
  std::int64_t refusals = 0;
  std::int64_t generations = 0;
  std::int64_t forward_passes = 0;
  std::int64_t added_prompt_tokens = 0;
  std::int64_t errors = 0;
  double mean_latency_ms = 0.0;
};

/// Thread-safe after construction: the SVM and backend model are immutable,
/// every request owns its workspace, counters are atomic.
class Gate {
 public:
  /// Loads config.model_file.
  explicit Gate(GateConfig config);
  Gate(svm::SvmModel model, GateConfig config);
  ~Gate();

  const svm::SvmModel& model() const { return model_; }
  const GateConfig& config() const { return config_; }
  /// Present only for the tiny backend.
  const refmodel::Model* backend_model() const { return backend_.get(); }

  /// Tokenize, one prefill, last-token activation at the model's layer,
  /// stored scaling, SVM decision.
  Classification classify_prompt(std::string_view prompt) const;

  /// Activation already extracted upstream (external-activation backend).
  Classification classify_activation(std::span<const double> activation) const;

  GateDecision guard_generate(std::string_view prompt);

  /// External-activation request: the prefill ran upstream, so the decision
  /// counts one forward pass and generation is left to the caller (empty
  /// text on action=generate).
  GateDecision guard_activation(std::span<const double> activation);

  /// Handles one protocol line and returns the response line (no newline).
  std::string handle_line(std::string_view line);

  GateStats stats() const;

 private:
  void validate_backend() const;
  void record(const GateDecision& d);

  GateConfig config_;
  svm::SvmModel model_;
  std::unique_ptr<refmodel::Model> backend_;

  std::atomic<std::int64_t> requests_{0};
  std::atomic<std::int64_t> refusals_{0};
  std::atomic<std::int64_t> generations_{0};
  std::atomic<std::int64_t> forward_passes_{0};
  std::atomic<std::int64_t> added_prompt_tokens_{0};
  std::atomic<std::int64_t> errors_{0};
  std::atomic<std::int64_t> latency_ns_{0};
};

std::string stats_json(const GateStats& stats);

}  // namespace actgate::gate
