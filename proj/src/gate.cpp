#include "actgate/gate.hpp"

#include <chrono>
#include <cmath>
#include <vector>

#include "actgate/error.hpp"
#include "json.hpp"

namespace actgate::gate {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

Verdict verdict_for(double score) {
  return svm::predict_from_score(score) == 1 ? Verdict::kJailbreak : Verdict::kBenign;
}

std::string dump_line(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

}  // namespace

std::string_view backend_name(Backend b) {
  return b == Backend::kTiny ? "tiny" : "external-activation";
}

Backend parse_backend(std::string_view name) {
  if (name == "tiny") return Backend::kTiny;
  if (name == "external-activation" || name == "external") return Backend::kExternalActivation;
  throw Error("unknown backend '" + std::string(name) + "'");
}

std::string_view verdict_name(Verdict v) { return v == Verdict::kJailbreak ? "jailbreak" : "benign"; }
std::string_view action_name(Action a) { return a == Action::kRefuse ? "refuse" : "generate"; }

Gate::Gate(GateConfig config) : Gate(svm::load_model(config.model_file), config) {}

Gate::Gate(svm::SvmModel model, GateConfig config)
    : config_(std::move(config)), model_(std::move(model)) {
  if (config_.refusal_text.empty()) throw Error("refusal_text must be non-empty");
  if (config_.max_new_tokens < 0) throw Error("max_new_tokens must be >= 0");
  if (config_.backend == Backend::kTiny) {
    backend_ = std::make_unique<refmodel::Model>(
        refmodel::ModelConfig::from_model_id(model_.model_id));
  }
  validate_backend();
}

Gate::~Gate() = default;

void Gate::validate_backend() const {
  if (model_.layer < 0) throw Error("model layer must be >= 0");
  if (!backend_) return;
  const auto& c = backend_->config();
  if (model_.dim() != c.hidden_dim) {
    throw Error("dimension mismatch: classifier d=" + std::to_string(model_.dim()) +
                ", backend d=" + std::to_string(c.hidden_dim));
  }
  if (model_.layer >= c.num_layers) {
    throw Error("layer " + std::to_string(model_.layer) + " outside backend's " +
                std::to_string(c.num_layers) + " layers");
  }
}

Classification Gate::classify_activation(std::span<const double> activation) const {
  const double score = svm::decision_raw(model_, activation);
  return {verdict_for(score), score};
}

Classification Gate::classify_prompt(std::string_view prompt) const {
  if (!backend_) {
    throw Error("backend external-activation cannot run prompts; send an activation");
  }
  const auto tokens = refmodel::tokenize(prompt, backend_->config().max_len, config_.truncation);
  const auto hidden = backend_->forward(tokens);
  const auto h = refmodel::last_token(hidden, model_.layer);
  const std::vector<double> x(h.begin(), h.end());
  return classify_activation(x);
}

GateDecision Gate::guard_generate(std::string_view prompt) {
  const auto start = Clock::now();
  if (!backend_) {
    throw Error("backend external-activation cannot run prompts; send an activation");
  }
  const auto tokens = refmodel::tokenize(prompt, backend_->config().max_len, config_.truncation);
  if (static_cast<long>(tokens.size()) + config_.max_new_tokens > backend_->config().context_len) {
    throw Error("context overflow: prompt of " + std::to_string(tokens.size()) + " tokens + " +
                std::to_string(config_.max_new_tokens) + " new tokens");
  }
  const refmodel::Prefill prefill = backend_->prefill(tokens);

  GateDecision d;
  d.forward_passes = 1;
  d.added_prompt_tokens = static_cast<int>(prefill.tokens.size()) - static_cast<int>(tokens.size());
  const auto h = refmodel::last_token(prefill.hidden, model_.layer);
  const std::vector<double> x(h.begin(), h.end());
  const auto cls = classify_activation(x);
  d.verdict = cls.verdict;
  d.score = cls.score;
  if (d.verdict == Verdict::kJailbreak) {
    d.action = Action::kRefuse;
    d.text = config_.refusal_text;
  } else {
    d.action = Action::kGenerate;
    const auto gen = backend_->generate(tokens, config_.max_new_tokens, &prefill);
    if (config_.max_new_tokens > 0 && !gen.reused_prefill) {
      throw Error("generation did not reuse the classification prefill");
    }
    d.forward_passes += gen.prefill_passes;
    d.text = gen.text;
    d.new_tokens = gen.new_token_count;
  }
  d.latency_ms = elapsed_ms(start);
  record(d);
  return d;
}

GateDecision Gate::guard_activation(std::span<const double> activation) {
  const auto start = Clock::now();
  const auto cls = classify_activation(activation);
  GateDecision d;
  d.verdict = cls.verdict;
  d.score = cls.score;
  d.forward_passes = 1;
  if (d.verdict == Verdict::kJailbreak) {
    d.action = Action::kRefuse;
    d.text = config_.refusal_text;
  } else {
    d.action = Action::kGenerate;
  }
  d.latency_ms = elapsed_ms(start);
  record(d);
  return d;
}

void Gate::record(const GateDecision& d) {
  ++requests_;
  if (d.action == Action::kRefuse) ++refusals_;
  else ++generations_;
  forward_passes_ += d.forward_passes;
  added_prompt_tokens_ += d.added_prompt_tokens;
  latency_ns_ += static_cast<std::int64_t>(std::llround(d.latency_ms * 1e6));
}

std::string Gate::handle_line(std::string_view line) {
  const auto start = Clock::now();
  json id = nullptr;
  try {
    json req;
    try {
      req = json::parse(line);
    } catch (const json::parse_error&) {
      throw Error("malformed JSON");
    }
    if (!req.is_object()) throw Error("request must be a JSON object");
    if (req.contains("id")) id = req["id"];

    GateDecision d;
    if (req.contains("prompt")) {
      if (!req["prompt"].is_string()) throw Error("'prompt' must be a string");
      d = guard_generate(req["prompt"].get<std::string>());
    } else if (req.contains("activation")) {
      const json& a = req["activation"];
      if (!a.is_array()) throw Error("'activation' must be an array of numbers");
      std::vector<double> x;
      x.reserve(a.size());
      for (const auto& v : a) {
        if (!v.is_number()) throw Error("'activation' must be an array of numbers");
        x.push_back(v.get<double>());
        if (!std::isfinite(x.back())) throw Error("non-finite activation value");
      }
      d = guard_activation(x);
    } else {
      throw Error("request needs 'prompt' or 'activation'");
    }
    json resp = {{"id", id},
                 {"verdict", verdict_name(d.verdict)},
                 {"score", d.score},
                 {"action", action_name(d.action)},
                 {"text", d.text},
                 {"latency_ms", elapsed_ms(start)}};
    return dump_line(resp);
  } catch (const std::exception& e) {
    ++errors_;
    return dump_line(json{{"id", id}, {"error", e.what()}});
  }
}

GateStats Gate::stats() const {
  GateStats s;
  s.requests = requests_.load();
  s.refusals = refusals_.load();
  s.generations = generations_.load();
  s.forward_passes = forward_passes_.load();
  s.added_prompt_tokens = added_prompt_tokens_.load();
  s.errors = errors_.load();
  s.mean_latency_ms = s.requests == 0 ? 0.0 : static_cast<double>(latency_ns_.load()) / 1e6 / s.requests;
  return s;
}

std::string stats_json(const GateStats& s) {
  return json{{"requests", s.requests},
              {"refusals", s.refusals},
              {"generations", s.generations},
              {"forward_passes", s.forward_passes},
              {"added_prompt_tokens", s.added_prompt_tokens},
              {"errors", s.errors},
              {"mean_latency_ms", s.mean_latency_ms}}
      .dump();
}

}  // namespace actgate::gate
