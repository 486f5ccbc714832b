#include "actgate/cli.hpp"

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "actgate/error.hpp"
#include "actgate/features.hpp"
#include "actgate/gate.hpp"
#include "actgate/refmodel.hpp"
#include "actgate/server.hpp"
#include "actgate/store.hpp"
#include "actgate/svm.hpp"
#include "actgate/sweep.hpp"
#include "json.hpp"

namespace actgate::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

std::optional<double> parse_gamma(const std::string& text) {
  if (text == "scale") return std::nullopt;
  try {
    std::size_t used = 0;
    const double g = std::stod(text, &used);
    if (used != text.size() || !(g > 0.0)) throw Error("");
    return g;
  } catch (const std::exception&) {
    throw Error("--gamma must be 'scale' or a positive number, got '" + text + "'");
  }
}

std::vector<int> parse_layers(const std::string& text) {
  if (text == "all") return {};
  std::vector<int> layers;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      layers.push_back(std::stoi(item, &used));
      if (used != item.size()) throw Error("");
    } catch (const std::exception&) {
      throw Error("--layers must be 'all' or a comma-separated list, got '" + text + "'");
    }
  }
  if (layers.empty()) throw Error("--layers is empty");
  return layers;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::string layer_file(int layer, std::string_view ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "layer_%02d.%s", layer, std::string(ext).c_str());
  return buf;
}

std::string decision_json(const gate::GateDecision& d) {
  return json{{"verdict", gate::verdict_name(d.verdict)},
              {"score", d.score},
              {"action", gate::action_name(d.action)},
              {"text", d.text},
              {"new_tokens", d.new_tokens},
              {"forward_passes", d.forward_passes},
              {"added_prompt_tokens", d.added_prompt_tokens},
              {"latency_ms", d.latency_ms}}
      .dump(-1, ' ', false, json::error_handler_t::replace);
}

struct SvmFlags {
  double C = 1.0;
  std::string gamma = "scale";
  double tol = 1e-3;
  std::int64_t max_iter = 0;

  void add(CLI::App* app) {
    app->add_option("--C", C, "Soft-margin penalty")->capture_default_str();
    app->add_option("--gamma", gamma, "'scale' or a positive kernel width")->capture_default_str();
    app->add_option("--tol", tol, "KKT violation tolerance")->capture_default_str();
    app->add_option("--max-iter", max_iter, "SMO pair updates (0 = 10 n^2, capped)");
  }
  svm::SvmConfig config() const {
    svm::SvmConfig c;
    c.C = C;
    c.gamma = parse_gamma(gamma);
    c.tol = tol;
    c.max_iter = max_iter;
    return c;
  }
};

struct TinyFlags {
  refmodel::ModelConfig model;
  std::string truncate = "first";

  void add(CLI::App* app) {
    app->add_option("--seed", model.seed, "Weight seed")->capture_default_str();
    app->add_option("--layers", model.num_layers, "Transformer blocks")->capture_default_str();
    app->add_option("--hidden-dim", model.hidden_dim, "Hidden dimension")->capture_default_str();
    app->add_option("--heads", model.num_heads, "Attention heads")->capture_default_str();
    app->add_option("--ffn", model.ffn_dim, "Feed-forward width")->capture_default_str();
    app->add_option("--max-len", model.max_len, "Maximum prompt tokens")->capture_default_str();
    app->add_option("--context", model.context_len, "Prompt + generated positions")
        ->capture_default_str();
    app->add_option("--truncate", truncate, "Keep the first or last max-len tokens")
        ->check(CLI::IsMember({"first", "last"}))
        ->capture_default_str();
  }
};

refmodel::Truncation truncation_from(const std::string& s) {
  return s == "last" ? refmodel::Truncation::kKeepLast : refmodel::Truncation::kKeepFirst;
}

store::ActivationDataset extract_tiny(const fs::path& manifest, const TinyFlags& flags) {
  const refmodel::Model model(flags.model);
  std::ifstream in(manifest);
  if (!in) throw Error("cannot open manifest '" + manifest.string() + "'");
  store::ActivationDataset ds;
  ds.model_id = flags.model.model_id();
  ds.num_layers = static_cast<std::uint32_t>(flags.model.num_layers);
  ds.hidden_dim = static_cast<std::uint32_t>(flags.model.hidden_dim);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const json::parse_error&) {
      throw Error("manifest line " + std::to_string(line_no) + ": malformed JSON");
    }
    if (!row.is_object() || !row.contains("id") || !row.contains("text") ||
        !row.contains("category") || !row["id"].is_number_integer() || !row["text"].is_string() ||
        !row["category"].is_string()) {
      throw Error("manifest line " + std::to_string(line_no) +
                  ": expected {\"id\": int, \"text\": str, \"category\": str}");
    }
    const auto tokens = refmodel::tokenize(row["text"].get<std::string>(), flags.model.max_len,
                                           truncation_from(flags.truncate));
    ds.records.push_back(store::make_record(
        row["id"].get<std::uint64_t>(), store::parse_category(row["category"].get<std::string>()),
        refmodel::stacked_last_tokens(model.forward(tokens))));
  }
  return ds;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Activation-space jailbreak detection and gating"};
  app.name("actgate");
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Write a seeded two-class Gaussian ACTV fixture");
  store::SynthConfig synth_cfg;
  std::string synth_out;
  synth->add_option("--out", synth_out, "Output ACTV file")->required();
  synth->add_option("--per-class", synth_cfg.n_per_class)->capture_default_str();
  synth->add_option("--layers", synth_cfg.num_layers)->capture_default_str();
  synth->add_option("--hidden-dim", synth_cfg.hidden_dim)->capture_default_str();
  synth->add_option("--separation", synth_cfg.separation)->capture_default_str();
  synth->add_option("--signal-from", synth_cfg.signal_from_layer)->capture_default_str();
  synth->add_option("--seed", synth_cfg.seed)->capture_default_str();

  // extract
  auto* extract = app.add_subcommand("extract", "Per-layer last-token activations for a manifest");
  std::string extract_backend = "tiny";
  std::string manifest;
  std::string extract_out;
  TinyFlags tiny;
  extract->add_option("--backend", extract_backend, "Activation producer")
      ->check(CLI::IsMember({"tiny"}))
      ->capture_default_str();
  extract->add_option("--manifest", manifest, "JSONL rows {id, text, category}")->required();
  extract->add_option("--out", extract_out, "Output ACTV file")->required();
  tiny.add(extract);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Assemble a framed activation stream into ACTV");
  std::string ingest_in = "-";
  std::string ingest_out;
  ingest->add_option("--in", ingest_in, "Framed stream file, '-' for stdin")->capture_default_str();
  ingest->add_option("--out", ingest_out, "Output ACTV file")->required();

  // train
  auto* train = app.add_subcommand("train", "Train the scaler + RBF-SVM pipeline at one layer");
  std::string train_data;
  std::string train_out;
  int train_layer = 0;
  bool train_exclude_direct = false;
  std::string train_created_at;
  SvmFlags train_svm;
  train->add_option("--data", train_data, "ACTV dataset")->required();
  train->add_option("--layer", train_layer, "Layer index")->required();
  train->add_option("--out", train_out, "Model JSON")->required();
  train->add_flag("--exclude-direct", train_exclude_direct, "Drop direct-malicious prompts");
  train->add_option("--created-at", train_created_at, "Timestamp recorded in the model");
  train_svm.add(train);

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate one classifier per layer");
  std::string sweep_data;
  std::string sweep_out;
  std::string sweep_layers = "all";
  sweep::SweepConfig sweep_cfg;
  SvmFlags sweep_svm;
  bool sweep_exclude_direct = false;
  sweep_cmd->add_option("--data", sweep_data, "ACTV dataset")->required();
  sweep_cmd->add_option("--out", sweep_out, "Output directory")->required();
  sweep_cmd->add_option("--layers", sweep_layers, "'all' or comma-separated")->capture_default_str();
  sweep_cmd->add_option("--test-fraction", sweep_cfg.test_fraction)->capture_default_str();
  sweep_cmd->add_option("--seed", sweep_cfg.split_seed, "Split seed")->capture_default_str();
  sweep_cmd->add_option("--threads", sweep_cfg.threads, "0 = all cores")->capture_default_str();
  sweep_cmd->add_flag("--exclude-direct", sweep_exclude_direct, "Drop direct-malicious prompts");
  sweep_cmd->add_option("--created-at", sweep_cfg.created_at, "Timestamp recorded in models");
  sweep_svm.add(sweep_cmd);

  // project
  auto* project = app.add_subcommand("project", "Standardize, PCA and t-SNE each layer to 2-D CSV");
  std::string project_data;
  std::string project_out;
  std::string project_layers = "all";
  std::string project_lr = "auto";
  features::ProjectionConfig proj_cfg;
  project->add_option("--data", project_data, "ACTV dataset")->required();
  project->add_option("--out", project_out, "Output directory")->required();
  project->add_option("--layers", project_layers)->capture_default_str();
  project->add_option("--pca-dims", proj_cfg.pca_dims)->capture_default_str();
  project->add_option("--perplexity", proj_cfg.perplexity)->capture_default_str();
  project->add_option("--iterations", proj_cfg.iterations)->capture_default_str();
  project->add_option("--seed", proj_cfg.seed)->capture_default_str();
  project->add_option("--learning-rate", project_lr, "'auto' or a positive number")
      ->capture_default_str();

  // serve / classify share gate flags
  auto add_gate_flags = [](CLI::App* cmd, std::string& model, std::string& backend,
                           gate::GateConfig& cfg, std::string& truncate) {
    cmd->add_option("--model", model, "Model JSON (e.g. best.json)")->required();
    cmd->add_option("--backend", backend, "tiny | external-activation")
        ->check(CLI::IsMember({"tiny", "external-activation", "external"}))
        ->capture_default_str();
    cmd->add_option("--refusal", cfg.refusal_text, "Refusal text")->capture_default_str();
    cmd->add_option("--max-new-tokens", cfg.max_new_tokens)->capture_default_str();
    cmd->add_option("--truncate", truncate)->check(CLI::IsMember({"first", "last"}))
        ->capture_default_str();
  };

  auto* serve = app.add_subcommand("serve", "Line-delimited JSON gate over TCP or stdio");
  std::string serve_model;
  std::string serve_backend = "tiny";
  std::string serve_truncate = "first";
  gate::GateConfig serve_cfg;
  std::optional<int> serve_port;
  std::string serve_host = "127.0.0.1";
  add_gate_flags(serve, serve_model, serve_backend, serve_cfg, serve_truncate);
  serve->add_option("--port", serve_port, "TCP port; omit to serve standard streams");
  serve->add_option("--host", serve_host)->capture_default_str();

  auto* classify = app.add_subcommand("classify", "Gate one prompt and print the decision");
  std::string classify_model;
  std::string classify_backend = "tiny";
  std::string classify_truncate = "first";
  gate::GateConfig classify_cfg;
  std::string classify_prompt;
  std::string classify_activation;
  add_gate_flags(classify, classify_model, classify_backend, classify_cfg, classify_truncate);
  auto* prompt_opt = classify->add_option("--prompt", classify_prompt, "Prompt text");
  auto* act_opt = classify->add_option("--activation", classify_activation,
                                       "JSON array with a precomputed activation");
  prompt_opt->excludes(act_opt);

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.push_back("actgate");
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) {
      const auto ds = store::synth_clusters(synth_cfg);
      const auto n = store::write_dataset(ds, fs::path(synth_out));
      out << "wrote " << n << " records to " << synth_out << "\n";
    } else if (*extract) {
      tiny.model.validate();
      const auto ds = extract_tiny(manifest, tiny);
      const auto n = store::write_dataset(ds, fs::path(extract_out));
      out << "wrote " << n << " records (" << ds.num_layers << " layers, d=" << ds.hidden_dim
          << ") to " << extract_out << "\n";
    } else if (*ingest) {
      store::ActivationDataset ds;
      if (ingest_in == "-") {
        ds = store::ingest_stream(std::cin);
      } else {
        std::ifstream in(ingest_in, std::ios::binary);
        if (!in) throw Error("cannot open '" + ingest_in + "'");
        ds = store::ingest_stream(in);
      }
      const auto n = store::write_dataset(ds, fs::path(ingest_out));
      out << "wrote " << n << " records to " << ingest_out << "\n";
    } else if (*train) {
      auto ds = store::read_dataset(fs::path(train_data));
      if (train_exclude_direct) {
        std::erase_if(ds.records,
                      [](const auto& r) { return r.category == store::Category::kMalicious; });
      }
      const auto m = store::select_layer(ds, train_layer);
      auto model = svm::fit_pipeline(m.X, m.y, train_svm.config());
      model.layer = train_layer;
      model.model_id = ds.model_id;
      model.created_at = train_created_at;
      svm::save_model(model, fs::path(train_out));
      out << "layer " << train_layer << ": " << model.support_vectors.rows()
          << " support vectors, gamma=" << model.gamma
          << (model.converged ? "" : " (warning: SMO hit max_iter before KKT tolerance)") << "\n";
      if (!model.converged) err << "warning: SMO did not converge within max_iter\n";
    } else if (*sweep_cmd) {
      const auto ds = store::read_dataset(fs::path(sweep_data));
      sweep_cfg.layers = parse_layers(sweep_layers);
      sweep_cfg.svm = sweep_svm.config();
      sweep_cfg.include_direct = !sweep_exclude_direct;
      const auto result = sweep::sweep_layers(ds, sweep_cfg);
      const fs::path dir(sweep_out);
      ensure_dir(dir);
      write_text(dir / "report.csv", sweep::emit_report(result, sweep::ReportFormat::kCsv));
      write_text(dir / "report.md", sweep::emit_report(result, sweep::ReportFormat::kMarkdown));
      for (const auto& model : result.models) {
        svm::save_model(model, dir / layer_file(model.layer, "json"));
        if (model.layer == result.selected_layer) svm::save_model(model, dir / "best.json");
        if (!model.converged) err << "warning: layer " << model.layer << " hit max_iter\n";
      }
      out << "selected layer " << result.selected_layer << " ("
          << sweep::format_accuracy(*std::find_if(result.reports.begin(), result.reports.end(),
                                                  [&](const auto& r) {
                                                    return r.layer == result.selected_layer;
                                                  }))
          << "), " << result.protocol() << ", reports in " << sweep_out << "\n";
    } else if (*project) {
      const auto ds = store::read_dataset(fs::path(project_data));
      if (project_lr != "auto") {
        try {
          proj_cfg.learning_rate = std::stod(project_lr);
        } catch (const std::exception&) {
          throw Error("--learning-rate must be 'auto' or a number");
        }
      }
      auto layers = parse_layers(project_layers);
      if (layers.empty()) {
        for (std::uint32_t l = 0; l < ds.num_layers; ++l) layers.push_back(static_cast<int>(l));
      }
      const fs::path dir(project_out);
      ensure_dir(dir);
      for (int layer : layers) {
        const auto m = store::select_layer(ds, layer);
        const auto scaled = features::transform(features::fit_scaler(m.X), m.X);
        const auto emb = features::tsne(scaled, proj_cfg);
        std::ostringstream csv;
        csv << "prompt_id,category,x,y\n";
        char buf[64];
        for (std::size_t i = 0; i < ds.records.size(); ++i) {
          const auto r = static_cast<Eigen::Index>(i);
          csv << ds.records[i].prompt_id << ',' << store::category_name(ds.records[i].category);
          std::snprintf(buf, sizeof buf, ",%.9g,%.9g\n", emb.coords(r, 0), emb.coords(r, 1));
          csv << buf;
        }
        write_text(dir / layer_file(layer, "csv"), csv.str());
        out << "layer " << layer << ": KL " << emb.initial_kl << " -> " << emb.final_kl << "\n";
      }
    } else if (*serve) {
      serve_cfg.model_file = serve_model;
      serve_cfg.backend = gate::parse_backend(serve_backend);
      serve_cfg.truncation = truncation_from(serve_truncate);
      gate::Gate g(serve_cfg);
      if (serve_port) {
        if (*serve_port < 0 || *serve_port > 65535) throw Error("--port must lie in [0, 65535]");
        gate::TcpServer server(g, static_cast<std::uint16_t>(*serve_port), serve_host);
        g_stop = false;
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        err << "listening on " << serve_host << ":" << server.port() << "\n";
        server.run(&g_stop);
      } else {
        gate::serve_stream(g, std::cin, out);
      }
      err << "stats " << gate::stats_json(g.stats()) << "\n";
    } else if (*classify) {
      classify_cfg.model_file = classify_model;
      classify_cfg.backend = gate::parse_backend(classify_backend);
      classify_cfg.truncation = truncation_from(classify_truncate);
      gate::Gate g(classify_cfg);
      gate::GateDecision d;
      if (!classify_activation.empty()) {
        json a;
        try {
          a = json::parse(classify_activation);
        } catch (const json::parse_error&) {
          throw Error("--activation must be a JSON array of numbers");
        }
        if (!a.is_array()) throw Error("--activation must be a JSON array of numbers");
        d = g.guard_activation(a.get<std::vector<double>>());
      } else if (!classify_prompt.empty()) {
        d = g.guard_generate(classify_prompt);
      } else {
        throw Error("classify needs --prompt or --activation");
      }
      out << decision_json(d) << "\n";
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace actgate::cli
