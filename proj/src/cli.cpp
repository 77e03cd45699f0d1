#include "mmcl/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <regex>

#include "mmcl/demo.hpp"
#include "mmcl/evaluate.hpp"
#include "mmcl/index.hpp"
#include "mmcl/report.hpp"
#include "mmcl/service.hpp"
#include "mmcl/train.hpp"

namespace mmcl {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct SynthesizeArgs {
  bool demo = false;
  std::string strategy;
  std::string manifest;
  std::string out;
  std::string backend;
  std::optional<double> corruption;
  double fidelity = 0.8;
  std::string endpoint;
  int timeout_ms = 30000;
  int retries = 2;
  std::uint64_t seed = 0;
};

struct PreprocessArgs {
  std::string manifest;
  std::string out;
  std::vector<std::string> notes;
};

struct TrainArgs {
  std::string config;
  std::string out;
  std::string manifest;
  std::string notes;
  std::string cache;
  std::string grid;
  bool image_only = false;
  std::optional<std::uint64_t> seed;
  int seeds = 1;
};

struct EvaluateArgs {
  std::vector<std::string> ckpt;
  std::string manifest;
  std::vector<std::string> notes;
  std::string tasks;
  std::optional<int> seeds;
  std::string report;
  std::string cache;
  std::string relevance = "class";
};

struct IndexArgs {
  std::string ckpt;
  std::string manifest;
  std::vector<std::string> notes;
  std::string cache;
  std::string out;
};

struct ServeArgs {
  std::string index;
  std::string ckpt;
  int port = 8000;
  std::string host = "127.0.0.1";
  std::string image_root;
  std::string cors_origin = "*";
};

struct ReportArgs {
  std::vector<std::string> reports;
  std::string json_out;
};

std::optional<fs::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

ImageStore make_store(const fs::path& manifest, const std::string& cache) {
  return ImageStore(manifest.parent_path(), optional_path(cache));
}

std::vector<ClinicalNote> load_all_notes(const std::vector<std::string>& paths, std::ostream& err) {
  std::vector<ClinicalNote> notes;
  for (const auto& p : paths) {
    SynthesisResult r = load_notes(p);
    if (!r.failures.empty()) {
      err << "warning: " << p << " lists " << r.failures.size() << " failed records without notes\n";
    }
    std::move(r.notes.begin(), r.notes.end(), std::back_inserter(notes));
  }
  return notes;
}

json file_entry(const fs::path& p) {
  return json{{"file", p.filename().string()}, {"sha256", sha256_hex(read_file(p))}};
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

int run_synthesize(const SynthesizeArgs& a, std::ostream& out, std::ostream& err) {
  if (a.demo) {
    if (a.out.empty()) throw UsageError("--demo needs --out <directory>");
    const Corpus c = write_demo_corpus(a.out, a.seed);
    out << "wrote demo corpus with " << c.size() << " records to " << a.out << "\n";
    return 0;
  }
  if (a.strategy.empty() || a.manifest.empty() || a.out.empty()) {
    throw UsageError("synthesize needs --strategy, --manifest and --out (or --demo)");
  }
  const auto strategy = parse_strategy(a.strategy);
  if (!strategy) throw UsageError("unknown strategy '" + a.strategy + "'");
  if (a.corruption && (*a.corruption < 0.0 || *a.corruption > 1.0)) {
    throw UsageError("--corruption must lie in [0, 1]");
  }
  std::string backend_name = a.backend;
  if (backend_name.empty()) backend_name = *strategy == Strategy::M ? "template" : "mock";

  std::unique_ptr<GenerationBackend> backend;
  if (backend_name == "template") {
    backend = std::make_unique<TemplateBackend>();
  } else if (backend_name == "mock") {
    MockBackendConfig mc;
    // The metadata-free strategy never sees the label, so by default the
    // mock asserts a random class.
    mc.corruption_rate = a.corruption.value_or(*strategy == Strategy::P3 ? 1.0 : 0.0);
    mc.attribute_fidelity = a.fidelity;
    backend = std::make_unique<MockBackend>(mc);
  } else if (backend_name == "remote") {
    std::string endpoint = a.endpoint;
    if (endpoint.empty()) {
      if (const char* env = std::getenv(kNoteEndpointEnv)) endpoint = env;
    }
    if (endpoint.empty()) {
      throw UsageError(std::string("remote backend needs --endpoint or ") + kNoteEndpointEnv);
    }
    backend = std::make_unique<RemoteBackend>(
        RemoteBackendConfig{endpoint, std::chrono::milliseconds(a.timeout_ms), ""});
  } else {
    throw UsageError("unknown backend '" + backend_name + "'");
  }

  const Corpus corpus = load_manifest(a.manifest);
  SynthesisOptions opts;
  opts.max_retries = a.retries;
  const SynthesisResult r = synthesize(corpus, *strategy, *backend, a.seed, opts);
  save_notes(r, a.out);
  out << "wrote " << r.notes.size() << " " << strategy_title(*strategy) << " notes to " << a.out << "\n";
  if (!r.failures.empty()) {
    err << "warning: " << r.failures.size() << " records failed generation and are listed in " << a.out << "\n";
  }
  return 0;
}

int run_preprocess(const PreprocessArgs& a, std::ostream& out, std::ostream& err) {
  const Corpus corpus = load_manifest(a.manifest);
  std::map<std::string, bool> truncation;
  for (const auto& note : load_all_notes(a.notes, err)) {
    const bool t = Tokenizer::builtin().encode(note.text).truncated;
    truncation[note.sample_id] = truncation[note.sample_id] || t;
  }
  const auto entries = write_preprocess_cache(corpus, fs::path(a.manifest).parent_path(), a.out, truncation);
  std::size_t fallbacks = 0;
  for (const auto& e : entries) {
    if (e.fallback) {
      ++fallbacks;
      err << "warning: " << e.sample_id << ": " << e.warning << "\n";
    }
  }
  out << "preprocessed " << entries.size() << " images into " << a.out << " (" << fallbacks << " fallbacks)\n";
  return 0;
}

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  if (a.image_only == !a.notes.empty()) throw UsageError("train needs exactly one of --notes or --image-only");
  if (a.seeds < 1) throw UsageError("--seeds must be at least 1");
  TrainConfig base = a.config.empty() ? TrainConfig{} : TrainConfig::load(a.config);
  if (a.seed) base.seed = *a.seed;
  std::vector<TrainConfig> configs{base};
  if (!a.grid.empty()) configs = expand_grid(base, json::parse(read_file(a.grid)));
  for (const auto& c : configs) c.validate();

  const Corpus corpus = load_manifest(a.manifest);
  std::vector<ClinicalNote> notes;
  if (!a.image_only) notes = load_all_notes({a.notes}, err);
  ImageStore store = make_store(a.manifest, a.cache);

  for (std::size_t g = 0; g < configs.size(); ++g) {
    const fs::path dir = configs.size() > 1 ? fs::path(a.out) / ("grid-" + std::to_string(g)) : fs::path(a.out);
    fs::create_directories(dir);
    if (configs.size() > 1) write_json(dir / "config.json", configs[g].to_json());
    for (int k = 0; k < a.seeds; ++k) {
      TrainConfig cfg = configs[g];
      cfg.seed = configs[g].seed + static_cast<std::uint64_t>(k);
      auto log = [&](const EpochRecord& r) {
        err << "seed " << cfg.seed << " epoch " << r.epoch << " loss " << r.loss << " val_kappa " << r.val_kappa;
        if (r.val_alignment) err << " val_alignment " << *r.val_alignment;
        err << "\n";
      };
      const TrainResult result =
          a.image_only ? train_image_only(corpus, cfg, store, log) : train(corpus, notes, cfg, store, log);
      const fs::path path = dir / ("model-seed" + std::to_string(cfg.seed) + ".ckpt");
      save_checkpoint(result.checkpoint, path);
      out << "wrote " << path.string() << " (best epoch " << result.best_epoch << ", val kappa "
          << result.history.at(static_cast<std::size_t>(result.best_epoch)).val_kappa << ")\n";
    }
  }
  return 0;
}

/// model-seed<k>.ckpt files in a directory, ordered by k.
std::vector<fs::path> seed_checkpoints(const fs::path& dir) {
  static const std::regex pattern(R"(model-seed(\d+)\.ckpt)");
  std::vector<std::pair<unsigned long long, fs::path>> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && std::regex_match(name, m, pattern)) {
      found.emplace_back(std::stoull(m[1].str()), entry.path());
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& [_, p] : found) out.push_back(std::move(p));
  return out;
}

int run_evaluate(const EvaluateArgs& a, std::ostream& out, std::ostream& err) {
  const auto relevance = parse_relevance(a.relevance);
  if (!relevance) throw UsageError("--relevance must be 'class' or 'pair'");
  std::vector<Task> tasks;
  if (!a.tasks.empty()) {
    for (const auto& name : split(a.tasks, ',')) {
      const auto t = parse_task(trim(name));
      if (!t) throw UsageError("unknown task '" + trim(name) + "'");
      if (std::find(tasks.begin(), tasks.end(), *t) == tasks.end()) tasks.push_back(*t);
    }
  }
  if (a.seeds && *a.seeds < 1) throw UsageError("--seeds must be at least 1");

  std::vector<fs::path> paths;
  for (const auto& c : a.ckpt) {
    if (fs::is_directory(c)) {
      const auto found = seed_checkpoints(c);
      if (found.empty()) throw Error("no model-seed<k>.ckpt files in " + c);
      paths.insert(paths.end(), found.begin(), found.end());
    } else {
      paths.emplace_back(c);
    }
  }
  if (a.seeds) {
    if (paths.size() < static_cast<std::size_t>(*a.seeds)) {
      throw Error("--seeds " + std::to_string(*a.seeds) + " requested but only " + std::to_string(paths.size()) +
                  " checkpoints were given");
    }
    paths.resize(static_cast<std::size_t>(*a.seeds));
  }
  if (paths.size() < 3) {
    err << "warning: aggregating over " << paths.size() << " checkpoint(s); fewer than 3 seeds\n";
  }

  const Corpus corpus = load_manifest(a.manifest);
  const auto notes = load_all_notes(a.notes, err);
  ImageStore store = make_store(a.manifest, a.cache);

  std::vector<std::vector<TaskResult>> runs;
  std::optional<std::string> strategy;
  json ckpts = json::array();
  for (const auto& p : paths) {
    const Checkpoint ckpt = load_checkpoint(p);
    const std::string s = ckpt.meta.value("strategy", std::string());
    if (strategy && *strategy != s) throw Error("checkpoints were trained with different strategies");
    strategy = s;
    std::vector<Task> run_tasks = tasks;
    if (run_tasks.empty()) {
      run_tasks.assign(kAllTasks.begin(), kAllTasks.end());
      if (!ckpt.model->has_text()) run_tasks = {Task::classify};
    }
    Evaluator ev(corpus, store, ckpt, notes, *relevance);
    std::vector<TaskResult> results;
    for (Task t : run_tasks) {
      auto r = ev.run(t);
      for (const auto& row : r) {
        if (row.excluded > 0) {
          err << "warning: " << row.task << " on " << row.dataset << " excluded " << row.excluded
              << " queries without relevant items\n";
        }
      }
      results.insert(results.end(), r.begin(), r.end());
    }
    runs.push_back(std::move(results));
    json entry = file_entry(p);
    entry["seed"] = ckpt.meta.value("seed", 0);
    ckpts.push_back(std::move(entry));
  }

  json meta;
  meta["format"] = "mmcl-eval-report";
  meta["version"] = 1;
  meta["strategy"] = *strategy;
  meta["relevance"] = a.relevance;
  meta["checkpoints"] = std::move(ckpts);
  meta["manifest"] = file_entry(a.manifest);
  json note_files = json::array();
  for (const auto& n : a.notes) note_files.push_back(file_entry(n));
  meta["notes"] = std::move(note_files);
  const json report = build_report(runs, meta);
  if (!a.report.empty()) write_json(a.report, report);
  out << compare_reports({report}).text;
  return 0;
}

int run_index(const IndexArgs& a, std::ostream& out, std::ostream& err) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const Corpus corpus = load_manifest(a.manifest);
  const auto notes = load_all_notes(a.notes, err);
  ImageStore store = make_store(a.manifest, a.cache);
  const EmbeddingIndex index = build_index(ckpt, checkpoint_hash(a.ckpt), corpus, store, notes);
  save_index(index, a.out);
  out << "wrote index of " << index.size() << " items to " << a.out << "\n";
  return 0;
}

int run_serve(const ServeArgs& a, std::ostream& out, std::ostream&) {
  if (a.port < 1 || a.port > 65535) throw UsageError("--port must be in 1..65535");
  ServiceOptions opts;
  opts.image_root = a.image_root;
  opts.cors_origin = a.cors_origin;
  IndexService service(load_index(a.index), load_checkpoint(a.ckpt), checkpoint_hash(a.ckpt), opts);
  out << "serving " << service.index().size() << " items on http://" << a.host << ":" << a.port << "\n"
      << std::flush;
  service.listen(a.host, a.port);
  return 0;
}

int run_report(const ReportArgs& a, std::ostream& out, std::ostream&) {
  std::vector<json> reports;
  for (const auto& p : a.reports) reports.push_back(json::parse(read_file(p)));
  const ComparisonTable table = compare_reports(reports);
  if (!a.json_out.empty()) write_json(a.json_out, table.data);
  out << table.text;
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal image-text co-learning pipeline", "mmcl"};
  app.require_subcommand(1);

  SynthesizeArgs sa;
  auto* syn = app.add_subcommand("synthesize", "Write the demo corpus or generate notes for a manifest");
  syn->add_flag("--demo", sa.demo, "Write the synthetic demo corpus to --out");
  syn->add_option("--strategy", sa.strategy, "M, M+P1, M+P2 or P3");
  syn->add_option("--manifest", sa.manifest, "Corpus manifest")->check(CLI::ExistingFile);
  syn->add_option("--out", sa.out, "Notes file, or corpus directory with --demo");
  syn->add_option("--backend", sa.backend, "template, mock or remote");
  syn->add_option("--corruption", sa.corruption, "Mock label corruption rate (default 1.0 for P3, else 0)");
  syn->add_option("--fidelity", sa.fidelity, "Mock attribute fidelity")->check(CLI::Range(0.0, 1.0));
  syn->add_option("--endpoint", sa.endpoint, std::string("Remote endpoint (default $") + kNoteEndpointEnv + ")");
  syn->add_option("--timeout-ms", sa.timeout_ms, "Remote request timeout")->check(CLI::PositiveNumber);
  syn->add_option("--retries", sa.retries, "Retries per record")->check(CLI::NonNegativeNumber);
  syn->add_option("--seed", sa.seed, "Global seed");

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Crop and resize every image into a cache directory");
  pre->add_option("--manifest", pa.manifest, "Corpus manifest")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", pa.out, "Cache directory")->required();
  pre->add_option("--notes", pa.notes, "Notes files whose truncation flags are recorded")->check(CLI::ExistingFile);

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a multimodal or image-only model");
  tr->add_option("--config", ta.config, "JSON training config")->check(CLI::ExistingFile);
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_option("--manifest", ta.manifest, "Corpus manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--notes", ta.notes, "Notes file of one strategy")->check(CLI::ExistingFile);
  tr->add_option("--cache", ta.cache, "Preprocessed image cache")->check(CLI::ExistingDirectory);
  tr->add_option("--grid", ta.grid, "JSON object of key -> value list to sweep")->check(CLI::ExistingFile);
  tr->add_flag("--image-only", ta.image_only, "Train the image baseline");
  tr->add_option("--seed", ta.seed, "Overrides the config seed");
  tr->add_option("--seeds", ta.seeds, "Train consecutive seeds starting at the config seed");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Evaluate checkpoints on the test split");
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint files or directories of model-seed<k>.ckpt")
      ->required()
      ->check(CLI::ExistingPath);
  ev->add_option("--manifest", ea.manifest, "Corpus manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--notes", ea.notes, "Notes files (all strategies for retrieve-notes)")->check(CLI::ExistingFile);
  ev->add_option("--tasks", ea.tasks, "Comma list: classify,retrieve-notes,retrieve-images,alignment");
  ev->add_option("--seeds", ea.seeds, "Number of checkpoints to aggregate");
  ev->add_option("--report", ea.report, "Write the JSON report here");
  ev->add_option("--cache", ea.cache, "Preprocessed image cache")->check(CLI::ExistingDirectory);
  ev->add_option("--relevance", ea.relevance, "class or pair");

  IndexArgs ia;
  auto* ix = app.add_subcommand("index", "Build a retrieval index");
  ix->add_option("--ckpt", ia.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ix->add_option("--manifest", ia.manifest, "Corpus manifest")->required()->check(CLI::ExistingFile);
  ix->add_option("--notes", ia.notes, "Notes files to index")->check(CLI::ExistingFile);
  ix->add_option("--cache", ia.cache, "Preprocessed image cache")->check(CLI::ExistingDirectory);
  ix->add_option("--out", ia.out, "Index file")->required();

  ServeArgs va;
  auto* sv = app.add_subcommand("serve", "Serve the retrieval API");
  sv->add_option("--index", va.index, "Index file")->required()->check(CLI::ExistingFile);
  sv->add_option("--ckpt", va.ckpt, "Checkpoint the index was built with")->required()->check(CLI::ExistingFile);
  sv->add_option("--port", va.port, "TCP port");
  sv->add_option("--host", va.host, "Bind address");
  sv->add_option("--image-root", va.image_root, "Directory image_ref paths resolve against")
      ->check(CLI::ExistingDirectory);
  sv->add_option("--cors-origin", va.cors_origin, "Allowed browser origin");

  ReportArgs ra;
  auto* rp = app.add_subcommand("report", "Compare evaluation reports side by side");
  rp->add_option("reports", ra.reports, "Report files")->required()->check(CLI::ExistingFile);
  rp->add_option("--json", ra.json_out, "Write the machine-readable table here");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (syn->parsed()) return run_synthesize(sa, out, err);
    if (pre->parsed()) return run_preprocess(pa, out, err);
    if (tr->parsed()) return run_train(ta, out, err);
    if (ev->parsed()) return run_evaluate(ea, out, err);
    if (ix->parsed()) return run_index(ia, out, err);
    if (sv->parsed()) return run_serve(va, out, err);
    if (rp->parsed()) return run_report(ra, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + std::min(argc, 1), argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace mmcl
