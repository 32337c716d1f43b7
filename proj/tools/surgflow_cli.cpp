// surgflow command line: simulate, train, run, evaluate, report.
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "surgflow/surgflow.hpp"

using namespace surgflow;

namespace {

// Exit 2: bad flags, bad config, missing or unreadable inputs.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Settings {
  std::string config_path;
  std::vector<std::string> sets;
  json flags = json::object();

  json resolve() const {
    json j = json::object();
    if (!config_path.empty()) {
      try {
        j = json::parse(read_text_file(config_path));
      } catch (const json::exception& e) {
        throw UsageError("config " + config_path + ": " + e.what());
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      if (!j.is_object()) throw UsageError("config " + config_path + " is not a JSON object");
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
      const std::string key = s.substr(0, eq), val = s.substr(eq + 1);
      try {
        j[key] = json::parse(val);
      } catch (const json::exception&) {
        j[key] = val;
      }
    }
    for (const auto& [k, v] : flags.items()) j[k] = v;
    return j;
  }
};

void add_common(CLI::App* app, Settings& s) {
  app->add_option("--config", s.config_path, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--set", s.sets, "override a config key: key=value (value parsed as JSON when possible)");
}

// Moves the named keys out of `j`; what is left must be pipeline keys.
json take(json& j, std::initializer_list<const char*> keys) {
  json out = json::object();
  for (const char* k : keys) {
    if (j.contains(k)) {
      out[k] = j[k];
      j.erase(k);
    }
  }
  return out;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config key '") + key + "': " + e.what());
  }
}

std::string need(const json& j, const char* key) {
  const auto v = get_or<std::string>(j, key, "");
  if (v.empty()) throw UsageError(std::string("missing required setting '") + key + "'");
  return v;
}

PipelineConfig pipeline_config(const json& rest) {
  try {
    return config_from_json(rest);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

template <class F>
auto as_usage(F&& f) {
  try {
    return f();
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Settings& s) {
  json j = s.resolve();
  const json own = take(j, {"spec", "n", "seed", "out"});
  if (!j.empty()) throw UsageError("unknown simulate setting '" + j.begin().key() + "'");
  const auto spec_name = get_or<std::string>(own, "spec", "clean");
  const auto n = get_or<std::size_t>(own, "n", 30);
  const auto seed = get_or<std::uint64_t>(own, "seed", 7);
  const auto out = need(own, "out");
  const GenerativeSpec spec = as_usage([&] {
    if (spec_name == "clean" || spec_name == "noisy") return bundled_spec(spec_name);
    if (!std::filesystem::exists(spec_name)) {
      throw UsageError("spec '" + spec_name + "' is neither a bundled spec nor an existing file");
    }
    try {
      return spec_from_json(json::parse(read_text_file(spec_name)));
    } catch (const json::exception& e) {
      throw UsageError("spec " + spec_name + ": " + e.what());
    }
  });
  if (n == 0) throw UsageError("n must be positive");
  const Dataset ds = generate_dataset(spec, n, seed);
  write_dataset(ds, out);
  std::printf("wrote %zu surgeries to %s\n", ds.surgeries.size(), out.c_str());
  return 0;
}

int cmd_train(const Settings& s) {
  json j = s.resolve();
  const json own = take(j, {"data", "out", "train_ids"});
  const PipelineConfig cfg = pipeline_config(j);
  const auto data = need(own, "data");
  const auto out = need(own, "out");
  const Dataset ds = as_usage([&] { return load_dataset(data); });
  if (ds.surgeries.empty()) throw UsageError("dataset " + data + " has no surgeries");
  const auto ids = get_or<std::vector<std::string>>(own, "train_ids", ds.ids());
  const auto train = as_usage([&] { return training_set(ds, ids, cfg.window); });
  const TrainedModels m = train_models(ds.taxonomy, train, cfg);
  save_models(m, out);
  std::string log;
  if (m.step_crf_trace) log += "# steps\n" + lbfgs_trace_csv(*m.step_crf_trace);
  if (m.phase_crf_trace) log += "# phases\n" + lbfgs_trace_csv(*m.phase_crf_trace);
  if (!log.empty()) {
    write_text_file(std::filesystem::path(out) / "training_log.csv", log);
    std::fputs(log.c_str(), stdout);
  }
  std::printf("trained %s on %zu surgeries into %s\n", to_string(cfg.kind), train.size(), out.c_str());
  return 0;
}

bool emit_line(const std::string& line) {
  if (std::fwrite(line.data(), 1, line.size(), stdout) != line.size()) return false;
  if (std::fputc('\n', stdout) == EOF) return false;
  return std::fflush(stdout) == 0;
}

int cmd_run(const Settings& s, bool no_latency) {
  json j = s.resolve();
  const json own = take(j, {"models", "input"});
  if (!j.empty()) throw UsageError("unknown run setting '" + j.begin().key() + "'");
  const auto dir = need(own, "models");
  const auto input = get_or<std::string>(own, "input", "-");
  const TrainedModels m = as_usage([&] { return load_models(dir); });
  std::ifstream file;
  if (input != "-") {
    file.open(input);
    if (!file) throw UsageError("cannot open input " + input);
  }
  std::istream& in = input == "-" ? std::cin : file;
  std::signal(SIGPIPE, SIG_IGN);
  Pipeline p(m);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json rec;
    try {
      const auto t0 = std::chrono::steady_clock::now();
      const ObservationRecord obs = parse_observation_line(line, m.taxonomy);
      const StepPhasePosterior post = p.consume_window(obs);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      rec = posterior_to_json(post, no_latency ? std::nullopt : std::optional<double>(ms));
    } catch (const Error& e) {
      rec = {{"error", e.what()}, {"line", line_no}};
    }
    if (!emit_line(rec.dump())) return 0;  // reader went away
  }
  return 0;
}

int cmd_evaluate(const Settings& s) {
  json j = s.resolve();
  const json own = take(j, {"data", "out", "pipelines", "folds", "split_seed", "grid", "svg", "throughput"});
  const PipelineConfig base = pipeline_config(j);
  const auto data = need(own, "data");
  const auto out = need(own, "out");
  const auto kinds = get_or<std::vector<std::string>>(own, "pipelines", {"bn_crf", "bn_hmm", "hhmm"});
  const auto folds = get_or<std::size_t>(own, "folds", 6);
  const auto split_seed = get_or<std::uint64_t>(own, "split_seed", 1);
  const bool svg = get_or<bool>(own, "svg", false);
  const bool throughput = get_or<bool>(own, "throughput", true);
  std::optional<GridSearchSpec> grid;
  if (own.contains("grid") && !own["grid"].is_null()) {
    grid = as_usage([&] {
      const json& g = own["grid"];
      if (g.is_string()) {
        try {
          return grid_spec_from_json(json::parse(read_text_file(g.get<std::string>())));
        } catch (const json::exception& e) {
          throw UsageError("grid file: " + std::string(e.what()));
        }
      }
      return grid_spec_from_json(g);
    });
  }
  std::vector<PipelineConfig> cfgs;
  for (const auto& k : kinds) {
    PipelineConfig c = base;
    c.kind = as_usage([&] { return pipeline_kind_from_string(k); });
    cfgs.push_back(c);
  }
  if (cfgs.empty()) throw UsageError("no pipelines to evaluate");
  const Dataset ds = as_usage([&] { return load_dataset(data); });
  const FoldSplit split = as_usage([&] { return kfold_split(ds.ids(), folds, split_seed); });

  const auto results = grid ? evaluate_with_grid(ds, cfgs, split, *grid) : evaluate_pipelines(ds, cfgs, split);

  std::vector<std::optional<double>> fps(results.size());
  if (throughput) {
    const auto train = training_set(ds, split.train_ids(0), base.window);
    const auto test = training_set(ds, split.test_ids(0), base.window);
    const auto longest = std::max_element(test.begin(), test.end(), [](const auto& a, const auto& b) {
      return a.windows.size() < b.windows.size();
    });
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
      fps[i] = measure_throughput(train_models(ds.taxonomy, train, cfgs[i]), longest->windows).frames_per_second;
    }
  }

  std::filesystem::create_directories(out);
  json doc{{"format", "surgflow-evaluation/1"},
           {"taxonomy", format_taxonomy(ds.taxonomy)},
           {"folds", folds},
           {"split_seed", split_seed},
           {"results", json::array()}};
  std::string fold_csv = "pipeline,source,fold,az_steps,az_phases,az_mean\n";
  std::string label_csv;
  char buf[160];
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    json jr = evaluation_to_json(r, ds.taxonomy);
    jr["frames_per_second"] = fps[i] ? json(*fps[i]) : json(nullptr);
    doc["results"].push_back(jr);
    for (std::size_t f = 0; f < r.folds.size(); ++f) {
      std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.6f,%.6f,%.6f\n", to_string(r.config.kind),
                    to_string(r.config.source), f, r.folds[f].az_steps, r.folds[f].az_phases, r.folds[f].az_mean);
      fold_csv += buf;
    }
    const std::string rows = per_label_csv(r, ds.taxonomy);
    label_csv += label_csv.empty() ? rows : rows.substr(rows.find('\n') + 1);
    if (svg) {
      for (std::size_t f = 0; f < r.folds.size(); ++f) {
        const std::string stem = std::string(to_string(r.config.kind)) + "_fold" + std::to_string(f);
        write_text_file(std::filesystem::path(out) / (stem + "_steps.svg"),
                        roc_svg(r.folds[f].step_curves, stem + " steps"));
        write_text_file(std::filesystem::path(out) / (stem + "_phases.svg"),
                        roc_svg(r.folds[f].phase_curves, stem + " phases"));
      }
    }
  }
  const std::string table = markdown_table(results, fps);
  write_text_file(std::filesystem::path(out) / "evaluation.json", doc.dump(1) + "\n");
  write_text_file(std::filesystem::path(out) / "folds.csv", fold_csv);
  write_text_file(std::filesystem::path(out) / "per_label.csv", label_csv);
  write_text_file(std::filesystem::path(out) / "table.md", table);
  std::fputs(table.c_str(), stdout);
  return 0;
}

int cmd_report(const std::string& in, const std::string& out) {
  json doc;
  try {
    doc = json::parse(read_text_file(in));
  } catch (const json::exception& e) {
    throw UsageError(in + ": " + e.what());
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (doc.value("format", "") != "surgflow-evaluation/1") throw UsageError(in + " is not an evaluation file");
  std::vector<EvaluationResult> results;
  std::vector<std::optional<double>> fps;
  as_usage([&] {
    const Taxonomy tax = parse_taxonomy(doc.at("taxonomy").get<std::string>());
    for (const auto& r : doc.at("results")) {
      results.push_back(evaluation_from_json(r, tax));
      const auto& f = r.at("frames_per_second");
      fps.push_back(f.is_null() ? std::nullopt : std::optional<double>(f.get<double>()));
    }
    return 0;
  });
  const std::string table = markdown_table(results, fps);
  if (out.empty()) std::fputs(table.c_str(), stdout);
  else write_text_file(out, table);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online recognition of surgical phases and steps"};
  app.require_subcommand(1);

  Settings sim;
  auto* c_sim = app.add_subcommand("simulate", "generate a synthetic dataset");
  add_common(c_sim, sim);
  std::string spec, out_sim;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  c_sim->add_option("--spec", spec, "bundled spec (clean, noisy) or spec JSON file");
  c_sim->add_option("--n", n, "number of surgeries");
  c_sim->add_option("--seed", seed, "generator seed");
  c_sim->add_option("--out", out_sim, "output dataset directory");

  Settings tr;
  auto* c_tr = app.add_subcommand("train", "train the models of one pipeline");
  add_common(c_tr, tr);
  std::string data_tr, out_tr, kind_tr, source_tr;
  c_tr->add_option("--data", data_tr, "dataset directory");
  c_tr->add_option("--out", out_tr, "model directory to write");
  c_tr->add_option("--kind", kind_tr, "bn_hmm, bn_hmm_feedback, bn_crf or hhmm");
  c_tr->add_option("--source", source_tr, "tools or motion_knn");

  Settings rn;
  auto* c_rn = app.add_subcommand("run", "stream JSONL observations through trained models");
  add_common(c_rn, rn);
  std::string models_rn, input_rn;
  bool no_latency = false;
  c_rn->add_option("--models", models_rn, "model directory");
  c_rn->add_option("--input", input_rn, "observation JSONL file (default: standard input)");
  c_rn->add_flag("--no-latency", no_latency, "write null latency fields");

  Settings ev;
  auto* c_ev = app.add_subcommand("evaluate", "cross-validate pipelines and write reports");
  add_common(c_ev, ev);
  std::string data_ev, out_ev, source_ev, grid_ev;
  std::vector<std::string> pipelines;
  std::size_t folds = 0;
  std::uint64_t split_seed = 0;
  bool svg = false, no_throughput = false;
  c_ev->add_option("--data", data_ev, "dataset directory");
  c_ev->add_option("--out", out_ev, "report directory");
  c_ev->add_option("--pipelines", pipelines, "pipeline kinds to compare")->delimiter(',');
  c_ev->add_option("--source", source_ev, "tools or motion_knn");
  c_ev->add_option("--folds", folds, "number of folds");
  c_ev->add_option("--split-seed", split_seed, "fold shuffle seed");
  c_ev->add_option("--grid", grid_ev, "grid search spec JSON file");
  c_ev->add_flag("--svg", svg, "write ROC curves as SVG");
  c_ev->add_flag("--no-throughput", no_throughput, "skip the frames-per-second measurement");

  auto* c_rp = app.add_subcommand("report", "render an evaluation file as a Markdown table");
  std::string in_rp, out_rp;
  c_rp->add_option("--in", in_rp, "evaluation.json written by evaluate")->required();
  c_rp->add_option("--out", out_rp, "write the table here instead of standard output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto flag = [](Settings& s, const char* key, const auto& v, bool given) {
    if (given) s.flags[key] = v;
  };
  try {
    if (*c_sim) {
      flag(sim, "spec", spec, c_sim->count("--spec") > 0);
      flag(sim, "n", n, c_sim->count("--n") > 0);
      flag(sim, "seed", seed, c_sim->count("--seed") > 0);
      flag(sim, "out", out_sim, c_sim->count("--out") > 0);
      return cmd_simulate(sim);
    }
    if (*c_tr) {
      flag(tr, "data", data_tr, c_tr->count("--data") > 0);
      flag(tr, "out", out_tr, c_tr->count("--out") > 0);
      flag(tr, "kind", kind_tr, c_tr->count("--kind") > 0);
      flag(tr, "source", source_tr, c_tr->count("--source") > 0);
      return cmd_train(tr);
    }
    if (*c_rn) {
      flag(rn, "models", models_rn, c_rn->count("--models") > 0);
      flag(rn, "input", input_rn, c_rn->count("--input") > 0);
      return cmd_run(rn, no_latency);
    }
    if (*c_ev) {
      flag(ev, "data", data_ev, c_ev->count("--data") > 0);
      flag(ev, "out", out_ev, c_ev->count("--out") > 0);
      flag(ev, "pipelines", pipelines, c_ev->count("--pipelines") > 0);
      flag(ev, "source", source_ev, c_ev->count("--source") > 0);
      flag(ev, "folds", folds, c_ev->count("--folds") > 0);
      flag(ev, "split_seed", split_seed, c_ev->count("--split-seed") > 0);
      flag(ev, "grid", grid_ev, c_ev->count("--grid") > 0);
      if (svg) ev.flags["svg"] = true;
      if (no_throughput) ev.flags["throughput"] = false;
      return cmd_evaluate(ev);
    }
    if (*c_rp) return cmd_report(in_rp, out_rp);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
