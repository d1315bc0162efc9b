#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tsa/harness.hpp"
#include "tsa/weights_io.hpp"

using namespace tsa;
using nlohmann::json;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spill(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

BackboneSpec spec_by_name(const std::string& name) {
  if (name == "resnet-s") return BackboneSpec::resnet_s();
  if (name == "resnet18-replica") return BackboneSpec::resnet18_replica();
  throw std::invalid_argument("unknown backbone: " + name);
}

std::string method_label(const RunConfig& cfg) {
  return cfg.adapter_code + "/" + cfg.head_code + "@" +
         std::to_string(cfg.adapt.iterations);
}

void print_report(const RunReport& r) {
  std::printf("%-14s %5s %9s %9s  %-16s %8s %6s\n", "dataset", "seen", "mean",
              "ci95", "digest", "episodes", "lr");
  for (const DatasetResult& d : r.datasets) {
    std::printf("%-14s %5s %9.4f %9.4f  %-16s %8d %6.2f\n", d.name.c_str(),
                d.seen ? "yes" : "no", d.mean_acc, d.ci, d.digest.c_str(),
                d.episodes_done, static_cast<double>(d.lr_beta_used));
    for (const EpisodeFailure& f : d.failures)
      std::fprintf(stderr, "  episode %d failed: %s\n", f.index,
                   f.reason.c_str());
  }
  std::printf(
      "method %s: %lld trainable / %lld backbone parameters (%.2f%%), %.1fs\n",
      method_label(r.config).c_str(),
      static_cast<long long>(r.params.trainable),
      static_cast<long long>(r.params.backbone), 100.0 * r.params.fraction,
      r.wall_seconds);
}

int cmd_pretrain(const std::string& config_path, const std::string& out_flag,
                 int steps_flag, int64_t seed_flag, bool keep_heads) {
  const std::string text = slurp(config_path);
  RunConfig rc = parse_run_config(text);

  PretrainConfig pc;
  const json j = json::parse(text);
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    pc.steps = p.value("steps", pc.steps);
    pc.batch_per_domain = p.value("batch", pc.batch_per_domain);
    pc.lr = p.value("lr", pc.lr);
    pc.momentum = p.value("momentum", pc.momentum);
    pc.weight_decay = p.value("weight_decay", pc.weight_decay);
    pc.bn_momentum = p.value("bn_momentum", pc.bn_momentum);
    pc.seed = p.value("seed", pc.seed);
    pc.verbose = p.value("verbose", pc.verbose);
  }
  if (steps_flag > 0) pc.steps = steps_flag;
  if (seed_flag >= 0) pc.seed = static_cast<uint64_t>(seed_flag);
  const std::string out = !out_flag.empty()
                              ? out_flag
                              : (!rc.out_path.empty() ? rc.out_path
                                                      : std::string("weights.tsa"));

  const std::vector<Dataset> domains = resolve_datasets(rc);
  size_t classes_per_head = 0;
  for (const Dataset& d : domains) {
    if (!d.seen || d.train_classes.empty())
      throw std::invalid_argument("pretraining domain '" + d.name +
                                  "' has no training classes");
    if (classes_per_head == 0) classes_per_head = d.train_classes.size();
    if (d.train_classes.size() != classes_per_head)
      throw std::invalid_argument(
          "pretraining domains must share one training-class count; '" +
          d.name + "' differs");
  }
  pc.num_domains = static_cast<int>(domains.size());

  BackboneWeights w =
      BackboneWeights::init(spec_by_name(rc.backbone), rc.init_seed,
                            pc.num_domains, static_cast<int>(classes_per_head));
  std::printf("pretraining %s on %d domains, %d classes each, %d steps\n",
              rc.backbone.c_str(), pc.num_domains,
              static_cast<int>(classes_per_head), pc.steps);
  const PretrainStats stats =
      pretrain_backbone(w, pc, [&](int domain, uint64_t step_seed) {
        return sample_train_batch(domains[static_cast<size_t>(domain)],
                                  pc.batch_per_domain, step_seed);
      });
  save_weights(w, out, keep_heads);
  std::printf("loss %.4f -> %.4f, weights saved to %s\n",
              static_cast<double>(stats.loss_history.front()),
              static_cast<double>(stats.final_loss), out.c_str());
  return 0;
}

int cmd_eval(RunConfig rc) {
  const RunReport report = run_experiment(rc);
  print_report(report);
  if (!rc.out_path.empty()) {
    spill(rc.out_path, report_json(report));
    std::printf("report written to %s\n", rc.out_path.c_str());
  }
  return 0;
}

AblationAxes parse_axes(const std::string& text) {
  const json j = json::parse(text);
  AblationAxes axes;
  for (const json& c : j.value("connections", json::array())) {
    const std::string s = c.get<std::string>();
    if (s == "S")
      axes.connections.push_back(Connection::Serial);
    else if (s == "R")
      axes.connections.push_back(Connection::Residual);
    else
      throw std::invalid_argument("unknown connection token: " + s);
  }
  for (const json& c : j.value("forms", json::array())) {
    const std::string s = c.get<std::string>();
    if (s == "M")
      axes.forms.push_back(Form::Matrix);
    else if (s == "C")
      axes.forms.push_back(Form::Channelwise);
    else if (s == "DN")
      axes.forms.push_back(Form::Decomposed);
    else
      throw std::invalid_argument("unknown form token: " + s);
  }
  if (j.contains("attachments"))
    axes.attachments = j.at("attachments").get<std::vector<std::vector<int>>>();
  if (j.contains("group_widths"))
    axes.group_widths = j.at("group_widths").get<std::vector<int>>();
  if (j.contains("iterations"))
    axes.iterations = j.at("iterations").get<std::vector<int>>();
  return axes;
}

int cmd_ablate(const RunConfig& rc, const std::string& axes_path,
               const std::string& out) {
  const AblationAxes axes =
      axes_path.empty() ? AblationAxes{} : parse_axes(slurp(axes_path));
  BackboneWeights w = load_run_backbone(rc);
  const std::vector<Dataset> datasets = resolve_datasets(rc);
  const AblationResult res = ablation_grid(rc, axes, w, datasets);

  bool fresh = true;
  {
    std::ifstream probe(out, std::ios::binary | std::ios::ate);
    fresh = !probe || probe.tellg() == std::streampos(0);
  }
  std::ofstream f(out, std::ios::app);
  if (!f) throw std::runtime_error("cannot write " + out);
  if (fresh) f << kGridCsvHeader << "\n";
  for (const std::string& row : res.rows) f << row << "\n";
  f.close();

  for (const SkippedCombo& s : res.skipped)
    std::fprintf(stderr, "skipped %s: %s\n", s.method.c_str(),
                 s.reason.c_str());
  std::printf("%zu rows appended to %s (%zu combinations skipped)\n",
              res.rows.size(), out.c_str(), res.skipped.size());
  return 0;
}

int cmd_report(const std::vector<std::string>& report_paths,
               const std::string& grid_path) {
  std::map<std::string, std::map<std::string, double>> means;
  for (const std::string& path : report_paths) {
    const RunReport r = parse_report(slurp(path));
    std::printf("== %s\n", path.c_str());
    print_report(r);
    for (const DatasetResult& d : r.datasets)
      means[method_label(r.config)][d.name] = d.mean_acc;
  }
  if (!grid_path.empty()) {
    std::ifstream f(grid_path);
    if (!f) throw std::runtime_error("cannot open " + grid_path);
    std::string line;
    std::getline(f, line);  // header
    if (line != kGridCsvHeader)
      std::fprintf(stderr, "warning: unexpected grid header in %s\n",
                   grid_path.c_str());
    int rows = 0;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<std::string> fields;
      std::istringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');)
        fields.push_back(cell);
      if (fields.size() != 9)
        throw std::runtime_error("malformed grid row: " + line);
      means[fields[0]][fields[1]] = std::stod(fields[5]);
      ++rows;
    }
    std::printf("== %s: %d rows\n", grid_path.c_str(), rows);
  }

  if (means.size() > 1) {
    const auto ranks = aggregate_rank(means);
    std::printf("%-28s %9s %9s\n", "method", "mean", "rank");
    for (const auto& [method, rank] : ranks) {
      double sum = 0;
      for (const auto& [_, m] : means.at(method)) sum += m;
      std::printf("%-28s %9.4f %9.2f\n", method.c_str(),
                  sum / static_cast<double>(means.at(method).size()), rank);
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"few-shot adaptation workbench"};
  app.require_subcommand(1);

  std::string config_path, axes_path, out, weights, data_dir, grid_path;
  std::vector<std::string> report_paths;
  int episodes = -1, workers = -1, steps = -1;
  int64_t seed = -1;
  bool keep_heads = false;

  CLI::App* pre = app.add_subcommand(
      "pretrain", "train a multi-domain backbone and save its weights");
  pre->add_option("--config", config_path, "run config json")
      ->required()
      ->check(CLI::ExistingFile);
  pre->add_option("--steps", steps, "override optimization step count");
  pre->add_option("--seed", seed, "override pretraining seed");
  pre->add_option("--out", out, "weights output path");
  pre->add_option("--data-dir", data_dir, "dataset root (TSA_DATA_DIR)");
  pre->add_flag("--keep-heads", keep_heads, "serialize the domain heads too");

  CLI::App* ev = app.add_subcommand(
      "eval", "run the episodic benchmark described by a config");
  ev->add_option("--config", config_path, "run config json")
      ->required()
      ->check(CLI::ExistingFile);
  ev->add_option("--weights", weights, "override the weights path");
  ev->add_option("--seed", seed, "override the episode seed");
  ev->add_option("--episodes", episodes, "override the episode count");
  ev->add_option("--workers", workers, "override the worker count");
  ev->add_option("--out", out, "report json output path");
  ev->add_option("--data-dir", data_dir, "dataset root (TSA_DATA_DIR)");

  CLI::App* ab = app.add_subcommand(
      "ablate", "run a method grid and append long-form CSV rows");
  ab->add_option("--config", config_path, "base run config json")
      ->required()
      ->check(CLI::ExistingFile);
  ab->add_option("--axes", axes_path, "axes json (connections, forms, ...)")
      ->check(CLI::ExistingFile);
  ab->add_option("--out", out, "grid csv path")->required();
  ab->add_option("--seed", seed, "override the episode seed");
  ab->add_option("--episodes", episodes, "override the episode count");
  ab->add_option("--workers", workers, "override the worker count");
  ab->add_option("--data-dir", data_dir, "dataset root (TSA_DATA_DIR)");

  CLI::App* rep = app.add_subcommand(
      "report", "summarize saved reports or a grid csv, with average ranks");
  rep->add_option("--in", report_paths, "report json files")
      ->check(CLI::ExistingFile);
  rep->add_option("--grid", grid_path, "grid csv file")
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (!data_dir.empty()) setenv("TSA_DATA_DIR", data_dir.c_str(), 1);
    if (*pre) return cmd_pretrain(config_path, out, steps, seed, keep_heads);

    if (*ev || *ab) {
      RunConfig rc = parse_run_config(slurp(config_path));
      if (!weights.empty()) rc.weights_path = weights;
      if (seed >= 0) rc.seed = static_cast<uint64_t>(seed);
      if (episodes >= 0) rc.episodes = episodes;
      if (workers >= 0) rc.workers = workers;
      if (*ev) {
        if (!out.empty()) rc.out_path = out;
        return cmd_eval(std::move(rc));
      }
      return cmd_ablate(rc, axes_path, out);
    }
    if (*rep) {
      if (report_paths.empty() && grid_path.empty())
        throw std::invalid_argument("report: give --in files or --grid");
      return cmd_report(report_paths, grid_path);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
