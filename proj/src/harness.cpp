#include "tsa/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsa/weights_io.hpp"

namespace tsa {

namespace {

using nlohmann::json;

std::string family_name(ShiftFamily f) {
  switch (f) {
    case ShiftFamily::None: return "none";
    case ShiftFamily::ChannelMix: return "channel-mix";
    case ShiftFamily::Rotation: return "rotation";
    case ShiftFamily::Texture: return "texture";
    case ShiftFamily::Noise: return "noise";
  }
  return "?";
}

ShiftFamily parse_family(const std::string& s) {
  if (s == "none") return ShiftFamily::None;
  if (s == "channel-mix") return ShiftFamily::ChannelMix;
  if (s == "rotation") return ShiftFamily::Rotation;
  if (s == "texture") return ShiftFamily::Texture;
  if (s == "noise") return ShiftFamily::Noise;
  throw std::invalid_argument("unknown shift family: " + s);
}

json dataset_ref_json(const DatasetRef& r) {
  json j;
  j["name"] = r.name;
  j["kind"] = r.kind;
  j["seen"] = r.seen;
  if (r.kind == "synthetic") {
    j["classes"] = r.synthetic.num_classes;
    j["images_per_class"] = r.synthetic.images_per_class;
    j["proto_seed"] = r.synthetic.proto_seed;
    j["family"] = family_name(r.synthetic.family);
    if (r.synthetic.family == ShiftFamily::ChannelMix)
      j["mix"] = r.synthetic.mix;
    if (r.synthetic.family == ShiftFamily::Rotation) {
      j["rot_lo_deg"] = r.synthetic.rot_lo_deg;
      j["rot_hi_deg"] = r.synthetic.rot_hi_deg;
    }
    if (r.synthetic.family == ShiftFamily::Texture)
      j["texture_amp"] = r.synthetic.texture_amp;
    if (r.synthetic.family == ShiftFamily::Noise)
      j["noise_sigma"] = r.synthetic.noise_sigma;
  } else {
    j["images"] = r.images_path;
    j["labels"] = r.labels_path;
  }
  return j;
}

DatasetRef parse_dataset_ref(const json& j) {
  DatasetRef r;
  r.name = j.at("name").get<std::string>();
  if (r.name.empty()) throw std::invalid_argument("dataset name is empty");
  r.kind = j.value("kind", std::string("synthetic"));
  r.seen = j.value("seen", false);
  if (r.kind == "synthetic") {
    r.synthetic.name = r.name;
    r.synthetic.seen = r.seen;
    r.synthetic.num_classes = j.value("classes", r.synthetic.num_classes);
    r.synthetic.images_per_class =
        j.value("images_per_class", r.synthetic.images_per_class);
    r.synthetic.proto_seed = j.value("proto_seed", r.synthetic.proto_seed);
    r.synthetic.family = parse_family(j.value("family", std::string("none")));
    if (j.contains("mix")) r.synthetic.mix = j.at("mix").get<std::vector<real>>();
    r.synthetic.rot_lo_deg = j.value("rot_lo_deg", r.synthetic.rot_lo_deg);
    r.synthetic.rot_hi_deg = j.value("rot_hi_deg", r.synthetic.rot_hi_deg);
    r.synthetic.texture_amp = j.value("texture_amp", r.synthetic.texture_amp);
    r.synthetic.noise_sigma = j.value("noise_sigma", r.synthetic.noise_sigma);
  } else if (r.kind == "idx") {
    // default to the {data_root}/{name}/test-*.idx layout
    r.images_path = j.value("images", r.name + "/test-images.idx");
    r.labels_path = j.value("labels", r.name + "/test-labels.idx");
  } else {
    throw std::invalid_argument("unknown dataset kind: " + r.kind);
  }
  return r;
}

json adapt_json(const AdaptConfig& a) {
  json j;
  j["iterations"] = a.iterations;
  j["lr_beta"] = a.lr_beta;
  j["lr_alpha"] = a.lr_alpha;
  j["rho"] = a.rho;
  j["eps"] = a.eps;
  j["finetune_all"] = a.finetune_all;
  return j;
}

AdaptConfig parse_adapt(const json& j, AdaptConfig a) {
  a.iterations = j.value("iterations", a.iterations);
  a.lr_beta = j.value("lr_beta", a.lr_beta);
  a.lr_alpha = j.value("lr_alpha", a.lr_alpha);
  a.rho = j.value("rho", a.rho);
  a.eps = j.value("eps", a.eps);
  a.finetune_all = j.value("finetune_all", a.finetune_all);
  return a;
}

json config_json_obj(const RunConfig& cfg) {
  json j;
  j["weights"] = cfg.weights_path;
  j["backbone"] = cfg.backbone;
  j["init_seed"] = cfg.init_seed;
  j["adapter"] = cfg.adapter_code;
  j["head"] = cfg.head_code;
  j["adapt"] = adapt_json(cfg.adapt);
  j["protocol"] = protocol_name(cfg.protocol);
  json ds = json::array();
  for (const DatasetRef& r : cfg.datasets) ds.push_back(dataset_ref_json(r));
  j["datasets"] = std::move(ds);
  j["episodes"] = cfg.episodes;
  j["seed"] = cfg.seed;
  j["data_seed"] = cfg.data_seed;
  j["workers"] = cfg.workers;
  j["out"] = cfg.out_path;
  return j;
}

RunConfig parse_config_obj(const json& j) {
  RunConfig cfg;
  cfg.weights_path = j.value("weights", cfg.weights_path);
  cfg.backbone = j.value("backbone", cfg.backbone);
  cfg.init_seed = j.value("init_seed", cfg.init_seed);
  cfg.adapter_code = j.value("adapter", cfg.adapter_code);
  cfg.head_code = j.value("head", cfg.head_code);
  if (j.contains("adapt")) cfg.adapt = parse_adapt(j.at("adapt"), cfg.adapt);
  if (j.contains("protocol"))
    cfg.protocol = parse_protocol(j.at("protocol").get<std::string>());
  if (j.contains("datasets"))
    for (const json& d : j.at("datasets")) cfg.datasets.push_back(parse_dataset_ref(d));
  cfg.episodes = j.value("episodes", cfg.episodes);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.data_seed = j.value("data_seed", cfg.data_seed);
  cfg.workers = j.value("workers", cfg.workers);
  cfg.out_path = j.value("out", cfg.out_path);
  return cfg;
}

std::string resolve_data_path(const std::string& p) {
  if (p.empty() || p.front() == '/') return p;
  if (const char* dir = std::getenv("TSA_DATA_DIR"))
    return std::string(dir) + "/" + p;
  return p;
}

/// The adapt config one dataset actually runs: head wired in, learning-rate
/// preset applied (0.1 seen / 1.0 unseen) when lr_beta was left negative.
AdaptConfig resolved_adapt(const RunConfig& cfg, const HeadConfig& head,
                           bool seen) {
  AdaptConfig a = cfg.adapt;
  a.head = head;
  if (a.lr_beta < 0) a.lr_beta = seen ? static_cast<real>(0.1) : static_cast<real>(1.0);
  if (head.kind == HeadKind::FinetuneNcc) a.finetune_all = true;
  return a;
}

json result_json(const DatasetResult& r) {
  json j;
  j["name"] = r.name;
  j["seen"] = r.seen;
  j["episodes_done"] = r.episodes_done;
  j["accuracies"] = r.accuracies;
  j["mean_acc"] = r.mean_acc;
  j["ci95"] = r.ci;
  j["digest"] = r.digest;
  j["seconds"] = r.seconds;
  j["lr_beta_used"] = r.lr_beta_used;
  json f = json::array();
  for (const EpisodeFailure& e : r.failures)
    f.push_back({{"index", e.index}, {"reason", e.reason}});
  j["failures"] = std::move(f);
  return j;
}

DatasetResult parse_result(const json& j) {
  DatasetResult r;
  r.name = j.at("name").get<std::string>();
  r.seen = j.at("seen").get<bool>();
  r.episodes_done = j.at("episodes_done").get<int>();
  r.accuracies = j.at("accuracies").get<std::vector<double>>();
  r.mean_acc = j.at("mean_acc").get<double>();
  r.ci = j.at("ci95").get<double>();
  r.digest = j.at("digest").get<std::string>();
  r.seconds = j.at("seconds").get<double>();
  r.lr_beta_used = j.at("lr_beta_used").get<real>();
  for (const json& e : j.at("failures"))
    r.failures.push_back(
        {e.at("index").get<int>(), e.at("reason").get<std::string>()});
  return r;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j = json::parse(json_text);
  return parse_config_obj(j);
}

std::string run_config_json(const RunConfig& cfg) {
  return config_json_obj(cfg).dump(2);
}

BackboneWeights load_run_backbone(const RunConfig& cfg) {
  if (!cfg.weights_path.empty())
    return load_weights(resolve_data_path(cfg.weights_path));
  BackboneSpec spec;
  if (cfg.backbone == "resnet-s") {
    spec = BackboneSpec::resnet_s();
  } else if (cfg.backbone == "resnet18-replica") {
    spec = BackboneSpec::resnet18_replica();
  } else {
    throw std::invalid_argument("unknown backbone: " + cfg.backbone +
                                " (give a weights file instead)");
  }
  return BackboneWeights::init(spec, cfg.init_seed);
}

std::vector<Dataset> resolve_datasets(const RunConfig& cfg) {
  if (cfg.datasets.empty())
    throw std::invalid_argument("run config lists no datasets");

  std::vector<SyntheticDomainSpec> specs;
  std::vector<size_t> spec_slot;
  for (size_t i = 0; i < cfg.datasets.size(); ++i)
    if (cfg.datasets[i].kind == "synthetic") {
      specs.push_back(cfg.datasets[i].synthetic);
      spec_slot.push_back(i);
    }

  std::vector<Dataset> out(cfg.datasets.size());
  if (!specs.empty()) {
    std::vector<Dataset> generated = gen_synthetic_domains(specs, cfg.data_seed);
    for (size_t k = 0; k < generated.size(); ++k)
      out[spec_slot[k]] = std::move(generated[k]);
  }
  for (size_t i = 0; i < cfg.datasets.size(); ++i) {
    const DatasetRef& ref = cfg.datasets[i];
    if (ref.kind == "idx") {
      Dataset ds = load_idx(resolve_data_path(ref.images_path),
                            resolve_data_path(ref.labels_path));
      if (ds.channels == 1) ds = expand_channels(ds, 3);
      out[i] = std::move(ds);
    }
    out[i].name = ref.name;
    out[i].seen = ref.seen;
    out[i].domain_id = static_cast<int>(i);
  }
  return out;
}

double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0;
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double ci95(const std::vector<double>& xs) {
  const size_t n = xs.size();
  if (n < 2) return 0;
  const double m = mean_of(xs);
  double ss = 0;
  for (double x : xs) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  return 1.96 * sd / std::sqrt(static_cast<double>(n));
}

std::string fnv1a_digest(const std::vector<double>& xs) {
  uint64_t h = 14695981039346656037ULL;
  for (double x : xs) {
    uint64_t bits;
    static_assert(sizeof(bits) == sizeof(x));
    std::memcpy(&bits, &x, sizeof(bits));
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 1099511628211ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

std::string report_json(const RunReport& report) {
  json j;
  j["format_version"] = report.format_version;
  j["config"] = config_json_obj(report.config);
  j["params"] = {{"trainable", report.params.trainable},
                 {"backbone", report.params.backbone},
                 {"fraction", report.params.fraction}};
  json ds = json::array();
  for (const DatasetResult& r : report.datasets) ds.push_back(result_json(r));
  j["datasets"] = std::move(ds);
  j["wall_seconds"] = report.wall_seconds;
  return j.dump(2);
}

RunReport parse_report(const std::string& json_text) {
  json j = json::parse(json_text);
  RunReport r;
  r.format_version = j.at("format_version").get<int>();
  if (r.format_version != kReportFormatVersion)
    throw std::runtime_error("unsupported report format_version " +
                             std::to_string(r.format_version));
  r.config = parse_config_obj(j.at("config"));
  r.params.trainable = j.at("params").at("trainable").get<int64_t>();
  r.params.backbone = j.at("params").at("backbone").get<int64_t>();
  r.params.fraction = j.at("params").at("fraction").get<double>();
  for (const json& d : j.at("datasets")) r.datasets.push_back(parse_result(d));
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

namespace {

RunReport run_experiment_impl(const RunConfig& cfg, const AdapterConfig& acfg,
                              const HeadConfig& head, BackboneWeights& weights,
                              const std::vector<Dataset>& datasets) {
  if (cfg.episodes < 1)
    throw std::invalid_argument("run_experiment: episodes must be >= 1");
  if (cfg.workers < 1)
    throw std::invalid_argument("run_experiment: workers must be >= 1");
  if (datasets.empty())
    throw std::invalid_argument("run_experiment: no datasets");

  const bool finetune =
      cfg.adapt.finetune_all || head.kind == HeadKind::FinetuneNcc;
  if (head.kind == HeadKind::Knn && cfg.adapt.iterations > 0)
    throw std::invalid_argument(
        "run_experiment: knn cannot iterate; set iterations to 0");

  RunReport report;
  report.config = cfg;
  report.params.backbone = weights.count_parameters(false);
  if (finetune) {
    report.params.trainable =
        report.params.backbone +
        static_cast<int64_t>(weights.spec.feature_dim()) *
            weights.spec.feature_dim();
  } else {
    TaskModel probe = TaskModel::attach(weights, acfg);
    report.params.trainable = probe.adapter_parameters();
  }
  report.params.fraction =
      report.params.backbone > 0
          ? static_cast<double>(report.params.trainable) /
                static_cast<double>(report.params.backbone)
          : 0.0;

  const auto wall0 = std::chrono::steady_clock::now();
  for (const Dataset& ds : datasets) {
    const auto t0 = std::chrono::steady_clock::now();
    const AdaptConfig ad = resolved_adapt(cfg, head, ds.seen);

    std::vector<double> acc(static_cast<size_t>(cfg.episodes), 0.0);
    std::vector<std::string> errs(static_cast<size_t>(cfg.episodes));
#pragma omp parallel for schedule(dynamic) num_threads(cfg.workers)
    for (int i = 0; i < cfg.episodes; ++i) {
      try {
        Episode ep = sample_episode(ds, cfg.protocol, cfg.seed, i);
        if (finetune) {
          TaskModel m = make_finetune_model(weights);
          acc[static_cast<size_t>(i)] =
              evaluate_episode(m, ep, ad).query_accuracy;
        } else {
          TaskModel m = TaskModel::attach(weights, acfg);
          acc[static_cast<size_t>(i)] =
              evaluate_episode(m, ep, ad).query_accuracy;
        }
      } catch (const std::exception& e) {
        errs[static_cast<size_t>(i)] = e.what();
      } catch (...) {
        errs[static_cast<size_t>(i)] = "unknown error";
      }
    }

    DatasetResult r;
    r.name = ds.name;
    r.seen = ds.seen;
    r.lr_beta_used = ad.lr_beta;
    for (int i = 0; i < cfg.episodes; ++i) {
      if (errs[static_cast<size_t>(i)].empty())
        r.accuracies.push_back(acc[static_cast<size_t>(i)]);
      else
        r.failures.push_back({i, errs[static_cast<size_t>(i)]});
    }
    if (r.failures.size() * 100 > static_cast<size_t>(cfg.episodes))
      throw std::runtime_error(
          "run_experiment: dataset " + ds.name + ": " +
          std::to_string(r.failures.size()) + " of " +
          std::to_string(cfg.episodes) +
          " episodes failed; first: " + r.failures.front().reason);
    r.episodes_done = static_cast<int>(r.accuracies.size());
    r.mean_acc = mean_of(r.accuracies);
    r.ci = ci95(r.accuracies);
    r.digest = fnv1a_digest(r.accuracies);
    r.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    report.datasets.push_back(std::move(r));
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0)
          .count();
  return report;
}

}  // namespace

RunReport run_experiment(const RunConfig& cfg, BackboneWeights& weights,
                         const std::vector<Dataset>& datasets) {
  return run_experiment_impl(cfg, AdapterConfig::parse(cfg.adapter_code),
                             HeadConfig::parse(cfg.head_code), weights,
                             datasets);
}

RunReport run_experiment(const RunConfig& cfg) {
  BackboneWeights weights = load_run_backbone(cfg);
  const std::vector<Dataset> datasets = resolve_datasets(cfg);
  return run_experiment(cfg, weights, datasets);
}

std::map<std::string, double> aggregate_rank(
    const std::map<std::string, std::map<std::string, double>>& means) {
  if (means.empty()) return {};
  const auto& first = means.begin()->second;
  for (const auto& [method, table] : means) {
    if (table.size() != first.size())
      throw std::invalid_argument(
          "aggregate_rank: dataset coverage differs for " + method);
    for (const auto& [ds, _] : table)
      if (!first.count(ds))
        throw std::invalid_argument(
            "aggregate_rank: dataset coverage differs for " + method);
  }
  if (first.empty())
    throw std::invalid_argument("aggregate_rank: no datasets");

  std::map<std::string, double> rank_sum;
  for (const auto& [ds, _] : first) {
    std::vector<std::pair<double, std::string>> order;
    for (const auto& [method, table] : means)
      order.emplace_back(table.at(ds), method);
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
      return a.first > b.first || (a.first == b.first && a.second < b.second);
    });
    size_t i = 0;
    while (i < order.size()) {
      size_t j = i;
      while (j + 1 < order.size() && order[j + 1].first == order[i].first) ++j;
      const double shared =
          (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
      for (size_t k = i; k <= j; ++k) rank_sum[order[k].second] += shared;
      i = j + 1;
    }
  }
  std::map<std::string, double> out;
  const double n = static_cast<double>(first.size());
  for (auto& [method, sum] : rank_sum) out[method] = sum / n;
  return out;
}

AblationResult ablation_grid(const RunConfig& base, const AblationAxes& axes,
                             BackboneWeights& weights,
                             const std::vector<Dataset>& datasets) {
  const AdapterConfig base_acfg = AdapterConfig::parse(base.adapter_code);
  const auto connections = axes.connections.empty()
                               ? std::vector<Connection>{base_acfg.connection}
                               : axes.connections;
  const auto forms =
      axes.forms.empty() ? std::vector<Form>{base_acfg.form} : axes.forms;
  const auto attachments =
      axes.attachments.empty()
          ? std::vector<std::vector<int>>{base_acfg.attach_stages}
          : axes.attachments;
  const auto widths = axes.group_widths.empty()
                          ? std::vector<int>{base_acfg.group_width}
                          : axes.group_widths;
  const auto iterations = axes.iterations.empty()
                              ? std::vector<int>{base.adapt.iterations}
                              : axes.iterations;

  AblationResult result;
  std::set<std::string> done;
  for (Connection conn : connections)
    for (Form form : forms)
      for (const std::vector<int>& attach : attachments)
        for (int width : widths)
          for (int iters : iterations) {
            AdapterConfig acfg = base_acfg;
            acfg.connection = conn;
            acfg.form = form;
            acfg.attach_stages = attach;
            acfg.group_width = width;
            // code() does not carry the attachment, so spell out non-default
            // stage lists to keep distinct combos distinct (CSV-safe, no comma)
            std::string method = acfg.code();
            if (acfg.attach_stages != std::vector<int>{1, 2, 3, 4}) {
              method += ":s";
              if (acfg.attach_stages.empty()) method += "-";
              for (size_t k = 0; k < acfg.attach_stages.size(); ++k)
                method += (k ? "." : "") + std::to_string(acfg.attach_stages[k]);
            }
            method += "/" + base.head_code + "@" + std::to_string(iters);
            // the group width only matters for decomposed forms, so other
            // combos would repeat; each (method, dataset) pair runs once
            if (!done.insert(method).second) continue;

            RunConfig rc = base;
            rc.adapter_code = acfg.code();
            rc.adapt.iterations = iters;
            try {
              TaskModel probe = TaskModel::attach(weights, acfg);
              if (probe.site_params().empty() && !probe.beta.defined() &&
                  iters > 0)
                throw std::invalid_argument(
                    "no trainable parameters on this backbone");
              RunReport rep =
                  run_experiment_impl(rc, acfg, HeadConfig::parse(base.head_code),
                                      weights, datasets);
              for (const DatasetResult& r : rep.datasets) {
                char nums[96];
                std::snprintf(nums, sizeof(nums), "%.6f,%.6f,%.8f", r.mean_acc,
                              r.ci, rep.params.fraction);
                std::ostringstream row;
                row << method << ',' << r.name << ',' << (r.seen ? 1 : 0)
                    << ',' << protocol_name(rc.protocol) << ','
                    << r.episodes_done << ',' << nums << ',' << rc.seed;
                result.rows.push_back(row.str());
              }
            } catch (const std::exception& e) {
              result.skipped.push_back({method, e.what()});
            }
          }
  return result;
}

}  // namespace tsa
