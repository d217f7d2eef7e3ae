// blendfl command-line harness: run, ablate, speedup, infer.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "blendfl/checkpoint.hpp"
#include "blendfl/client.hpp"
#include "blendfl/experiment.hpp"
#include "blendfl/trace.hpp"

namespace fs = std::filesystem;
using namespace blendfl;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw RunError("cannot write " + p.string());
  return os;
}

int cmd_run(const std::string& config_path, const std::string& out_override) {
  ExperimentConfig cfg = load_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir);

  auto jsonl = open_out(dir / "rounds.jsonl");
  std::vector<std::pair<std::uint64_t, RunResult>> runs;
  int status = 0;
  for (auto seed : cfg.seeds) {
    try {
      auto res = run_seed(cfg, seed, [&](const RoundReport& r) {
        jsonl << to_json_line(r) << '\n';
        return true;
      });
      save_bundle((dir / ("model_seed" + std::to_string(seed) + ".ckpt")).string(), res.final_global);
      runs.emplace_back(seed, std::move(res));
    } catch (const RunAborted& e) {
      std::cerr << "seed " << seed << ": " << e.what() << '\n';
      RunResult partial;
      partial.reports = e.partial_reports();
      runs.emplace_back(seed, std::move(partial));
      status = kExitRuntime;
      break;
    }
  }
  auto summary = open_out(dir / "summary.csv");
  write_summary_csv(summary, runs, cfg.target);
  for (const auto& [seed, res] : runs) {
    if (res.reports.empty()) continue;
    const auto m = res.reports.back().test_metrics(Head::Multimodal);
    std::cout << "seed " << seed << ": " << res.reports.size() << " rounds, multimodal test auroc "
              << format_double(m.auroc) << " auprc " << format_double(m.auprc) << '\n';
  }
  std::cout << "wrote " << (dir / "rounds.jsonl").string() << ", " << (dir / "summary.csv").string() << '\n';
  return status;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& ratio_args, bool ratios_given,
               const std::vector<int>& clients, bool clients_given, bool parallel, const std::string& out_override) {
  ExperimentConfig cfg = load_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  if (ratios_given && ratio_args.empty()) throw ConfigError(0, "ratios", "empty sweep list");
  if (clients_given && clients.empty()) throw ConfigError(0, "clients", "empty sweep list");
  std::vector<double> ratios;
  for (const auto& r : ratio_args) ratios.push_back(parse_ratio(r));
  std::vector<int> counts = clients;
  if (!ratios_given && !clients_given) {
    ratios = kDefaultRatios;
    counts = kDefaultClientCounts;
  }
  for (int n : counts)
    if (n < 1) throw ConfigError(0, "clients", "client count must be positive");

  const auto rows = run_ablation_grid(cfg, ratios, counts, parallel);
  fs::create_directories(cfg.output_dir);
  const fs::path out = fs::path(cfg.output_dir) / "grid.csv";
  auto os = open_out(out);
  write_grid_csv(os, rows);
  std::size_t failed = 0;
  for (const auto& r : rows) failed += r.failure.has_value();
  std::cout << "wrote " << out.string() << " (" << rows.size() << " rows, " << failed / 3 << " failed runs)\n";
  return 0;
}

int cmd_speedup(const std::string& config_path, const std::vector<int>& intervals, std::optional<double> target,
                bool parallel, const std::string& out_override) {
  ExperimentConfig cfg = load_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  cfg.target = target.value_or(0.98);
  if (!(cfg.target > 0.5 && cfg.target < 1.0)) throw ConfigError(0, "target", "must be in (0.5, 1.0)");
  if (intervals.empty()) throw ConfigError(0, "intervals", "empty interval list");
  const auto rows = measure_speedup(cfg, intervals, parallel);
  fs::create_directories(cfg.output_dir);
  const fs::path out = fs::path(cfg.output_dir) / "speedup.csv";
  auto os = open_out(out);
  write_speedup_csv(os, rows);
  write_speedup_csv(std::cout, rows);
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& samples_path) {
  ModelBundle bundle;
  try {
    bundle = load_bundle(checkpoint);
  } catch (const CheckpointError& e) {
    throw ConfigError(0, "checkpoint", e.what());
  }
  std::ifstream in(samples_path);
  if (!in) throw ConfigError(0, "samples", "cannot open " + samples_path);
  SampleSet samples;
  try {
    samples = read_samples(in);
  } catch (const DataError& e) {
    throw ConfigError(0, "samples", e.what());
  }
  for (const auto& s : samples) {
    for (Modality m : {Modality::A, Modality::B}) {
      const auto& x = m == Modality::A ? s.x_a : s.x_b;
      if (x && bundle.encoder(m) && x->size() != bundle.encoder(m)->input_dim())
        throw ConfigError(0, "samples",
                          "sample " + std::to_string(s.id) + " modality " + to_string(m) + " has " +
                              std::to_string(x->size()) + " features, checkpoint expects " +
                              std::to_string(bundle.encoder(m)->input_dim()));
    }
  }
  ProtocolTrace trace;
  std::cout << "id\tprediction\thead_used\tprobabilities\n";
  for (const auto& s : samples) {
    const Prediction p = Client::infer_with(bundle, s);
    trace.record({0, 0, 0, MessageKind::LocalInference, 0, std::nullopt});
    std::cout << s.id << '\t' << p.label << '\t' << to_string(p.head) << '\t';
    for (std::size_t k = 0; k < p.probabilities.size(); ++k)
      std::cout << (k ? "," : "") << format_double(p.probabilities[k]);
    std::cout << '\n';
  }
  std::cout << "server_messages=" << trace.server_messages() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BlendFL federated learning simulator"};
  app.require_subcommand(1);

  std::string config, out_dir;
  auto* run = app.add_subcommand("run", "run the configured protocol for every seed");
  run->add_option("config", config, "experiment config (YAML)")->required();
  run->add_option("--out", out_dir, "override output_dir");

  std::vector<std::string> ratios;
  std::vector<int> clients;
  bool parallel = false;
  auto* ablate = app.add_subcommand("ablate", "data-ratio and client-count sweeps for all protocols");
  ablate->add_option("config", config, "experiment config (YAML)")->required();
  auto* ratios_opt = ablate->add_option("--ratios", ratios, "paired/partial ratios, e.g. 90/10 70/30")
                         ->expected(0, CLI::detail::expected_max_vector_size);
  auto* clients_opt =
      ablate->add_option("--clients", clients, "client counts, e.g. 4 8 12")->expected(0, CLI::detail::expected_max_vector_size);
  ablate->add_flag("--parallel", parallel, "run cells concurrently");
  ablate->add_option("--out", out_dir, "override output_dir");

  std::vector<int> intervals = {1, 2, 4, 6};
  double target = 0.98;
  auto* speedup = app.add_subcommand("speedup", "rounds to target under FedAvg vs BlendAvg aggregation");
  speedup->add_option("config", config, "experiment config (YAML)")->required();
  speedup->add_option("--intervals", intervals, "local epochs between aggregations")->capture_default_str();
  speedup->add_option("--target", target, "validation AUROC target")->capture_default_str();
  speedup->add_flag("--parallel", parallel, "run seeds concurrently");
  speedup->add_option("--out", out_dir, "override output_dir");

  std::string checkpoint, samples;
  auto* infer = app.add_subcommand("infer", "local prediction from a checkpoint, no server involved");
  infer->add_option("checkpoint", checkpoint, "bundle checkpoint")->required();
  infer->add_option("samples", samples, "sample file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*run) return cmd_run(config, out_dir);
    if (*ablate)
      return cmd_ablate(config, ratios, ratios_opt->count() > 0 || !ratios_opt->empty(), clients,
                        clients_opt->count() > 0 || !clients_opt->empty(), parallel, out_dir);
    if (*speedup) return cmd_speedup(config, intervals, target, parallel, out_dir);
    if (*infer) return cmd_infer(checkpoint, samples);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
