// Acceptance runner. `acceptance --criterion N` checks one criterion, no arguments checks all ten.
// Prints one PASS/FAIL line per criterion; exits nonzero if any failed.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "blendfl/experiment.hpp"
#include "blendfl/metrics.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace blendfl;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

fs::path source_path(const std::string& rel) { return fs::path(BLENDFL_SOURCE_DIR) / rel; }

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("blendfl_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args, const fs::path& out_file) {
  const std::string cmd = std::string("\"") + BLENDFL_CLI + "\" " + args + " >\"" + out_file.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double median(std::vector<double> v) {
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Median multimodal test AUROC per (protocol, sweep value) over seeds.
std::map<std::pair<Protocol, double>, double> median_auroc(const std::vector<GridRow>& rows, bool by_clients) {
  std::map<std::pair<Protocol, double>, std::vector<double>> acc;
  for (const auto& r : rows) {
    if (r.head != Head::Multimodal) continue;
    if (r.failure) throw RunError("grid cell failed: " + *r.failure);
    acc[{r.protocol, by_clients ? r.n_clients : r.ratio}].push_back(r.metrics.auroc);
  }
  std::map<std::pair<Protocol, double>, double> out;
  for (auto& [k, v] : acc) out[k] = median(v);
  return out;
}

Network random_net(Rng& rng, std::size_t in, std::size_t depth) {
  std::uniform_int_distribution<std::size_t> dim(1, 16);
  const Activation hidden[] = {Activation::Relu, Activation::Sigmoid, Activation::Identity};
  std::vector<LayerSpec> layers;
  for (std::size_t k = 0; k < depth; ++k) {
    const bool last = k + 1 == depth;
    const std::size_t out = last ? 2 + rng() % 4 : dim(rng);
    layers.push_back({in, out, last ? Activation::Softmax : hidden[rng() % 3]});
    in = out;
  }
  return Network::initialized(layers, rng);
}

Verdict gradient_suite() {
  Rng rng(20240);
  double worst = 0;
  const int nets = 24;
  for (int t = 0; t < nets; ++t) {
    const std::size_t in = 1 + rng() % 16, depth = 1 + t % 3;
    Network net = random_net(rng, in, depth);
    // off relu kinks
    ParamVector p = net.params();
    std::uniform_real_distribution<double> jitter(-0.3, 0.3);
    for (double& v : p) v += jitter(rng);
    net.set_params(p);
    const Matrix x = oracle::random_matrix(4, in, rng);
    std::vector<int> y;
    for (int i = 0; i < 4; ++i) y.push_back(static_cast<int>(rng() % net.output_dim()));
    const auto fwd = forward(net, x);
    const auto back =
        backward(net, fwd.trace, loss_and_grad(fwd.output, y, LossKind::CategoricalCrossEntropy).output_grad);
    const auto num = oracle::numeric_gradient(
        [&](const ParamVector& q) {
          return loss_and_grad(predict(Network(net.layers(), q), x), y, LossKind::CategoricalCrossEntropy).loss;
        },
        net.params());
    for (std::size_t i = 0; i < num.size(); ++i) worst = std::max(worst, oracle::gradient_error(back.param_grad[i], num[i]));
  }
  return {worst < 1e-4, std::to_string(nets) + " networks, max relative error " + sci(worst)};
}

Verdict split_equivalence() {
  double worst = 0;
  const int configs = 12;
  for (int c = 0; c < configs; ++c) {
    const std::size_t dim_a = 2 + c % 4, dim_b = 2 + (c + 1) % 3, n = 6 + c;
    SyntheticSpec spec;
    spec.n_samples = n;
    spec.n_classes = 3;
    spec.dim_a = dim_a;
    spec.dim_b = dim_b;
    spec.seed = static_cast<std::uint64_t>(c);
    const auto samples = generate_synthetic(spec);
    std::vector<ClientDataset> clients(2);
    clients[1].client_id = 1;
    for (const auto& s : samples) {
      clients[0].fragmented_a.push_back(s.only(Modality::A));
      clients[1].fragmented_b.push_back(s.only(Modality::B));
    }
    Rng rng(500 + c);
    const ModelArch arch{dim_a, dim_b, 3 + static_cast<std::size_t>(c % 3), static_cast<std::size_t>(c % 2), 3};
    const auto g = arch.initialize(rng);
    Client a(clients[0], g, 0), b(clients[1], g, 0);
    VerticalServer server(*g.g_m, intersect_fragmented(clients));
    server.stage(a.client_forward_fragmented(Modality::A, {1, 1}));
    server.stage(b.client_forward_fragmented(Modality::B, {1, 1}));
    const auto res = server.train_step(0.0);
    const ParamVector grad_a = a.apply_server_gradients(res.gradients[0], 0.0);
    const ParamVector grad_b = b.apply_server_gradients(res.gradients[1], 0.0);

    const Network mono = oracle::monolithic(*g.f_a, *g.f_b, *g.g_m);
    const Matrix x = hconcat(feature_matrix(samples, Modality::A), feature_matrix(samples, Modality::B));
    const auto fwd = forward(mono, x);
    const auto loss = loss_and_grad(fwd.output, label_vector(samples), LossKind::CategoricalCrossEntropy);
    const auto split =
        oracle::split_monolithic_gradient(*g.f_a, *g.f_b, mono, backward(mono, fwd.trace, loss.output_grad).param_grad);
    if (grad_a.size() != split.f_a.size() || grad_b.size() != split.f_b.size() || res.head_grad.size() != split.g.size())
      return {false, "gradient layout mismatch in configuration " + std::to_string(c)};
    for (std::size_t i = 0; i < grad_a.size(); ++i) worst = std::max(worst, std::abs(grad_a[i] - split.f_a[i]));
    for (std::size_t i = 0; i < grad_b.size(); ++i) worst = std::max(worst, std::abs(grad_b[i] - split.f_b[i]));
    for (std::size_t i = 0; i < split.g.size(); ++i) worst = std::max(worst, std::abs(res.head_grad[i] - split.g[i]));
  }
  return {worst <= 1e-12, std::to_string(configs) + " configurations, max abs difference " + sci(worst)};
}

Verdict blend_avg_oracle() {
  Rng rng(77);
  std::uniform_real_distribution<double> u(0, 1);
  double worst = 0, worst_sum = 0;
  int discard_mismatches = 0;
  const int sets = 200;
  for (int t = 0; t < sets; ++t) {
    const std::size_t k = 1 + rng() % 8, len = 1 + rng() % 32;
    const double a_global = u(rng);
    std::vector<Submission> subs;
    std::vector<std::vector<double>> kept;
    std::vector<double> deltas;
    std::set<std::string> want_discard;
    for (std::size_t i = 0; i < k; ++i) {
      ParamVector p(len);
      for (double& v : p) v = u(rng) * 10 - 5;
      // a few exact ties with the global score
      const double score = rng() % 10 == 0 ? a_global : u(rng);
      const std::string tag = "c" + std::to_string(i);
      subs.push_back({tag, p, score});
      if (score - a_global > 0) {
        kept.push_back(p);
        deltas.push_back(score - a_global);
      } else {
        want_discard.insert(tag);
      }
    }
    const ParamVector prev(len, 0.5);
    const auto res = blend_avg(subs, a_global, prev);
    const std::set<std::string> got(res.weights.discarded.begin(), res.weights.discarded.end());
    if (got != want_discard) ++discard_mismatches;
    if (kept.empty()) {
      if (res.params != prev) ++discard_mismatches;
      continue;
    }
    const double total = std::accumulate(deltas.begin(), deltas.end(), 0.0);
    for (double& d : deltas) d /= total;
    const auto want = oracle::weighted_sum(kept, deltas);
    for (std::size_t i = 0; i < len; ++i) worst = std::max(worst, std::abs(res.params[i] - want[i]));
    double s = 0;
    for (const auto& [tag, w] : res.weights.kept) s += w;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  const bool ok = worst <= 1e-12 && worst_sum <= 1e-12 && discard_mismatches == 0;
  return {ok, std::to_string(sets) + " sets, max param error " + sci(worst) + ", max |sum w - 1| " + sci(worst_sum) +
                  ", discard mismatches " + std::to_string(discard_mismatches)};
}

Verdict metric_oracles() {
  Rng rng(99);
  std::uniform_real_distribution<double> u(0, 1);
  double worst = 0;
  const int batches = 300;
  for (int t = 0; t < batches; ++t) {
    const std::size_t n = 2 + rng() % 199;
    const bool coarse = t % 3 == 0;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? std::round(u(rng) * 5) / 5 : u(rng);
      y[i] = u(rng) < 0.35 ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(auroc_binary(s, y) - oracle::auroc(s, y)));
    worst = std::max(worst, std::abs(auprc_binary(s, y) - oracle::average_precision(s, y)));
  }
  return {worst <= 1e-12, std::to_string(batches) + " batches, max abs difference " + sci(worst)};
}

Verdict convergence() {
  const auto cfg = load_config(source_path("configs/convergence.yaml").string());
  double worst_m = 1, worst_a = 1, worst_b = 1;
  for (auto seed : cfg.seeds) {
    const auto res = run_seed(cfg, seed);
    const auto& last = res.reports.back();
    worst_m = std::min(worst_m, last.test_metrics(Head::Multimodal).auroc);
    worst_a = std::min(worst_a, last.test_metrics(Head::UnimodalA).auroc);
    worst_b = std::min(worst_b, last.test_metrics(Head::UnimodalB).auroc);
  }
  const bool ok = worst_m >= 0.95 && worst_a >= 0.85 && worst_b >= 0.85;
  return {ok, "min over " + std::to_string(cfg.seeds.size()) + " seeds: multimodal " + fmt(worst_m) + ", unimodal A " +
                  fmt(worst_a) + ", unimodal B " + fmt(worst_b)};
}

Verdict ratio_ordering() {
  const auto cfg = load_config(source_path("configs/ablation.yaml").string());
  const auto med = median_auroc(run_ablation_grid(cfg, kDefaultRatios, {}, true), false);
  const double a = med.at({Protocol::SplitNN, 0.9}) - med.at({Protocol::FedAvg, 0.9});
  const double b = med.at({Protocol::FedAvg, 0.1}) - med.at({Protocol::SplitNN, 0.1});
  double c = 1e300;
  for (double r : kDefaultRatios)
    c = std::min(c, med.at({Protocol::BlendFL, r}) -
                        std::max(med.at({Protocol::FedAvg, r}), med.at({Protocol::SplitNN, r})));
  const bool ok = a > 0 && b > 0 && c >= -0.02;
  return {ok, "SplitNN-FedAvg at 90/10 " + fmt(a) + ", FedAvg-SplitNN at 10/90 " + fmt(b) +
                  ", min BlendFL-best " + fmt(c)};
}

Verdict speedup() {
  auto cfg = load_config(source_path("configs/speedup.yaml").string());
  cfg.target = 0.90;
  const auto rows = measure_speedup(cfg, {1, 2, 4, 6}, true);
  std::string detail;
  bool ok = true;
  for (const auto& r : rows) {
    const auto s = r.speedup();
    detail += (detail.empty() ? "" : ", ") + std::string("interval ") + std::to_string(r.interval) + " " +
              (s ? fmt(*s, 3) : std::string("unreached"));
    if (!s || *s < 1.0) ok = false;
  }
  const auto first = rows.front().speedup(), last = rows.back().speedup();
  if (!first || !last || !(*last > *first)) ok = false;
  return {ok, "speedup " + detail};
}

Verdict client_trend() {
  const auto cfg = load_config(source_path("configs/ablation.yaml").string());
  const std::vector<int> counts = {4, 8, 12};
  const auto med = median_auroc(run_ablation_grid(cfg, {}, counts, true), true);
  std::vector<double> diff;
  for (int n : counts) diff.push_back(med.at({Protocol::FedAvg, n}) - med.at({Protocol::SplitNN, n}));
  bool ok = true;
  for (std::size_t i = 1; i < diff.size(); ++i) ok = ok && diff[i] >= diff[i - 1];
  return {ok, "FedAvg-SplitNN median AUROC at 4/8/12 clients: " + fmt(diff[0]) + ", " + fmt(diff[1]) + ", " +
                  fmt(diff[2])};
}

Verdict decentralized_inference() {
  const auto dir = scratch("infer");
  auto cfg = load_config(source_path("configs/convergence.yaml").string());
  cfg.seeds = {0};
  cfg.protocol.epochs = 5;
  cfg.output_dir = (dir / "out").string();
  std::ofstream(dir / "cfg.yaml") << serialize_config(cfg);
  if (run_cli("run \"" + (dir / "cfg.yaml").string() + "\"", dir / "run.log") != 0)
    return {false, "run failed: " + slurp(dir / "run.log")};

  SyntheticSpec spec = cfg.data;
  spec.n_samples = 12;
  spec.seed = 42;
  SampleSet samples;
  for (const auto& s : generate_synthetic(spec)) {
    samples.push_back(s);
    samples.push_back(s.only(Modality::A));
    samples.push_back(s.only(Modality::B));
  }
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].id = static_cast<SampleId>(i);
  {
    std::ofstream os(dir / "samples.tsv");
    write_samples(os, samples);
  }
  if (run_cli("infer \"" + (dir / "out" / "model_seed0.ckpt").string() + "\" \"" + (dir / "samples.tsv").string() + "\"",
              dir / "infer.log") != 0)
    return {false, "infer failed: " + slurp(dir / "infer.log")};
  const auto out = slurp(dir / "infer.log");
  std::map<std::string, int> heads;
  std::istringstream lines(out);
  std::string line;
  std::getline(lines, line);  // header
  int rows = 0;
  while (std::getline(lines, line)) {
    if (line.rfind("server_messages=", 0) == 0) break;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, '\t');) fields.push_back(f);
    if (fields.size() >= 3) ++heads[fields[2]], ++rows;
  }
  const bool zero = out.find("server_messages=0\n") != std::string::npos;
  const bool ok = zero && rows == static_cast<int>(samples.size()) && heads["multimodal"] == 12 &&
                  heads["unimodal_A"] == 12 && heads["unimodal_B"] == 12;
  fs::remove_all(dir);
  return {ok, std::to_string(rows) + " predictions (" + std::to_string(heads["multimodal"]) + " paired, " +
                  std::to_string(heads["unimodal_A"]) + " A-only, " + std::to_string(heads["unimodal_B"]) +
                  " B-only), server_messages " + (zero ? "0" : "nonzero")};
}

Verdict determinism() {
  const auto dir = scratch("determinism");
  const auto cfg = source_path("configs/convergence.yaml").string();
  for (const char* name : {"a", "b"})
    if (run_cli("run \"" + cfg + "\" --out \"" + (dir / name).string() + "\"", dir / (std::string(name) + ".log")) != 0)
      return {false, std::string("run ") + name + " failed"};
  const auto a = slurp(dir / "a" / "rounds.jsonl"), b = slurp(dir / "b" / "rounds.jsonl");
  const bool ok = !a.empty() && a == b;
  const auto lines = std::count(a.begin(), a.end(), '\n');
  fs::remove_all(dir);
  return {ok, "rounds.jsonl " + std::to_string(a.size()) + " bytes, " + std::to_string(lines) + " lines, " +
                  (ok ? "identical" : "different")};
}

const std::map<int, std::pair<std::string, std::function<Verdict()>>> kCriteria = {
    {1, {"gradient suite", gradient_suite}},
    {2, {"split-learning equivalence", split_equivalence}},
    {3, {"BlendAvg oracle", blend_avg_oracle}},
    {4, {"metric oracles", metric_oracles}},
    {5, {"end-to-end convergence", convergence}},
    {6, {"ratio ordering", ratio_ordering}},
    {7, {"aggregation speedup", speedup}},
    {8, {"client-count trend", client_trend}},
    {9, {"decentralized inference", decentralized_inference}},
    {10, {"determinism", determinism}},
};

bool check(int n) {
  const auto& [name, fn] = kCriteria.at(n);
  const auto start = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = fn();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << "criterion " << n << " (" << name << "): " << (v.pass ? "PASS" : "FAIL") << ' ' << v.detail << " ("
            << fmt(secs, 1) << "s)" << std::endl;
  return v.pass;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--criterion" && i + 1 < argc) {
      which.push_back(std::atoi(argv[++i]));
    } else {
      std::cerr << "usage: acceptance [--criterion N]...\n";
      return 2;
    }
  }
  if (which.empty())
    for (const auto& [n, _] : kCriteria) which.push_back(n);
  bool all = true;
  for (int n : which) {
    if (!kCriteria.count(n)) {
      std::cerr << "no criterion " << n << '\n';
      return 2;
    }
    all = check(n) && all;
  }
  return all ? 0 : 1;
}
