#pragma once

#include <compare>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "blendfl/bundle.hpp"
#include "blendfl/data.hpp"
#include "blendfl/errors.hpp"
#include "blendfl/nn.hpp"
#include "blendfl/rng.hpp"

namespace blendfl {

/// Identifies one vertical exchange: global round and step within it.
struct RoundTag {
  int round = 0;
  int step = 0;
  friend auto operator<=>(const RoundTag&, const RoundTag&) = default;
};

inline std::string to_string(const RoundTag& t) {
  return "r" + std::to_string(t.round) + "s" + std::to_string(t.step);
}

enum class FeatureSource { Fragmented, Paired };

/// Encoder outputs sent to the vertical server. Labels ride along with modality A.
struct FeatureBatch {
  ClientId client = 0;
  Modality modality = Modality::A;
  RoundTag tag;
  std::vector<SampleId> ids;
  Matrix features;
  std::optional<std::vector<int>> labels;
};

/// Server reply: per-sample loss gradients w.r.t. the features, in the batch's id order.
/// The client scales them by 1/normalizer (the server's batch size) before backprop.
struct GradientBatch {
  ClientId client = 0;
  Modality modality = Modality::A;
  RoundTag tag;
  std::vector<SampleId> ids;
  Matrix grads;
  double normalizer = 1.0;
};

struct Prediction {
  int label = 0;
  std::vector<double> probabilities;
  Head head = Head::Multimodal;
};

struct LocalCounts {
  std::size_t paired = 0;
  std::size_t fragmented_a = 0;
  std::size_t fragmented_b = 0;
  std::size_t partial_a = 0;
  std::size_t partial_b = 0;

  std::size_t modality(Modality m) const {
    return paired + (m == Modality::A ? fragmented_a + partial_a : fragmented_b + partial_b);
  }
};

namespace client_detail {

struct PendingTrace {
  RoundTag tag;
  std::vector<SampleId> ids;
  ForwardTrace trace;
};

// Draws a fresh permutation of [0, n) and cuts it into batches.
inline std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle_in_place(order, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return out;
}

}  // namespace client_detail

/// Which local records feed the unimodal (partial) phase besides partial ones.
struct UnimodalSources {
  bool fragmented = true;
  bool paired = false;  // single-modality views of paired records
};

/// One client's private state. Raw features and labels never leave this object except
/// as encoder outputs (FeatureBatch) and model parameters (bundle()).
class Client {
 public:
  /// Builds the client's local models from a common global initialisation: f/g for
  /// each modality held, g_M when paired data is present.
  Client(ClientDataset data, const ModelBundle& global, std::uint64_t shuffle_seed, UnimodalSources sources = {})
      : data_(std::move(data)), rng_(shuffle_seed), sources_(sources) {
    for (Modality m : {Modality::A, Modality::B}) {
      if (!data_.holds(m)) continue;
      bundle_.encoder(m) = global.encoder(m);
      bundle_.classifier(m) = global.classifier(m);
    }
    if (!data_.paired.empty()) bundle_.g_m = global.g_m;
    bundle_.validate();
  }

  ClientId id() const noexcept { return data_.client_id; }
  const ModelBundle& bundle() const noexcept { return bundle_; }

  LocalCounts counts() const {
    return {data_.paired.size(), data_.fragmented_a.size(), data_.fragmented_b.size(), data_.partial_a.size(),
            data_.partial_b.size()};
  }

  /// Sample identifiers the client is willing to align on (never the features).
  std::vector<SampleId> fragmented_ids(Modality m) const { return ids_of(data_.fragmented(m)); }
  std::vector<SampleId> paired_ids() const { return ids_of(data_.paired); }

  std::size_t pending_trace_count() const noexcept { return pending_.size(); }
  bool has_pending(Modality m) const { return pending_.count(m) != 0; }

  /// Number of samples a unimodal local epoch uses for modality m.
  std::size_t unimodal_sample_count(Modality m) const {
    return data_.partial(m).size() + (sources_.fragmented ? data_.fragmented(m).size() : 0) +
           (sources_.paired ? data_.paired.size() : 0);
  }

  /// One epoch of mini-batch SGD on f_m and g_m over the single-modality records of m.
  /// Returns nullopt (and leaves the state untouched) when there is nothing to train on.
  std::optional<double> train_local_partial(Modality m, double lr, std::size_t batch_size) {
    SampleSet samples = data_.partial(m);
    if (sources_.fragmented) samples.insert(samples.end(), data_.fragmented(m).begin(), data_.fragmented(m).end());
    if (sources_.paired)
      for (const auto& s : data_.paired) samples.push_back(s.only(m));
    if (samples.empty() || !bundle_.has_unimodal(m)) return std::nullopt;
    check_batch_size(batch_size);

    const Matrix x = feature_matrix(samples, m);
    const std::vector<int> y = label_vector(samples);
    double total = 0;
    for (const auto& batch : client_detail::minibatches(samples.size(), batch_size, rng_)) {
      const Matrix xb = select_rows(x, batch);
      std::vector<int> yb;
      for (auto i : batch) yb.push_back(y[i]);
      auto& f = *bundle_.encoder(m);
      auto& g = *bundle_.classifier(m);
      auto enc = forward(f, xb);
      auto cls = forward(g, enc.output);
      auto loss = loss_and_grad(cls.output, yb, LossKind::CategoricalCrossEntropy);
      auto g_back = backward(g, cls.trace, loss.output_grad);
      auto f_back = backward(f, enc.trace, g_back.input_grad);
      g = sgd_step(std::move(g), g_back.param_grad, lr);
      f = sgd_step(std::move(f), f_back.param_grad, lr);
      total += loss.loss * static_cast<double>(batch.size());
    }
    return total / static_cast<double>(samples.size());
  }

  /// Encodes every fragmented record of modality m for the vertical server.
  FeatureBatch client_forward_fragmented(Modality m, RoundTag tag) {
    return forward_for_server(m, FeatureSource::Fragmented, fragmented_ids(m), tag);
  }

  /// Encodes the listed records (in the given order) and caches the trace under `tag`.
  /// At most one exchange per modality may be outstanding.
  FeatureBatch forward_for_server(Modality m, FeatureSource source, std::span<const SampleId> ids, RoundTag tag) {
    if (pending_.count(m))
      throw ProtocolError("client " + std::to_string(id()) + ": modality " + to_string(m) +
                          " already has an outstanding exchange " + to_string(pending_.at(m).tag));
    if (!bundle_.encoder(m)) throw ProtocolError("client " + std::to_string(id()) + " has no encoder for " + to_string(m));
    const SampleSet& pool = source == FeatureSource::Fragmented ? data_.fragmented(m) : data_.paired;
    if (pool.empty()) throw ProtocolError("client " + std::to_string(id()) + " holds no such records for " + to_string(m));
    std::map<SampleId, std::size_t> index;
    for (std::size_t i = 0; i < pool.size(); ++i) index.emplace(pool[i].id, i);

    SampleSet chosen;
    for (SampleId sid : ids) {
      auto it = index.find(sid);
      if (it == index.end())
        throw ProtocolError("client " + std::to_string(id()) + " does not hold sample " + std::to_string(sid));
      chosen.push_back(pool[it->second]);
    }
    if (chosen.empty()) throw ProtocolError("empty feature request");

    auto enc = forward(*bundle_.encoder(m), feature_matrix(chosen, m));
    FeatureBatch out{id(), m, tag, {ids.begin(), ids.end()}, std::move(enc.output), std::nullopt};
    if (m == Modality::A) out.labels = label_vector(chosen);
    pending_.emplace(m, client_detail::PendingTrace{tag, out.ids, std::move(enc.trace)});
    return out;
  }

  /// Backpropagates the server's feature gradients through the cached encoder trace
  /// and takes one SGD step. Returns the encoder gradient that was applied.
  ParamVector apply_server_gradients(const GradientBatch& g, double lr) {
    auto it = pending_.find(g.modality);
    if (it == pending_.end() || it->second.tag != g.tag)
      throw ProtocolError("client " + std::to_string(id()) + ": no cached trace for " + to_string(g.modality) + " at " +
                          to_string(g.tag));
    if (g.ids != it->second.ids) throw ProtocolError("gradient ids do not match the emitted feature batch");
    if (!g.grads.same_shape(it->second.trace.activations.back()))
      throw ProtocolError("gradient shape " + g.grads.shape_string() + " does not match emitted features " +
                          it->second.trace.activations.back().shape_string());
    if (!(g.normalizer > 0)) throw ProtocolError("gradient normalizer must be positive");

    Matrix scaled = g.grads;
    for (double& v : scaled.values()) v /= g.normalizer;
    auto& f = *bundle_.encoder(g.modality);
    auto back = backward(f, it->second.trace, scaled);
    f = sgd_step(std::move(f), back.param_grad, lr);
    pending_.erase(it);
    return back.param_grad;
  }

  /// One epoch of end-to-end SGD on f_A, f_B and g_M over the paired records.
  std::optional<double> train_local_paired(double lr, std::size_t batch_size) {
    if (data_.paired.empty() || !bundle_.has_multimodal()) return std::nullopt;
    check_batch_size(batch_size);
    const Matrix xa = feature_matrix(data_.paired, Modality::A);
    const Matrix xb = feature_matrix(data_.paired, Modality::B);
    const std::vector<int> y = label_vector(data_.paired);
    double total = 0;
    for (const auto& batch : client_detail::minibatches(data_.paired.size(), batch_size, rng_)) {
      std::vector<int> yb;
      for (auto i : batch) yb.push_back(y[i]);
      auto step = fused_step(*bundle_.f_a, *bundle_.f_b, *bundle_.g_m, select_rows(xa, batch), select_rows(xb, batch), yb);
      *bundle_.f_a = sgd_step(std::move(*bundle_.f_a), step.grad_f_a, lr);
      *bundle_.f_b = sgd_step(std::move(*bundle_.f_b), step.grad_f_b, lr);
      *bundle_.g_m = sgd_step(std::move(*bundle_.g_m), step.grad_g_m, lr);
      total += step.loss * static_cast<double>(batch.size());
    }
    return total / static_cast<double>(data_.paired.size());
  }

  /// Gradients of the mean loss of g_M(f_A(x_A) | f_B(x_B)) w.r.t. all three networks.
  struct FusedGradients {
    double loss = 0;
    ParamVector grad_f_a, grad_f_b, grad_g_m;
  };

  static FusedGradients fused_step(const Network& f_a, const Network& f_b, const Network& g_m, const Matrix& xa,
                                   const Matrix& xb, std::span<const int> y) {
    auto ea = forward(f_a, xa);
    auto eb = forward(f_b, xb);
    auto head = forward(g_m, hconcat(ea.output, eb.output));
    auto loss = loss_and_grad(head.output, y, LossKind::CategoricalCrossEntropy);
    auto g_back = backward(g_m, head.trace, loss.output_grad);
    const std::size_t da = f_a.output_dim();
    auto a_back = backward(f_a, ea.trace, column_block(g_back.input_grad, 0, da));
    auto b_back = backward(f_b, eb.trace, column_block(g_back.input_grad, da, f_b.output_dim()));
    return {loss.loss, std::move(a_back.param_grad), std::move(b_back.param_grad), std::move(g_back.param_grad)};
  }

  /// Decentralised prediction from locally held models only.
  Prediction local_inference(const MultimodalSample& s) const { return infer_with(bundle_, s); }

  static Prediction infer_with(const ModelBundle& bundle, const MultimodalSample& s) {
    Matrix probs;
    Head head;
    auto row = [](const std::vector<double>& v) { return Matrix::from_rows({v}); };
    if (s.paired() && bundle.has_multimodal()) {
      head = Head::Multimodal;
      probs = predict_multimodal(bundle, row(*s.x_a), row(*s.x_b));
    } else if (s.x_a && bundle.has_unimodal(Modality::A)) {
      head = Head::UnimodalA;
      probs = predict_unimodal(bundle, Modality::A, row(*s.x_a));
    } else if (s.x_b && bundle.has_unimodal(Modality::B)) {
      head = Head::UnimodalB;
      probs = predict_unimodal(bundle, Modality::B, row(*s.x_b));
    } else {
      throw CapabilityError("no local head can score sample " + std::to_string(s.id));
    }
    Prediction p;
    p.head = head;
    p.probabilities.assign(probs.row(0).begin(), probs.row(0).end());
    p.label = static_cast<int>(std::max_element(p.probabilities.begin(), p.probabilities.end()) -
                               p.probabilities.begin());
    return p;
  }

  /// Overwrites local models with the blended globals. Every client receives g_M.
  void local_update(const ModelBundle& global) {
    for (Modality m : {Modality::A, Modality::B}) {
      if (bundle_.encoder(m) && global.encoder(m)) bundle_.encoder(m) = global.encoder(m);
      if (bundle_.classifier(m) && global.classifier(m)) bundle_.classifier(m) = global.classifier(m);
    }
    if (global.g_m) bundle_.g_m = global.g_m;
  }

  /// Replaces one encoder, e.g. when split-learning weights are relayed between clients.
  void receive_encoder(Modality m, const Network& net) {
    if (!bundle_.encoder(m)) throw CapabilityError("client has no encoder for " + std::string(to_string(m)));
    if (bundle_.encoder(m)->layers() != net.layers()) throw AggregationError("relayed encoder has a different architecture");
    bundle_.encoder(m) = net;
  }

  const Network& encoder(Modality m) const {
    if (!bundle_.encoder(m)) throw CapabilityError("client has no encoder for " + std::string(to_string(m)));
    return *bundle_.encoder(m);
  }

 private:
  static std::vector<SampleId> ids_of(const SampleSet& s) {
    std::vector<SampleId> out;
    out.reserve(s.size());
    for (const auto& x : s) out.push_back(x.id);
    return out;
  }

  static void check_batch_size(std::size_t b) {
    if (b == 0) throw DataError("batch size must be positive");
  }

  ClientDataset data_;
  ModelBundle bundle_;
  Rng rng_;
  UnimodalSources sources_;
  std::map<Modality, client_detail::PendingTrace> pending_;
};

}  // namespace blendfl
