#include <gtest/gtest.h>

#include "blendfl/client.hpp"
#include "blendfl/metrics.hpp"
#include "oracles.hpp"

using namespace blendfl;

namespace {

const ModelArch kArch{3, 2, 4, 0, 3};

ModelBundle fresh_bundle(std::uint64_t seed = 1) {
  Rng rng(seed);
  return kArch.initialize(rng);
}

MultimodalSample sample(SampleId id, int label, double shift = 0) {
  return {id, std::vector<double>{1 + shift, -0.5, 0.25 * label}, std::vector<double>{0.3 * label, 2 - shift}, label};
}

Network identity_encoder(std::size_t dim) {
  ParamVector p(dim * dim + dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) p[i * dim + i] = 1.0;
  return Network({{dim, dim, Activation::Identity}}, p);
}

ClientDataset fragmented_client(ClientId id, Modality m, std::vector<SampleId> ids) {
  ClientDataset d;
  d.client_id = id;
  for (SampleId s : ids) d.fragmented(m).push_back(sample(s, static_cast<int>(s % 3), 0.1 * static_cast<double>(s)).only(m));
  return d;
}

}  // namespace

TEST(ClientSetup, ModelsFollowHoldings) {
  ClientDataset only_b;
  only_b.partial_b.push_back(sample(1, 0).only(Modality::B));
  Client c(only_b, fresh_bundle(), 0);
  EXPECT_FALSE(c.bundle().f_a);
  EXPECT_TRUE(c.bundle().f_b && c.bundle().g_b);
  EXPECT_FALSE(c.bundle().g_m);

  ClientDataset paired;
  paired.paired.push_back(sample(2, 1));
  Client p(paired, fresh_bundle(), 0);
  EXPECT_TRUE(p.bundle().has_multimodal());
  EXPECT_TRUE(p.bundle().has_unimodal(Modality::A));
  EXPECT_EQ(p.counts().modality(Modality::A), 1u);
}

TEST(LocalPartial, EmptyModalityIsNoOp) {
  ClientDataset d;
  d.partial_a.push_back(sample(1, 0).only(Modality::A));
  Client c(d, fresh_bundle(), 0);
  const auto before = c.bundle();
  EXPECT_FALSE(c.train_local_partial(Modality::B, 0.1, 4));
  EXPECT_EQ(c.bundle(), before);
  EXPECT_FALSE(c.train_local_paired(0.1, 4));
  EXPECT_EQ(c.bundle(), before);
}

TEST(LocalPartial, SingleSampleLossDecreases) {
  ClientDataset d;
  d.partial_a.push_back(sample(1, 2).only(Modality::A));
  Client c(d, fresh_bundle(3), 0);
  double prev = *c.train_local_partial(Modality::A, 0.1, 1);
  for (int epoch = 0; epoch < 5; ++epoch) {
    const double now = *c.train_local_partial(Modality::A, 0.1, 1);
    EXPECT_LT(now, prev);
    prev = now;
  }
  EXPECT_FALSE(c.bundle().f_b);
}

TEST(LocalPartial, MatchesManualGradientStep) {
  ClientDataset d;
  const auto s = sample(4, 1).only(Modality::B);
  d.partial_b.push_back(s);
  const auto global = fresh_bundle(5);
  Client c(d, global, 0);
  c.train_local_partial(Modality::B, 0.2, 8);

  const Matrix x = Matrix::from_rows({*s.x_b});
  const auto enc = forward(*global.f_b, x);
  const auto cls = forward(*global.g_b, enc.output);
  const auto loss = loss_and_grad(cls.output, std::vector<int>{1}, LossKind::CategoricalCrossEntropy);
  const auto gb = backward(*global.g_b, cls.trace, loss.output_grad);
  const auto fb = backward(*global.f_b, enc.trace, gb.input_grad);
  EXPECT_EQ(*c.bundle().g_b, sgd_step(*global.g_b, gb.param_grad, 0.2));
  EXPECT_EQ(*c.bundle().f_b, sgd_step(*global.f_b, fb.param_grad, 0.2));
}

TEST(LocalPartial, BatchSizeValidated) {
  ClientDataset d;
  d.partial_a.push_back(sample(1, 0).only(Modality::A));
  Client c(d, fresh_bundle(), 0);
  EXPECT_THROW(c.train_local_partial(Modality::A, 0.1, 0), DataError);
}

TEST(LocalPartial, SourcesControlWhichRecordsTrain) {
  ClientDataset d;
  d.paired.push_back(sample(1, 0));
  d.fragmented_a.push_back(sample(2, 1).only(Modality::A));
  d.partial_a.push_back(sample(3, 2).only(Modality::A));
  EXPECT_EQ(Client(d, fresh_bundle(), 0).unimodal_sample_count(Modality::A), 2u);
  EXPECT_EQ(Client(d, fresh_bundle(), 0, {false, false}).unimodal_sample_count(Modality::A), 1u);
  EXPECT_EQ(Client(d, fresh_bundle(), 0, {true, true}).unimodal_sample_count(Modality::A), 3u);
}

TEST(ClientForward, IdentityEncoderEmitsRawFeaturesAndLabels) {
  auto global = fresh_bundle();
  global.f_a = identity_encoder(3);
  global.g_a.reset();
  global.g_m.reset();
  Client c(fragmented_client(0, Modality::A, {4, 7}), global, 0);
  const auto batch = c.client_forward_fragmented(Modality::A, {1, 0});
  EXPECT_EQ(batch.ids, (std::vector<SampleId>{4, 7}));
  EXPECT_EQ(batch.features, feature_matrix(fragmented_client(0, Modality::A, {4, 7}).fragmented_a, Modality::A));
  ASSERT_TRUE(batch.labels);
  EXPECT_EQ(*batch.labels, (std::vector<int>{1, 1}));
  EXPECT_EQ(c.pending_trace_count(), 1u);
}

TEST(ClientForward, ModalityBCarriesNoLabels) {
  Client c(fragmented_client(1, Modality::B, {3}), fresh_bundle(), 0);
  const auto batch = c.client_forward_fragmented(Modality::B, {0, 0});
  EXPECT_FALSE(batch.labels);
  EXPECT_EQ(batch.features.cols(), kArch.latent_dim);
}

TEST(ClientForward, IdsMatchAlignmentTable) {
  SyntheticSpec spec;
  spec.n_samples = 120;
  spec.dim_a = 3;
  spec.dim_b = 2;
  spec.n_classes = 3;
  const auto datasets = partition(generate_synthetic(spec), {4, 0.2, 0.6, PartitionLayout::RoundRobin, 9});
  const auto table = intersect_fragmented(datasets);
  for (const auto& d : datasets) {
    Client c(d, fresh_bundle(), 0);
    for (Modality m : {Modality::A, Modality::B}) {
      if (d.fragmented(m).empty()) continue;
      const auto batch = c.client_forward_fragmented(m, {0, 0});
      for (SampleId id : batch.ids) {
        const auto& entry = table.at(id);
        EXPECT_EQ(m == Modality::A ? entry.client_a : entry.client_b, d.client_id);
      }
    }
  }
}

TEST(ClientForward, OneOutstandingExchangePerModality) {
  Client c(fragmented_client(0, Modality::A, {1, 2}), fresh_bundle(), 0);
  c.client_forward_fragmented(Modality::A, {0, 0});
  EXPECT_THROW(c.client_forward_fragmented(Modality::A, {0, 1}), ProtocolError);
  const std::vector<SampleId> foreign = {99};
  EXPECT_THROW(c.forward_for_server(Modality::B, FeatureSource::Fragmented, foreign, {0, 2}), ProtocolError);
}

TEST(ClientForward, UnknownIdsRejected) {
  Client c(fragmented_client(0, Modality::A, {1, 2}), fresh_bundle(), 0);
  const std::vector<SampleId> ids = {1, 5};
  EXPECT_THROW(c.forward_for_server(Modality::A, FeatureSource::Fragmented, ids, {0, 0}), ProtocolError);
  EXPECT_THROW(c.forward_for_server(Modality::A, FeatureSource::Paired, ids, {0, 0}), ProtocolError);
}

TEST(ServerGradients, ZeroGradientLeavesEncoderUnchanged) {
  Client c(fragmented_client(0, Modality::A, {1, 2, 3}), fresh_bundle(), 0);
  const auto before = *c.bundle().f_a;
  const auto batch = c.client_forward_fragmented(Modality::A, {2, 5});
  c.apply_server_gradients({0, Modality::A, batch.tag, batch.ids, Matrix(3, kArch.latent_dim), 3}, 0.5);
  EXPECT_EQ(c.bundle().f_a->params(), before.params());
  EXPECT_EQ(c.pending_trace_count(), 0u);
}

TEST(ServerGradients, LinearEncoderClosedForm) {
  auto global = fresh_bundle();
  global.f_a = Network({{3, 3, Activation::Identity}}, {0.5, -1, 0, 0.25, 1, 2, -0.5, 0, 1, 0.1, 0.2, 0.3});
  Rng head_rng(1);
  global.g_a = Network::initialized({{3, 3, Activation::Softmax}}, head_rng);
  global.g_m.reset();
  Client c(fragmented_client(0, Modality::A, {10, 11}), global, 0);
  const auto batch = c.client_forward_fragmented(Modality::A, {0, 0});
  const Matrix x = feature_matrix(fragmented_client(0, Modality::A, {10, 11}).fragmented_a, Modality::A);
  const Matrix G{{1, -2, 0.5}, {3, 0, -1}};
  const double lr = 0.1, n = 2;
  c.apply_server_gradients({0, Modality::A, batch.tag, batch.ids, G, n}, lr);

  ParamVector expected = global.f_a->params();
  for (std::size_t o = 0; o < 3; ++o) {
    double gb = 0;
    for (std::size_t r = 0; r < 2; ++r) gb += G(r, o);
    expected[9 + o] -= lr * gb / n;
    for (std::size_t i = 0; i < 3; ++i) {
      double gw = 0;
      for (std::size_t r = 0; r < 2; ++r) gw += G(r, o) * x(r, i);
      expected[o * 3 + i] -= lr * gw / n;
    }
  }
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(c.bundle().f_a->params()[i], expected[i], 1e-14);
}

TEST(ServerGradients, TraceConsumedAndReplayRejected) {
  Client c(fragmented_client(0, Modality::A, {1, 2}), fresh_bundle(), 0);
  const auto batch = c.client_forward_fragmented(Modality::A, {3, 1});
  const GradientBatch g{0, Modality::A, batch.tag, batch.ids, Matrix(2, kArch.latent_dim, 0.1), 2};
  c.apply_server_gradients(g, 0.1);
  EXPECT_FALSE(c.has_pending(Modality::A));
  EXPECT_THROW(c.apply_server_gradients(g, 0.1), ProtocolError);
}

TEST(ServerGradients, MismatchesRejected) {
  Client c(fragmented_client(0, Modality::A, {1, 2}), fresh_bundle(), 0);
  const auto batch = c.client_forward_fragmented(Modality::A, {3, 1});
  const Matrix ok(2, kArch.latent_dim);
  EXPECT_THROW(c.apply_server_gradients({0, Modality::A, {3, 2}, batch.ids, ok, 2}, 0.1), ProtocolError);
  EXPECT_THROW(c.apply_server_gradients({0, Modality::A, batch.tag, {2, 1}, ok, 2}, 0.1), ProtocolError);
  EXPECT_THROW(c.apply_server_gradients({0, Modality::A, batch.tag, batch.ids, Matrix(1, 4), 2}, 0.1), ProtocolError);
  EXPECT_THROW(c.apply_server_gradients({0, Modality::A, batch.tag, batch.ids, ok, 0}, 0.1), ProtocolError);
  EXPECT_TRUE(c.has_pending(Modality::A));
}

TEST(Fused, GradientsMatchFiniteDifferences) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const ModelArch arch{3, 2, 3, static_cast<std::size_t>(trial % 2), 3};
    auto b = arch.initialize(rng);
    // Jitter so no relu sits exactly on its kink (zero bias on a dead input).
    std::uniform_real_distribution<double> jitter(-0.3, 0.3);
    for (auto* net : {&*b.f_a, &*b.f_b, &*b.g_m}) {
      ParamVector p = net->params();
      for (double& v : p) v += jitter(rng);
      net->set_params(p);
    }
    const Matrix xa = oracle::random_matrix(4, 3, rng), xb = oracle::random_matrix(4, 2, rng);
    const std::vector<int> y = {0, 2, 1, 1};
    const auto step = Client::fused_step(*b.f_a, *b.f_b, *b.g_m, xa, xb, y);
    auto loss = [&](const Network& fa, const Network& fb, const Network& gm) {
      return loss_and_grad(predict_fused(fa, fb, gm, xa, xb), y, LossKind::CategoricalCrossEntropy).loss;
    };
    EXPECT_NEAR(step.loss, loss(*b.f_a, *b.f_b, *b.g_m), 1e-12);
    const auto na = oracle::numeric_gradient(
        [&](const ParamVector& p) { return loss(Network(b.f_a->layers(), p), *b.f_b, *b.g_m); }, b.f_a->params());
    const auto nb = oracle::numeric_gradient(
        [&](const ParamVector& p) { return loss(*b.f_a, Network(b.f_b->layers(), p), *b.g_m); }, b.f_b->params());
    const auto nm = oracle::numeric_gradient(
        [&](const ParamVector& p) { return loss(*b.f_a, *b.f_b, Network(b.g_m->layers(), p)); }, b.g_m->params());
    for (std::size_t i = 0; i < na.size(); ++i) EXPECT_LT(oracle::gradient_error(step.grad_f_a[i], na[i]), 1e-4);
    for (std::size_t i = 0; i < nb.size(); ++i) EXPECT_LT(oracle::gradient_error(step.grad_f_b[i], nb[i]), 1e-4);
    for (std::size_t i = 0; i < nm.size(); ++i) EXPECT_LT(oracle::gradient_error(step.grad_g_m[i], nm[i]), 1e-4);
  }
}

TEST(LocalPaired, SeparableDataReachesPerfectAccuracy) {
  SyntheticSpec spec;
  spec.n_samples = 90;
  spec.n_classes = 3;
  spec.dim_a = 3;
  spec.dim_b = 2;
  spec.class_separation = 6;
  spec.noise_std = 0.3;
  ClientDataset d;
  d.paired = generate_synthetic(spec);
  Client c(d, fresh_bundle(2), 4);
  for (int epoch = 0; epoch < 30; ++epoch) c.train_local_paired(0.1, 8);
  const Matrix p = predict_multimodal(c.bundle(), feature_matrix(d.paired, Modality::A),
                                      feature_matrix(d.paired, Modality::B));
  EXPECT_EQ(accuracy(p, label_vector(d.paired)), 1.0);
}

TEST(LocalPaired, DeterministicGivenShuffleSeed) {
  ClientDataset d;
  for (int i = 0; i < 10; ++i) d.paired.push_back(sample(i, i % 3, 0.1 * i));
  Client a(d, fresh_bundle(), 5), b(d, fresh_bundle(), 5);
  EXPECT_EQ(a.train_local_paired(0.1, 3), b.train_local_paired(0.1, 3));
  EXPECT_EQ(a.bundle(), b.bundle());
}

TEST(Inference, DispatchesToAvailableHead) {
  ClientDataset d;
  d.paired.push_back(sample(1, 0));
  Client c(d, fresh_bundle(), 0);
  const auto full = sample(5, 2, 0.3);
  EXPECT_EQ(c.local_inference(full).head, Head::Multimodal);
  EXPECT_EQ(c.local_inference(full.only(Modality::A)).head, Head::UnimodalA);
  EXPECT_EQ(c.local_inference(full.only(Modality::B)).head, Head::UnimodalB);

  ClientDataset only_a;
  only_a.partial_a.push_back(sample(1, 0).only(Modality::A));
  Client ca(only_a, fresh_bundle(), 0);
  EXPECT_EQ(ca.local_inference(full).head, Head::UnimodalA);
  EXPECT_THROW(ca.local_inference(full.only(Modality::B)), CapabilityError);
}

TEST(Inference, MatchesRecomputation) {
  ClientDataset d;
  d.paired.push_back(sample(1, 0));
  Client c(d, fresh_bundle(7), 0);
  const auto s = sample(9, 1, 0.2);
  const auto pred = c.local_inference(s);
  const Matrix p = predict_multimodal(c.bundle(), Matrix::from_rows({*s.x_a}), Matrix::from_rows({*s.x_b}));
  ASSERT_EQ(pred.probabilities.size(), kArch.n_classes);
  for (std::size_t k = 0; k < kArch.n_classes; ++k) EXPECT_EQ(pred.probabilities[k], p(0, k));
  const auto best = std::max_element(pred.probabilities.begin(), pred.probabilities.end());
  EXPECT_EQ(pred.label, best - pred.probabilities.begin());
}

TEST(LocalUpdate, ReplacesHeldModelsAndAddsMultimodal) {
  ClientDataset d;
  d.partial_a.push_back(sample(1, 0).only(Modality::A));
  Client c(d, fresh_bundle(1), 0);
  const auto global = fresh_bundle(2);
  c.local_update(global);
  EXPECT_EQ(c.bundle().f_a, global.f_a);
  EXPECT_EQ(c.bundle().g_a, global.g_a);
  EXPECT_EQ(c.bundle().g_m, global.g_m);
  EXPECT_FALSE(c.bundle().f_b);
}

TEST(ReceiveEncoder, ReplacesOrRejects) {
  ClientDataset d;
  d.partial_a.push_back(sample(1, 0).only(Modality::A));
  Client c(d, fresh_bundle(1), 0);
  const auto other = fresh_bundle(8);
  c.receive_encoder(Modality::A, *other.f_a);
  EXPECT_EQ(c.encoder(Modality::A), *other.f_a);
  EXPECT_THROW(c.receive_encoder(Modality::B, *other.f_b), CapabilityError);
  EXPECT_THROW(c.receive_encoder(Modality::A, identity_encoder(3)), AggregationError);
  EXPECT_THROW(c.encoder(Modality::B), CapabilityError);
}
