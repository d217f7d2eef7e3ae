#pragma once

#include <optional>
#include <string>

#include "blendfl/nn.hpp"

namespace blendfl {

enum class Modality { A, B };

inline const char* to_string(Modality m) { return m == Modality::A ? "A" : "B"; }

/// Prediction heads. Tags are stable and appear in reports and CSV files.
enum class Head { Multimodal, UnimodalA, UnimodalB };

inline const char* to_string(Head h) {
  switch (h) {
    case Head::Multimodal: return "multimodal";
    case Head::UnimodalA: return "unimodal_A";
    case Head::UnimodalB: return "unimodal_B";
  }
  return "?";
}

inline Head unimodal_head(Modality m) { return m == Modality::A ? Head::UnimodalA : Head::UnimodalB; }

/// Encoders f_A, f_B and classifiers g_A, g_B, g_M held by one party.
/// g_M consumes the concatenation h_A | h_B.
struct ModelBundle {
  std::optional<Network> f_a;
  std::optional<Network> f_b;
  std::optional<Network> g_a;
  std::optional<Network> g_b;
  std::optional<Network> g_m;

  std::optional<Network>& encoder(Modality m) { return m == Modality::A ? f_a : f_b; }
  const std::optional<Network>& encoder(Modality m) const { return m == Modality::A ? f_a : f_b; }
  std::optional<Network>& classifier(Modality m) { return m == Modality::A ? g_a : g_b; }
  const std::optional<Network>& classifier(Modality m) const { return m == Modality::A ? g_a : g_b; }

  bool has_unimodal(Modality m) const { return encoder(m).has_value() && classifier(m).has_value(); }
  bool has_multimodal() const { return f_a && f_b && g_m; }

  /// Checks the structural invariants; throws ShapeError on violation.
  void validate() const {
    if (g_a && !f_a) throw ShapeError("bundle has g_A without f_A");
    if (g_b && !f_b) throw ShapeError("bundle has g_B without f_B");
    if (f_a && g_a && f_a->output_dim() != g_a->input_dim()) throw ShapeError("g_A input does not match f_A output");
    if (f_b && g_b && f_b->output_dim() != g_b->input_dim()) throw ShapeError("g_B input does not match f_B output");
    if (g_m && f_a && f_b && g_m->input_dim() != f_a->output_dim() + f_b->output_dim())
      throw ShapeError("g_M input must equal dim(h_A) + dim(h_B)");
  }

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

/// Architecture shared by every party so parameters can be aggregated.
struct ModelArch {
  std::size_t dim_a = 8;
  std::size_t dim_b = 8;
  std::size_t latent_dim = 8;
  std::size_t encoder_hidden_layers = 0;  // extra relu layers before the latent layer
  std::size_t n_classes = 2;

  std::vector<LayerSpec> encoder_layers(Modality m) const {
    std::vector<LayerSpec> out;
    std::size_t in = m == Modality::A ? dim_a : dim_b;
    for (std::size_t k = 0; k < encoder_hidden_layers; ++k) {
      out.push_back({in, latent_dim, Activation::Relu});
      in = latent_dim;
    }
    out.push_back({in, latent_dim, Activation::Relu});
    return out;
  }
  std::vector<LayerSpec> unimodal_layers() const { return {{latent_dim, n_classes, Activation::Softmax}}; }
  std::vector<LayerSpec> multimodal_layers() const { return {{2 * latent_dim, n_classes, Activation::Softmax}}; }

  /// Complete bundle with all five models, deterministic in the rng state.
  ModelBundle initialize(Rng& rng) const {
    ModelBundle b;
    b.f_a = Network::initialized(encoder_layers(Modality::A), rng);
    b.f_b = Network::initialized(encoder_layers(Modality::B), rng);
    b.g_a = Network::initialized(unimodal_layers(), rng);
    b.g_b = Network::initialized(unimodal_layers(), rng);
    b.g_m = Network::initialized(multimodal_layers(), rng);
    return b;
  }

  friend bool operator==(const ModelArch&, const ModelArch&) = default;
};

inline Matrix predict_unimodal(const ModelBundle& b, Modality m, const Matrix& x) {
  if (!b.has_unimodal(m)) throw CapabilityError(std::string("no unimodal head for modality ") + to_string(m));
  return predict(*b.classifier(m), predict(*b.encoder(m), x));
}

/// g_M(f_A(x_A) | f_B(x_B)), with explicit encoders/classifier.
inline Matrix predict_fused(const Network& f_a, const Network& f_b, const Network& g_m, const Matrix& xa,
                            const Matrix& xb) {
  return predict(g_m, hconcat(predict(f_a, xa), predict(f_b, xb)));
}

inline Matrix predict_multimodal(const ModelBundle& b, const Matrix& xa, const Matrix& xb) {
  if (!b.has_multimodal()) throw CapabilityError("no multimodal head (needs f_A, f_B and g_M)");
  return predict_fused(*b.f_a, *b.f_b, *b.g_m, xa, xb);
}

/// Encoder and classifier parameters of one modality, concatenated (the unimodal aggregation unit).
inline ParamVector unimodal_stack_params(const ModelBundle& b, Modality m) {
  ParamVector p = b.encoder(m)->params();
  const auto& g = b.classifier(m)->params();
  p.insert(p.end(), g.begin(), g.end());
  return p;
}

/// Inverse of unimodal_stack_params: writes a stacked vector back into f and g.
inline void set_unimodal_stack_params(ModelBundle& b, Modality m, const ParamVector& stacked) {
  auto& f = *b.encoder(m);
  auto& g = *b.classifier(m);
  const std::size_t nf = f.params().size();
  if (stacked.size() != nf + g.params().size()) throw ShapeError("stacked unimodal parameters have wrong length");
  f.set_params(ParamVector(stacked.begin(), stacked.begin() + static_cast<std::ptrdiff_t>(nf)));
  g.set_params(ParamVector(stacked.begin() + static_cast<std::ptrdiff_t>(nf), stacked.end()));
}

}  // namespace blendfl
