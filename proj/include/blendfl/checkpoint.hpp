#pragma once

// Binary checkpoint format. All integers and floats are little-endian.
//
//   network record:
//     8 bytes   magic "BFLNET01"
//     u32       layer count L
//     L times:  u32 input_dim, u32 output_dim, u8 activation (0 identity, 1 relu, 2 sigmoid, 3 softmax)
//     u64       parameter count P
//     P times:  f64 parameter (IEEE-754 binary64)
//
//   bundle file:
//     8 bytes   magic "BFLBDL01"
//     u8        presence mask: bit0 f_A, bit1 f_B, bit2 g_A, bit3 g_B, bit4 g_M
//     one network record per present model, in bit order

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "blendfl/bundle.hpp"
#include "blendfl/errors.hpp"
#include "blendfl/nn.hpp"

namespace blendfl {

namespace checkpoint_detail {

inline constexpr std::array<char, 8> kNetworkMagic = {'B', 'F', 'L', 'N', 'E', 'T', '0', '1'};
inline constexpr std::array<char, 8> kBundleMagic = {'B', 'F', 'L', 'B', 'D', 'L', '0', '1'};

template <typename U>
void put_le(std::ostream& os, U v) {
  for (std::size_t b = 0; b < sizeof(U); ++b) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * b)) & 0xff));
}

template <typename U>
U get_le(std::istream& is) {
  std::uint64_t v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw CheckpointError("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return static_cast<U>(v);
}

inline void expect_magic(std::istream& is, const std::array<char, 8>& magic) {
  std::array<char, 8> got{};
  is.read(got.data(), 8);
  if (!is || got != magic) throw CheckpointError("bad checkpoint magic");
}

}  // namespace checkpoint_detail

inline void write_network(std::ostream& os, const Network& net) {
  using namespace checkpoint_detail;
  os.write(kNetworkMagic.data(), 8);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.depth()));
  for (const auto& l : net.layers()) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.input_dim));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.output_dim));
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(l.activation));
  }
  put_le<std::uint64_t>(os, net.params().size());
  for (double p : net.params()) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(p));
}

inline Network read_network(std::istream& is) {
  using namespace checkpoint_detail;
  expect_magic(is, kNetworkMagic);
  const auto depth = get_le<std::uint32_t>(is);
  if (depth == 0 || depth > 1024) throw CheckpointError("implausible layer count " + std::to_string(depth));
  std::vector<LayerSpec> layers;
  for (std::uint32_t k = 0; k < depth; ++k) {
    LayerSpec l;
    l.input_dim = get_le<std::uint32_t>(is);
    l.output_dim = get_le<std::uint32_t>(is);
    const auto act = get_le<std::uint8_t>(is);
    if (act > 3) throw CheckpointError("unknown activation tag " + std::to_string(act));
    l.activation = static_cast<Activation>(act);
    layers.push_back(l);
  }
  const auto count = get_le<std::uint64_t>(is);
  std::size_t expected = 0;
  for (const auto& l : layers) expected += l.param_count();
  if (count != expected) throw CheckpointError("parameter count does not match architecture descriptor");
  ParamVector params(count);
  for (auto& p : params) p = std::bit_cast<double>(get_le<std::uint64_t>(is));
  try {
    return Network(std::move(layers), std::move(params));
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("invalid architecture: ") + e.what());
  }
}

inline void write_bundle(std::ostream& os, const ModelBundle& b) {
  using namespace checkpoint_detail;
  os.write(kBundleMagic.data(), 8);
  const std::array<const std::optional<Network>*, 5> parts = {&b.f_a, &b.f_b, &b.g_a, &b.g_b, &b.g_m};
  std::uint8_t mask = 0;
  for (std::size_t i = 0; i < parts.size(); ++i)
    if (parts[i]->has_value()) mask |= static_cast<std::uint8_t>(1U << i);
  put_le<std::uint8_t>(os, mask);
  for (const auto* p : parts)
    if (p->has_value()) write_network(os, **p);
}

inline ModelBundle read_bundle(std::istream& is) {
  using namespace checkpoint_detail;
  expect_magic(is, kBundleMagic);
  const auto mask = get_le<std::uint8_t>(is);
  if (mask >= 32) throw CheckpointError("invalid bundle presence mask");
  ModelBundle b;
  const std::array<std::optional<Network>*, 5> parts = {&b.f_a, &b.f_b, &b.g_a, &b.g_b, &b.g_m};
  for (std::size_t i = 0; i < parts.size(); ++i)
    if (mask & (1U << i)) *parts[i] = read_network(is);
  try {
    b.validate();
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("inconsistent bundle: ") + e.what());
  }
  return b;
}

inline void save_bundle(const std::string& path, const ModelBundle& b) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  write_bundle(os, b);
  if (!os) throw CheckpointError("write failed for " + path);
}

inline ModelBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  return read_bundle(is);
}

}  // namespace blendfl
