#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "pcd/errors.hpp"
#include "pcd/tensor.hpp"

namespace pcd {

struct MlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  std::size_t num_classes = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim < 1) throw ConfigError("mlp input_dim must be >= 1");
    for (std::size_t w : hidden) {
      if (w < 1) throw ConfigError("mlp hidden widths must be >= 1");
    }
    if (num_classes < 2) throw ConfigError("mlp num_classes must be >= 2");
  }

  bool operator==(const MlpSpec&) const = default;
};

struct Layer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct ModelParams {
  MlpSpec spec;
  std::vector<Layer> layers;

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& l : layers) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
    return out;
  }

  void zero_grad() {
    for (auto& l : layers) {
      l.weight.zero_grad();
      l.bias.zero_grad();
    }
  }

  // Width of the representation fed to the output layer.
  std::size_t feature_dim() const {
    return spec.hidden.empty() ? spec.input_dim : spec.hidden.back();
  }
};

// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
inline ModelParams init_mlp(const MlpSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  ModelParams params{spec, {}};
  std::size_t fan_in = spec.input_dim;
  std::vector<std::size_t> widths = spec.hidden;
  widths.push_back(spec.num_classes);
  for (std::size_t fan_out : widths) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<double> w(fan_in * fan_out);
    for (double& v : w) v = dist(rng);
    params.layers.push_back({Tensor::from({fan_in, fan_out}, std::move(w), true),
                             Tensor::zeros({fan_out}, true)});
    fan_in = fan_out;
  }
  return params;
}

inline void check_input(const ModelParams& params, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != params.spec.input_dim) {
    throw DimensionError("model expects input [B, " + std::to_string(params.spec.input_dim) +
                         "], got " + shape_str(x.shape()));
  }
}

// Activations after the last hidden ReLU (the input itself when there is no
// hidden layer).
inline Tensor forward_features(const ModelParams& params, const Tensor& x) {
  check_input(params, x);
  Tensor h = x;
  for (std::size_t i = 0; i + 1 < params.layers.size(); ++i) {
    h = relu(affine(h, params.layers[i].weight, params.layers[i].bias));
  }
  return h;
}

inline Tensor forward_logits(const ModelParams& params, const Tensor& x) {
  const Layer& out = params.layers.back();
  return affine(forward_features(params, x), out.weight, out.bias);
}

// Binary checkpoint: magic, format version, spec, then every layer's weight
// and bias values as little-endian IEEE-754 doubles.
namespace checkpoint {

inline constexpr char kMagic[8] = {'P', 'C', 'D', 'M', 'L', 'P', '\0', '\n'};
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) throw IoError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void write(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  detail::put_u64(os, kVersion);
  const MlpSpec& s = params.spec;
  detail::put_u64(os, s.input_dim);
  detail::put_u64(os, s.num_classes);
  detail::put_u64(os, s.seed);
  detail::put_u64(os, s.hidden.size());
  for (std::size_t w : s.hidden) detail::put_u64(os, w);
  for (const Tensor& t : params.parameters()) {
    for (double v : t.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw IoError("failed writing " + path.string());
}

inline ModelParams read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kMagic)) {
    throw IoError(path.string() + " is not a model checkpoint");
  }
  const std::uint64_t version = detail::get_u64(is);
  if (version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  MlpSpec spec;
  spec.input_dim = detail::get_u64(is);
  spec.num_classes = detail::get_u64(is);
  spec.seed = detail::get_u64(is);
  const std::uint64_t depth = detail::get_u64(is);
  if (depth > 1024) throw IoError("corrupt checkpoint: " + std::to_string(depth) + " layers");
  for (std::uint64_t i = 0; i < depth; ++i) spec.hidden.push_back(detail::get_u64(is));
  spec.validate();
  ModelParams params = init_mlp(spec);
  for (Tensor& t : params.parameters()) {
    for (double& v : t.mutable_data()) v = std::bit_cast<double>(detail::get_u64(is));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw IoError("trailing bytes in checkpoint " + path.string());
  }
  return params;
}

}  // namespace checkpoint

}  // namespace pcd
