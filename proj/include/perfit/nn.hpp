#pragma once

// Minimal float64 neural-network engine: layer-stack models with exact
// parameter counting, reverse-mode backprop by layer, and plain SGD.
//
// Parameter layout (one flat vector, layers in order):
//   Dense(in, out):     weights [in][out] row-major, then bias [out]
//   Conv3x3(ci, co):    weights [co][ci][3][3], then bias [co]
// Activations are row-major per sample; images are [channels][height][width].
// Convolutions use valid padding and stride 1; pooling is 2x2 stride 2 and
// drops a trailing odd row/column.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "perfit/errors.hpp"
#include "perfit/rng.hpp"
#include "perfit/sample.hpp"
#include "perfit/tensor.hpp"

namespace perfit {

enum class LayerKind { Dense, Conv3x3, MaxPool2x2, ReLU, Softmax, Flatten };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "Dense";
    case LayerKind::Conv3x3: return "Conv3x3";
    case LayerKind::MaxPool2x2: return "MaxPool2x2";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::Softmax: return "Softmax";
    case LayerKind::Flatten: return "Flatten";
  }
  return "?";
}

inline std::optional<LayerKind> layer_kind_from_string(std::string_view name) {
  for (auto k : {LayerKind::Dense, LayerKind::Conv3x3, LayerKind::MaxPool2x2, LayerKind::ReLU,
                 LayerKind::Softmax, LayerKind::Flatten})
    if (name == to_string(k)) return k;
  return std::nullopt;
}

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::size_t in = 0;   // Dense: input features. Conv3x3: input channels.
  std::size_t out = 0;  // Dense: output features. Conv3x3: output channels.

  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::Dense, in, out}; }
  static LayerSpec conv3x3(std::size_t in, std::size_t out) { return {LayerKind::Conv3x3, in, out}; }
  static LayerSpec maxpool2x2() { return {LayerKind::MaxPool2x2}; }
  static LayerSpec relu() { return {LayerKind::ReLU}; }
  static LayerSpec softmax() { return {LayerKind::Softmax}; }
  static LayerSpec flatten() { return {LayerKind::Flatten}; }

  bool parametric() const { return kind == LayerKind::Dense || kind == LayerKind::Conv3x3; }

  std::size_t weight_count() const {
    switch (kind) {
      case LayerKind::Dense: return in * out;
      case LayerKind::Conv3x3: return 9 * in * out;
      default: return 0;
    }
  }

  std::size_t param_count() const { return parametric() ? weight_count() + out : 0; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ModelSpec {
  std::vector<LayerSpec> layers;
  std::vector<std::size_t> input_shape;
  std::size_t num_classes = 10;

  std::size_t input_size() const { return shape_size(input_shape); }

  std::size_t parametric_layer_count() const {
    return static_cast<std::size_t>(
        std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) { return l.parametric(); }));
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline std::size_t param_count(const ModelSpec& spec) {
  std::size_t n = 0;
  for (const auto& l : spec.layers) n += l.param_count();
  return n;
}

/// Per-sample shape flowing into each layer plus the final output shape
/// (size layers+1). Throws on any incompatibility, naming the layer pair
/// with 1-based indices.
inline std::vector<std::vector<std::size_t>> infer_shapes(const ModelSpec& spec) {
  if (spec.layers.empty()) throw Error("model spec has no layers");
  if (spec.input_shape.empty()) throw Error("model spec has empty input_shape");
  for (auto d : spec.input_shape)
    if (d == 0) throw Error("model spec input_shape has a zero dimension");
  if (spec.num_classes == 0) throw Error("model spec num_classes must be positive");

  std::vector<std::vector<std::size_t>> shapes{spec.input_shape};
  auto pair_name = [](std::size_t l) {
    return l == 0 ? std::string("input→layer 1")
                  : "layer " + std::to_string(l) + "→" + std::to_string(l + 1);
  };

  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& layer = spec.layers[l];
    const auto& s = shapes.back();
    std::vector<std::size_t> next;
    if (layer.parametric() && (layer.in == 0 || layer.out == 0))
      throw Error("layer " + std::to_string(l + 1) + ": dimensions must be positive");
    switch (layer.kind) {
      case LayerKind::Dense:
        if (s.size() != 1)
          throw Error(pair_name(l) + " incompatible: shape " + shape_string(s) +
                      " is not flat (insert Flatten)");
        if (s[0] != layer.in)
          throw Error(pair_name(l) + " incompatible: " + std::to_string(s[0]) + " vs " +
                      std::to_string(layer.in));
        next = {layer.out};
        break;
      case LayerKind::Conv3x3:
        if (s.size() != 3)
          throw Error(pair_name(l) + " incompatible: Conv3x3 needs [channels,height,width], got " +
                      shape_string(s));
        if (s[0] != layer.in)
          throw Error(pair_name(l) + " incompatible: " + std::to_string(s[0]) + " vs " +
                      std::to_string(layer.in));
        if (s[1] < 3 || s[2] < 3)
          throw Error(pair_name(l) + " incompatible: " + shape_string(s) +
                      " too small for a 3x3 convolution");
        next = {layer.out, s[1] - 2, s[2] - 2};
        break;
      case LayerKind::MaxPool2x2:
        if (s.size() != 3 || s[1] < 2 || s[2] < 2)
          throw Error(pair_name(l) + " incompatible: MaxPool2x2 needs [channels,h>=2,w>=2], got " +
                      shape_string(s));
        next = {s[0], s[1] / 2, s[2] / 2};
        break;
      case LayerKind::ReLU:
        next = s;
        break;
      case LayerKind::Flatten:
        next = {shape_size(s)};
        break;
      case LayerKind::Softmax:
        if (l + 1 != spec.layers.size())
          throw Error("layer " + std::to_string(l + 1) + ": Softmax is only supported as the final layer");
        if (s.size() != 1)
          throw Error(pair_name(l) + " incompatible: Softmax needs a flat input, got " + shape_string(s));
        next = s;
        break;
    }
    shapes.push_back(std::move(next));
  }
  const auto& out = shapes.back();
  if (out.size() != 1 || out[0] != spec.num_classes)
    throw Error("final layer outputs " + shape_string(out) + " but num_classes is " +
                std::to_string(spec.num_classes));
  return shapes;
}

// ---------------------------------------------------------------------------
// Little-endian flat encoding shared by checkpoints and wire payloads: an
// 8-byte element count followed by the IEEE-754 doubles.

namespace wire {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{p[i]} << (8 * i);
  return v;
}

inline constexpr std::size_t kHeaderBytes = 8;

inline std::string encode(std::span<const double> values) {
  std::string out;
  out.reserve(kHeaderBytes + 8 * values.size());
  put_u64(out, values.size());
  for (double v : values) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline std::vector<double> decode(std::string_view bytes) {
  if (bytes.size() < kHeaderBytes) throw Error("wire: truncated header");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t n = get_u64(p);
  if (bytes.size() != kHeaderBytes + 8 * n)
    throw Error("wire: header announces " + std::to_string(n) + " values but payload has " +
                std::to_string(bytes.size()) + " bytes");
  std::vector<double> values(n);
  for (std::uint64_t i = 0; i < n; ++i)
    values[i] = std::bit_cast<double>(get_u64(p + kHeaderBytes + 8 * i));
  return values;
}

}  // namespace wire

struct ParamVector {
  std::vector<double> data;

  std::size_t size() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::string to_bytes() const { return wire::encode(data); }
  static ParamVector from_bytes(std::string_view bytes) { return {wire::decode(bytes)}; }

  void write_binary(std::ostream& os) const {
    const auto bytes = to_bytes();
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("failed to write parameter vector");
  }

  static ParamVector read_binary(std::istream& is) {
    unsigned char header[wire::kHeaderBytes];
    if (!is.read(reinterpret_cast<char*>(header), sizeof header)) throw Error("checkpoint: truncated header");
    const std::uint64_t n = wire::get_u64(header);
    std::string bytes(reinterpret_cast<char*>(header), sizeof header);
    bytes.resize(wire::kHeaderBytes + 8 * n);
    if (!is.read(bytes.data() + wire::kHeaderBytes, static_cast<std::streamsize>(8 * n)))
      throw Error("checkpoint: truncated payload");
    return from_bytes(bytes);
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

struct LayerSlice {
  std::size_t offset = 0;
  std::size_t length = 0;
  friend bool operator==(const LayerSlice&, const LayerSlice&) = default;
};

inline std::vector<LayerSlice> layer_slices(const ModelSpec& spec) {
  std::vector<LayerSlice> slices;
  std::size_t offset = 0;
  for (const auto& l : spec.layers) {
    slices.push_back({offset, l.param_count()});
    offset += l.param_count();
  }
  return slices;
}

// Which layers an optimizer may update. One flag per layer of the spec;
// flags on parameter-free layers are ignored.
struct LayerMask {
  std::vector<bool> trainable;

  static LayerMask all(const ModelSpec& spec) { return {std::vector<bool>(spec.layers.size(), true)}; }
  static LayerMask none(const ModelSpec& spec) { return {std::vector<bool>(spec.layers.size(), false)}; }

  // Selects parametric layers whose ordinal (0-based, counting only
  // parametric layers) lies in [first, last).
  static LayerMask parametric_range(const ModelSpec& spec, std::size_t first, std::size_t last) {
    LayerMask m = none(spec);
    std::size_t ordinal = 0;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
      if (!spec.layers[l].parametric()) continue;
      m.trainable[l] = ordinal >= first && ordinal < last;
      ++ordinal;
    }
    return m;
  }

  LayerMask complement() const {
    LayerMask m = *this;
    m.trainable.flip();
    return m;
  }

  bool selects_any(const ModelSpec& spec) const {
    for (std::size_t l = 0; l < spec.layers.size(); ++l)
      if (trainable.at(l) && spec.layers[l].parametric()) return true;
    return false;
  }

  std::size_t param_count(const ModelSpec& spec) const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < spec.layers.size(); ++l)
      if (trainable.at(l)) n += spec.layers[l].param_count();
    return n;
  }

  friend bool operator==(const LayerMask&, const LayerMask&) = default;
};

struct Model {
  ModelSpec spec;
  ParamVector params;
  std::vector<LayerSlice> layer_offsets;
  std::vector<std::vector<std::size_t>> shapes;  // input of each layer, then output

  Model() = default;

  Model(ModelSpec s, ParamVector p) : spec(std::move(s)), params(std::move(p)) {
    shapes = infer_shapes(spec);
    layer_offsets = layer_slices(spec);
    if (params.size() != param_count(spec))
      throw Error("model expects " + std::to_string(param_count(spec)) + " parameters, got " +
                  std::to_string(params.size()));
  }

  std::span<double> layer_params(std::size_t layer) {
    const auto& s = layer_offsets.at(layer);
    return std::span<double>(params.data).subspan(s.offset, s.length);
  }
  std::span<const double> layer_params(std::size_t layer) const {
    const auto& s = layer_offsets.at(layer);
    return std::span<const double>(params.data).subspan(s.offset, s.length);
  }

  // Concatenation of the parameters of the layers selected by `mask`.
  ParamVector extract(const LayerMask& mask) const {
    ParamVector out;
    out.data.reserve(mask.param_count(spec));
    for (std::size_t l = 0; l < spec.layers.size(); ++l)
      if (mask.trainable.at(l)) {
        auto p = layer_params(l);
        out.data.insert(out.data.end(), p.begin(), p.end());
      }
    return out;
  }

  // Inverse of extract.
  void assign(const LayerMask& mask, std::span<const double> values) {
    if (values.size() != mask.param_count(spec))
      throw Error("assign: expected " + std::to_string(mask.param_count(spec)) + " values, got " +
                  std::to_string(values.size()));
    std::size_t pos = 0;
    for (std::size_t l = 0; l < spec.layers.size(); ++l)
      if (mask.trainable.at(l)) {
        auto p = layer_params(l);
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(pos), p.size(), p.begin());
        pos += p.size();
      }
  }

  friend bool operator==(const Model& a, const Model& b) { return a.spec == b.spec && a.params == b.params; }
};

/// Glorot-uniform weights, zero biases. Layer l draws from its own stream
/// derived from (seed, l). Conv fan-in/fan-out include the 3x3 receptive field.
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  infer_shapes(spec);
  ParamVector params{std::vector<double>(param_count(spec), 0.0)};
  std::size_t offset = 0;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& layer = spec.layers[l];
    if (layer.parametric()) {
      const double rf = layer.kind == LayerKind::Conv3x3 ? 9.0 : 1.0;
      const double limit = std::sqrt(6.0 / (rf * static_cast<double>(layer.in + layer.out)));
      Rng rng(derive_seed(seed, "init", l));
      for (std::size_t i = 0; i < layer.weight_count(); ++i) params[offset + i] = rng.uniform(-limit, limit);
    }
    offset += layer.param_count();
  }
  return Model(spec, std::move(params));
}

struct TrainConfig {
  double learning_rate = 0.01;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!std::isfinite(learning_rate) || learning_rate <= 0.0)
      throw Error("learning_rate must be finite and positive");
    if (batch_size == 0) throw Error("batch_size must be positive");
    if (epochs == 0) throw Error("epochs must be positive");
  }
};

inline constexpr double kProbClamp = 1e-9;

namespace detail {

// Forward/backward scratch space, reused across mini-batches.
struct Workspace {
  std::vector<std::vector<double>> act;              // act[l] feeds layer l; act.back() is the output
  std::vector<std::vector<std::uint32_t>> argmax;    // per layer, MaxPool2x2 only
  std::vector<double> delta, delta_prev;
};

inline void dense_forward(const double* x, std::size_t batch, std::size_t in, std::size_t out,
                          const double* w, double* y) {
  const double* bias = w + in * out;
  for (std::size_t b = 0; b < batch; ++b) {
    double* yb = y + b * out;
    std::copy_n(bias, out, yb);
    const double* xb = x + b * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xb[i];
      if (xi == 0.0) continue;
      const double* wi = w + i * out;
      for (std::size_t o = 0; o < out; ++o) yb[o] += xi * wi[o];
    }
  }
}

inline void dense_backward(const double* x, const double* dy, std::size_t batch, std::size_t in,
                           std::size_t out, const double* w, double* dw, double* dx) {
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x + b * in;
    const double* dyb = dy + b * out;
    if (dw) {
      for (std::size_t i = 0; i < in; ++i) {
        const double xi = xb[i];
        if (xi == 0.0) continue;
        double* dwi = dw + i * out;
        for (std::size_t o = 0; o < out; ++o) dwi[o] += xi * dyb[o];
      }
      double* db = dw + in * out;
      for (std::size_t o = 0; o < out; ++o) db[o] += dyb[o];
    }
    if (dx) {
      double* dxb = dx + b * in;
      for (std::size_t i = 0; i < in; ++i) {
        const double* wi = w + i * out;
        double s = 0.0;
        for (std::size_t o = 0; o < out; ++o) s += wi[o] * dyb[o];
        dxb[i] = s;
      }
    }
  }
}

inline void conv_forward(const double* x, std::size_t batch, std::size_t ci, std::size_t h,
                         std::size_t wd, std::size_t co, const double* w, double* y) {
  const std::size_t oh = h - 2, ow = wd - 2;
  const double* bias = w + 9 * ci * co;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x + b * ci * h * wd;
    double* yb = y + b * co * oh * ow;
    for (std::size_t o = 0; o < co; ++o) {
      double* plane = yb + o * oh * ow;
      std::fill_n(plane, oh * ow, bias[o]);
      for (std::size_t c = 0; c < ci; ++c) {
        const double* k = w + (o * ci + c) * 9;
        const double* xin = xb + c * h * wd;
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const double kv = k[ky * 3 + kx];
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const double* row = xin + (oy + ky) * wd + kx;
              double* out = plane + oy * ow;
              for (std::size_t ox = 0; ox < ow; ++ox) out[ox] += kv * row[ox];
            }
          }
      }
    }
  }
}

inline void conv_backward(const double* x, const double* dy, std::size_t batch, std::size_t ci,
                          std::size_t h, std::size_t wd, std::size_t co, const double* w, double* dw,
                          double* dx) {
  const std::size_t oh = h - 2, ow = wd - 2;
  if (dx) std::fill_n(dx, batch * ci * h * wd, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x + b * ci * h * wd;
    const double* dyb = dy + b * co * oh * ow;
    double* dxb = dx ? dx + b * ci * h * wd : nullptr;
    for (std::size_t o = 0; o < co; ++o) {
      const double* g = dyb + o * oh * ow;
      if (dw) {
        double s = 0.0;
        for (std::size_t i = 0; i < oh * ow; ++i) s += g[i];
        dw[9 * ci * co + o] += s;
      }
      for (std::size_t c = 0; c < ci; ++c) {
        const double* xin = xb + c * h * wd;
        const double* k = w + (o * ci + c) * 9;
        double* dk = dw ? dw + (o * ci + c) * 9 : nullptr;
        double* dxin = dxb ? dxb + c * h * wd : nullptr;
        for (std::size_t ky = 0; ky < 3; ++ky)
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const double kv = k[ky * 3 + kx];
            double acc = 0.0;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const double* row = xin + (oy + ky) * wd + kx;
              const double* grow = g + oy * ow;
              if (dk)
                for (std::size_t ox = 0; ox < ow; ++ox) acc += grow[ox] * row[ox];
              if (dxin) {
                double* drow = dxin + (oy + ky) * wd + kx;
                for (std::size_t ox = 0; ox < ow; ++ox) drow[ox] += kv * grow[ox];
              }
            }
            if (dk) dk[ky * 3 + kx] += acc;
          }
      }
    }
  }
}

// Runs the network on the batch already stored in ws.act[0].
inline void forward_in_place(const Model& m, std::size_t batch, Workspace& ws) {
  const auto& layers = m.spec.layers;
  ws.act.resize(layers.size() + 1);
  ws.argmax.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    const auto& in_shape = m.shapes[l];
    const std::size_t in_size = shape_size(in_shape);
    const std::size_t out_size = shape_size(m.shapes[l + 1]);
    const auto& in = ws.act[l];
    auto& out = ws.act[l + 1];
    out.resize(batch * out_size);
    const double* w = m.params.data.data() + m.layer_offsets[l].offset;
    switch (layer.kind) {
      case LayerKind::Dense:
        dense_forward(in.data(), batch, layer.in, layer.out, w, out.data());
        break;
      case LayerKind::Conv3x3:
        conv_forward(in.data(), batch, layer.in, in_shape[1], in_shape[2], layer.out, w, out.data());
        break;
      case LayerKind::MaxPool2x2: {
        const std::size_t c = in_shape[0], h = in_shape[1], wd = in_shape[2];
        const std::size_t oh = h / 2, ow = wd / 2;
        auto& arg = ws.argmax[l];
        arg.resize(batch * out_size);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t oy = 0; oy < oh; ++oy)
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::size_t base = ch * h * wd + 2 * oy * wd + 2 * ox;
                const std::size_t cand[4] = {base, base + 1, base + wd, base + wd + 1};
                std::size_t best = cand[0];
                for (int k = 1; k < 4; ++k)
                  if (in[b * in_size + cand[k]] > in[b * in_size + best]) best = cand[k];
                const std::size_t o = b * out_size + (ch * oh + oy) * ow + ox;
                out[o] = in[b * in_size + best];
                arg[o] = static_cast<std::uint32_t>(best);
              }
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
        break;
      case LayerKind::Flatten:
        std::copy(in.begin(), in.end(), out.begin());
        break;
      case LayerKind::Softmax:
        for (std::size_t b = 0; b < batch; ++b) {
          const double* z = in.data() + b * in_size;
          double* p = out.data() + b * in_size;
          const double zmax = *std::max_element(z, z + in_size);
          double sum = 0.0;
          for (std::size_t k = 0; k < in_size; ++k) sum += (p[k] = std::exp(z[k] - zmax));
          for (std::size_t k = 0; k < in_size; ++k) p[k] /= sum;
        }
        break;
    }
  }
}

inline void forward_pass(const Model& m, std::span<const double> x, std::size_t batch, Workspace& ws) {
  ws.act.resize(1);
  ws.act[0].assign(x.begin(), x.end());
  forward_in_place(m, batch, ws);
}

// Backpropagates `dlogits` (gradient w.r.t. the Softmax input) through layers
// below the terminal Softmax. Parameter gradients accumulate into `grad` for
// layers with need_grad set; propagation stops below the lowest such layer.
inline void backward_pass(const Model& m, Workspace& ws, std::size_t batch, const std::vector<char>& need_grad,
                          std::span<double> grad) {
  const auto& layers = m.spec.layers;
  std::size_t lowest = layers.size();
  for (std::size_t l = 0; l < layers.size(); ++l)
    if (need_grad[l]) {
      lowest = l;
      break;
    }
  if (lowest == layers.size()) return;

  for (std::size_t l = layers.size() - 1; l-- > lowest;) {
    const auto& layer = layers[l];
    const auto& in_shape = m.shapes[l];
    const std::size_t in_size = shape_size(in_shape);
    const bool propagate = l > lowest;
    const auto& x = ws.act[l];
    auto& dx = ws.delta_prev;
    if (propagate) dx.assign(batch * in_size, 0.0);
    const double* w = m.params.data.data() + m.layer_offsets[l].offset;
    double* dw = need_grad[l] ? grad.data() + m.layer_offsets[l].offset : nullptr;
    switch (layer.kind) {
      case LayerKind::Dense:
        dense_backward(x.data(), ws.delta.data(), batch, layer.in, layer.out, w, dw,
                       propagate ? dx.data() : nullptr);
        break;
      case LayerKind::Conv3x3:
        conv_backward(x.data(), ws.delta.data(), batch, layer.in, in_shape[1], in_shape[2], layer.out, w, dw,
                      propagate ? dx.data() : nullptr);
        break;
      case LayerKind::MaxPool2x2:
        if (propagate) {
          const std::size_t out_size = shape_size(m.shapes[l + 1]);
          const auto& arg = ws.argmax[l];
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < out_size; ++o)
              dx[b * in_size + arg[b * out_size + o]] += ws.delta[b * out_size + o];
        }
        break;
      case LayerKind::ReLU:
        if (propagate)
          for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = x[i] > 0.0 ? ws.delta[i] : 0.0;
        break;
      case LayerKind::Flatten:
        if (propagate) std::copy(ws.delta.begin(), ws.delta.end(), dx.begin());
        break;
      case LayerKind::Softmax:
        throw Error("Softmax below the output layer");
    }
    if (propagate) std::swap(ws.delta, ws.delta_prev);
  }
}

inline void require_softmax_head(const ModelSpec& spec) {
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::Softmax)
    throw Error("training requires a terminal Softmax layer");
}

// Mean cross-entropy of the batch in `ws.act[0]` against either hard labels
// or soft target rows (row-major, batch x classes). Adds d(loss)/d(params)
// into `grad` for layers with need_grad set.
inline double loss_grad(const Model& m, std::size_t batch, std::span<const int> labels,
                        std::span<const double> soft, const std::vector<char>& need_grad, std::span<double> grad,
                        Workspace& ws) {
  require_softmax_head(m.spec);
  forward_in_place(m, batch, ws);
  const std::size_t classes = m.spec.num_classes;
  const auto& p = ws.act.back();
  const double inv_batch = 1.0 / static_cast<double>(batch);
  double loss = 0.0;
  ws.delta.assign(batch * classes, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* pb = p.data() + b * classes;
    double* db = ws.delta.data() + b * classes;
    if (soft.empty()) {
      const auto y = static_cast<std::size_t>(labels[b]);
      loss -= std::log(std::clamp(pb[y], kProbClamp, 1.0 - kProbClamp));
      for (std::size_t k = 0; k < classes; ++k) db[k] = pb[k] * inv_batch;
      db[y] -= inv_batch;
    } else {
      const double* t = soft.data() + b * classes;
      for (std::size_t k = 0; k < classes; ++k) {
        if (t[k] != 0.0) loss -= t[k] * std::log(std::clamp(pb[k], kProbClamp, 1.0 - kProbClamp));
        db[k] = (pb[k] - t[k]) * inv_batch;
      }
    }
  }
  backward_pass(m, ws, batch, need_grad, grad);
  return loss * inv_batch;
}

inline std::vector<char> grad_flags(const ModelSpec& spec, const std::optional<LayerMask>& mask) {
  std::vector<char> flags(spec.layers.size(), 0);
  if (mask && mask->trainable.size() != spec.layers.size())
    throw Error("layer mask has " + std::to_string(mask->trainable.size()) + " entries for " +
                std::to_string(spec.layers.size()) + " layers");
  for (std::size_t l = 0; l < spec.layers.size(); ++l)
    flags[l] = spec.layers[l].parametric() && (!mask || mask->trainable[l]);
  return flags;
}

inline void check_labels(std::span<const int> labels, std::size_t classes) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
      throw Error("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) + " outside [0, " +
                  std::to_string(classes) + ")");
}

inline void check_batch(const Model& m, const Tensor& batch) {
  if (batch.shape.size() != m.spec.input_shape.size() + 1 ||
      !std::equal(m.spec.input_shape.begin(), m.spec.input_shape.end(), batch.shape.begin() + 1))
    throw Error("batch shape " + shape_string(batch.shape) + " does not match model input " +
                shape_string(m.spec.input_shape) + " with a leading batch dimension");
  batch.check();
}

// Mini-batch SGD over n examples. `fill(indices, ws.act[0], labels, soft)`
// writes the features and targets for the given example indices.
template <typename Fill>
Model train_epochs(Model model, std::size_t n, const TrainConfig& cfg, const std::optional<LayerMask>& mask,
                   Fill&& fill) {
  cfg.validate();
  if (n == 0) throw Error("train_local: empty dataset");
  const auto flags = grad_flags(model.spec, mask);
  if (std::none_of(flags.begin(), flags.end(), [](char f) { return f != 0; })) return model;

  Workspace ws;
  std::vector<double> grad(model.params.size());
  std::vector<std::size_t> order(n);
  std::vector<std::size_t> idx;
  std::vector<int> labels;
  std::vector<double> soft;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, "shuffle", epoch));
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      idx.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
      std::sort(idx.begin(), idx.end());  // canonical summation order within the batch
      ws.act.resize(1);
      fill(std::span<const std::size_t>(idx), ws.act[0], labels, soft);
      std::fill(grad.begin(), grad.end(), 0.0);
      loss_grad(model, idx.size(), labels, soft, flags, grad, ws);
      for (std::size_t l = 0; l < flags.size(); ++l) {
        if (!flags[l]) continue;
        const auto& s = model.layer_offsets[l];
        double* p = model.params.data.data() + s.offset;
        const double* g = grad.data() + s.offset;
        for (std::size_t i = 0; i < s.length; ++i) p[i] -= cfg.learning_rate * g[i];
      }
    }
  }
  return model;
}

inline void gather_features(std::span<const Sample> data, std::span<const std::size_t> idx, std::size_t dim,
                            std::vector<double>& x) {
  x.resize(idx.size() * dim);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& f = data[idx[b]].features;
    if (f.size() != dim)
      throw Error("sample feature dimension " + std::to_string(f.size()) + " does not match model input " +
                  std::to_string(dim));
    std::copy(f.begin(), f.end(), x.begin() + static_cast<std::ptrdiff_t>(b * dim));
  }
}

}  // namespace detail

/// Batched inference. Input shape [batch, input_shape...]; output [batch, num_classes].
inline Tensor forward(const Model& model, const Tensor& batch) {
  detail::check_batch(model, batch);
  detail::Workspace ws;
  detail::forward_pass(model, batch.data, batch.shape[0], ws);
  return Tensor({batch.shape[0], model.spec.num_classes}, std::move(ws.act.back()));
}

/// Mean cross-entropy over the batch and its gradient w.r.t. every parameter.
/// Probabilities are clamped to [1e-9, 1-1e-9] inside the log only.
inline std::pair<double, ParamVector> loss_and_grad(const Model& model, const Tensor& batch_x,
                                                    std::span<const int> labels) {
  detail::check_batch(model, batch_x);
  if (labels.size() != batch_x.shape[0])
    throw Error("loss_and_grad: " + std::to_string(labels.size()) + " labels for batch of " +
                std::to_string(batch_x.shape[0]));
  detail::check_labels(labels, model.spec.num_classes);
  detail::Workspace ws;
  ws.act.assign(1, batch_x.data);
  ParamVector grad{std::vector<double>(model.params.size(), 0.0)};
  const double loss = detail::loss_grad(model, batch_x.shape[0], labels, {},
                                        detail::grad_flags(model.spec, std::nullopt), grad.data, ws);
  return {loss, std::move(grad)};
}

inline Model sgd_step(Model model, const ParamVector& grad, double lr) {
  if (grad.size() != model.params.size())
    throw Error("sgd_step: gradient has " + std::to_string(grad.size()) + " entries, model has " +
                std::to_string(model.params.size()));
  for (std::size_t i = 0; i < grad.size(); ++i) model.params[i] -= lr * grad[i];
  return model;
}

/// Mini-batch SGD on labeled samples. Layers excluded by `mask` are left
/// bit-identical. Batches are drawn by a per-epoch seeded shuffle; examples
/// inside a batch are summed in ascending dataset order.
inline Model train_local(Model model, std::span<const Sample> data, const TrainConfig& cfg,
                         const std::optional<LayerMask>& mask = std::nullopt) {
  const std::size_t dim = model.spec.input_size();
  const std::size_t classes = model.spec.num_classes;
  for (const auto& s : data)
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= classes)
      throw Error("train_local: label " + std::to_string(s.label) + " outside [0, " + std::to_string(classes) + ")");
  return detail::train_epochs(std::move(model), data.size(), cfg, mask,
                              [&](std::span<const std::size_t> idx, std::vector<double>& x, std::vector<int>& labels,
                                  std::vector<double>& soft) {
                                detail::gather_features(data, idx, dim, x);
                                labels.resize(idx.size());
                                for (std::size_t b = 0; b < idx.size(); ++b) labels[b] = data[idx[b]].label;
                                soft.clear();
                              });
}

/// Mini-batch SGD toward soft targets: `targets` holds one probability row
/// (num_classes wide) per sample of `inputs`. Labels of `inputs` are ignored.
inline Model train_soft(Model model, std::span<const Sample> inputs, const Tensor& targets, const TrainConfig& cfg,
                        const std::optional<LayerMask>& mask = std::nullopt) {
  const std::size_t dim = model.spec.input_size();
  const std::size_t classes = model.spec.num_classes;
  if (targets.shape.size() != 2 || targets.shape[0] != inputs.size() || targets.shape[1] != classes)
    throw Error("train_soft: targets shape " + shape_string(targets.shape) + " does not match " +
                std::to_string(inputs.size()) + " samples x " + std::to_string(classes) + " classes");
  return detail::train_epochs(std::move(model), inputs.size(), cfg, mask,
                              [&](std::span<const std::size_t> idx, std::vector<double>& x, std::vector<int>& labels,
                                  std::vector<double>& soft) {
                                detail::gather_features(inputs, idx, dim, x);
                                labels.clear();
                                soft.resize(idx.size() * classes);
                                for (std::size_t b = 0; b < idx.size(); ++b)
                                  std::copy_n(targets.data.begin() + static_cast<std::ptrdiff_t>(idx[b] * classes),
                                              classes, soft.begin() + static_cast<std::ptrdiff_t>(b * classes));
                              });
}

/// Class probabilities for every sample, shape [n, num_classes].
inline Tensor predict_proba(const Model& model, std::span<const Sample> data, std::size_t chunk = 256) {
  if (data.empty()) throw Error("predict_proba: empty set");
  const std::size_t dim = model.spec.input_size();
  const std::size_t classes = model.spec.num_classes;
  Tensor out({data.size(), classes});
  detail::Workspace ws;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    std::vector<double> x;
    detail::gather_features(data, idx, dim, x);
    detail::forward_pass(model, x, idx.size(), ws);
    std::copy(ws.act.back().begin(), ws.act.back().end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(start * classes));
  }
  return out;
}

// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

/// Fraction of samples whose argmax prediction equals the label.
inline double evaluate(const Model& model, std::span<const Sample> data) {
  if (data.empty()) throw Error("evaluate: empty set");
  const auto probs = predict_proba(model, data);
  const std::size_t classes = model.spec.num_classes;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = std::span<const double>(probs.data).subspan(i * classes, classes);
    if (static_cast<int>(argmax(row)) == data[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace perfit
