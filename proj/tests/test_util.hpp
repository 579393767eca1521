#pragma once

// Shared fixtures and independent oracles for the test suites. Apart from the
// finite-difference check, which probes the engine's own loss, nothing here
// calls into the engine's compute kernels.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "perfit/nn.hpp"
#include "perfit/rng.hpp"

namespace testing_util {

// Central-difference check on `probes` randomly chosen parameters.
double max_fd_relative_error(const perfit::Model& model, const perfit::Tensor& x, const std::vector<int>& y, std::size_t probes,
                             std::uint64_t seed) {
  const auto [loss, grad] = perfit::loss_and_grad(model, x, y);
  const double h = 1e-5;
  perfit::Rng rng(seed);
  double worst = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    const auto i = static_cast<std::size_t>(rng.below(model.params.size()));
    perfit::Model plus = model, minus = model;
    plus.params[i] += h;
    minus.params[i] -= h;
    const double numeric = (perfit::loss_and_grad(plus, x, y).first - perfit::loss_and_grad(minus, x, y).first) / (2 * h);
    const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-6});
    worst = std::max(worst, std::abs(numeric - grad[i]) / denom);
  }
  return worst;
}


inline std::vector<perfit::Sample> random_samples(std::size_t n, std::size_t dim, std::size_t classes,
                                                  std::uint64_t seed) {
  perfit::Rng rng(seed);
  std::vector<perfit::Sample> out(n);
  for (auto& s : out) {
    s.features.resize(dim);
    for (auto& f : s.features) f = rng.uniform(-1.0, 1.0);
    s.label = static_cast<int>(rng.below(classes));
  }
  return out;
}

inline std::pair<perfit::Tensor, std::vector<int>> to_batch(const std::vector<perfit::Sample>& data,
                                                            const perfit::ModelSpec& spec) {
  std::vector<std::size_t> shape{data.size()};
  shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
  std::vector<double> x;
  std::vector<int> y;
  for (const auto& s : data) {
    x.insert(x.end(), s.features.begin(), s.features.end());
    y.push_back(s.label);
  }
  return {perfit::Tensor(shape, x), y};
}

}  // namespace testing_util

namespace oracle {

// Per-element evaluation of the documented layer semantics, one sample at a
// time, with output-major loops.
inline perfit::Tensor naive_forward(const perfit::Model& m, const perfit::Tensor& x) {
  using perfit::LayerKind;
  const std::size_t batch = x.shape[0];
  const std::size_t in_size = perfit::shape_size(m.spec.input_shape);
  std::vector<double> result;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> a(x.data.begin() + static_cast<std::ptrdiff_t>(b * in_size),
                          x.data.begin() + static_cast<std::ptrdiff_t>((b + 1) * in_size));
    std::vector<std::size_t> shape = m.spec.input_shape;
    std::size_t offset = 0;
    for (const auto& layer : m.spec.layers) {
      const double* p = m.params.data.data() + offset;
      offset += layer.param_count();
      std::vector<double> out;
      switch (layer.kind) {
        case LayerKind::Dense:
          for (std::size_t o = 0; o < layer.out; ++o) {
            double s = p[layer.in * layer.out + o];
            for (std::size_t i = 0; i < layer.in; ++i) s += a[i] * p[i * layer.out + o];
            out.push_back(s);
          }
          shape = {layer.out};
          break;
        case LayerKind::Conv3x3: {
          const std::size_t h = shape[1], w = shape[2];
          for (std::size_t o = 0; o < layer.out; ++o)
            for (std::size_t y = 0; y + 2 < h; ++y)
              for (std::size_t xx = 0; xx + 2 < w; ++xx) {
                double s = p[9 * layer.in * layer.out + o];
                for (std::size_t c = 0; c < layer.in; ++c)
                  for (std::size_t ky = 0; ky < 3; ++ky)
                    for (std::size_t kx = 0; kx < 3; ++kx)
                      s += p[((o * layer.in + c) * 3 + ky) * 3 + kx] * a[(c * h + y + ky) * w + xx + kx];
                out.push_back(s);
              }
          shape = {layer.out, h - 2, w - 2};
          break;
        }
        case LayerKind::MaxPool2x2: {
          const std::size_t c = shape[0], h = shape[1], w = shape[2];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h / 2; ++y)
              for (std::size_t xx = 0; xx < w / 2; ++xx)
                out.push_back(std::max({a[(ch * h + 2 * y) * w + 2 * xx], a[(ch * h + 2 * y) * w + 2 * xx + 1],
                                        a[(ch * h + 2 * y + 1) * w + 2 * xx],
                                        a[(ch * h + 2 * y + 1) * w + 2 * xx + 1]}));
          shape = {c, h / 2, w / 2};
          break;
        }
        case LayerKind::ReLU:
          for (double v : a) out.push_back(v > 0 ? v : 0);
          break;
        case LayerKind::Flatten:
          out = a;
          shape = {a.size()};
          break;
        case LayerKind::Softmax: {
          double z = 0;
          for (double v : a) z += std::exp(v);
          for (double v : a) out.push_back(std::exp(v) / z);
          break;
        }
      }
      a = std::move(out);
    }
    result.insert(result.end(), a.begin(), a.end());
  }
  return perfit::Tensor({batch, m.spec.num_classes}, result);
}

}  // namespace oracle
