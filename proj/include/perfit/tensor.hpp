#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "perfit/errors.hpp"

namespace perfit {

inline std::size_t shape_size(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Shape-tagged flat array of doubles, row-major.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(shape_size(shape), 0.0) {
    check();
  }

  Tensor(std::vector<std::size_t> s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    check();
  }

  std::size_t size() const { return data.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // Element (r, c) of a rank-2 tensor.
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  void check() const {
    for (auto d : shape)
      if (d == 0) throw Error("tensor: zero-sized dimension in shape " + shape_string(shape));
    if (shape_size(shape) != data.size())
      throw Error("tensor: shape " + shape_string(shape) + " does not match " +
                  std::to_string(data.size()) + " elements");
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace perfit
