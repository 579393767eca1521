#pragma once

#include <cstddef>
#include <vector>

namespace perfit {

// One labeled example. `features` is the flattened input tensor; `subject`
// identifies the person/device that produced it (-1 when unknown).
struct Sample {
  std::vector<double> features;
  int label = 0;
  int subject = -1;

  friend bool operator==(const Sample&, const Sample&) = default;
};

}  // namespace perfit
