#pragma once

// Architectures from the HAR case study.

#include "perfit/nn.hpp"

namespace perfit::presets {

// Three fully-connected layers of 400, 100 and `classes` units. With a
// 1200-wide input (6 channels x 200 samples) this has 521,510 parameters.
inline ModelSpec three_nn(std::size_t input_dim, std::size_t classes = 10) {
  return ModelSpec{{LayerSpec::dense(input_dim, 400), LayerSpec::relu(), LayerSpec::dense(400, 100),
                    LayerSpec::relu(), LayerSpec::dense(100, classes), LayerSpec::softmax()},
                   {input_dim},
                   classes};
}

// Three 3x3 convolutions (32, 16, 8 channels) with 2x2 max-pooling after the
// first two, a 128-unit ReLU layer and a softmax head, on a single-channel
// height x width input.
inline ModelSpec case_study_cnn(std::size_t height, std::size_t width, std::size_t classes = 10) {
  ModelSpec spec{{LayerSpec::conv3x3(1, 32), LayerSpec::relu(), LayerSpec::maxpool2x2(), LayerSpec::conv3x3(32, 16),
                  LayerSpec::relu(), LayerSpec::maxpool2x2(), LayerSpec::conv3x3(16, 8), LayerSpec::relu(),
                  LayerSpec::flatten()},
                 {1, height, width},
                 classes};
  std::size_t h = height, w = width;
  for (int stage = 0; stage < 3; ++stage) {
    if (h < 3 || w < 3) throw Error("case_study_cnn: input " + std::to_string(height) + "x" + std::to_string(width) +
                                    " too small for three 3x3 convolutions");
    h -= 2, w -= 2;
    if (stage < 2) h /= 2, w /= 2;
  }
  spec.layers.push_back(LayerSpec::dense(8 * h * w, 128));
  spec.layers.push_back(LayerSpec::relu());
  spec.layers.push_back(LayerSpec::dense(128, classes));
  spec.layers.push_back(LayerSpec::softmax());
  infer_shapes(spec);
  return spec;
}

}  // namespace perfit::presets
