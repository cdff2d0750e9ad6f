#pragma once

#include <vector>

#include "aquant/tensor.hpp"

namespace aquant {

/// Labelled images, N x C x H x W with pixels in [0, 1].
struct Dataset {
  Tensorf images;  // empty when size() == 0
  std::vector<int> labels;
  int classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Shape sample_shape() const {
    return images.empty() ? Shape{} : Shape(images.shape().begin() + 1, images.shape().end());
  }
};

}  // namespace aquant
