#pragma once

// Image metrics used to score how well generated images follow their
// conditions: windowed structural similarity for the edge family, mean IoU
// for palette segmentation masks, mean squared error for dense regressions.

#include <string>

#include "fsc/tensor.hpp"

namespace fsc {

// Windowed structural similarity in [-1,1]: grayscale internally, 7x7
// uniform window over fully-interior positions, stabilizers C1=(0.01)^2 and
// C2=(0.03)^2 for unit dynamic range. DataError on shape mismatch or images
// smaller than the window.
double metric_ssim(const Tensor<float>& a, const Tensor<float>& b);

// Mean IoU over the non-background palette classes present in either mask.
// Masks must be palette-exact RGB (one-hot channels or black). Both masks
// empty -> 1.0. DataError on shape mismatch or off-palette pixels.
double metric_miou(const Tensor<float>& a, const Tensor<float>& b);

// Plain mean squared error over all elements. DataError on shape mismatch.
double metric_mse(const Tensor<float>& a, const Tensor<float>& b);

// Score a generated condition against the target with the metric the task
// registry assigns. ConfigError on unknown task.
double task_score(const std::string& task, const Tensor<float>& generated,
                  const Tensor<float>& target);

// Direction of improvement for a metric name (ssim/miou up, mse down).
bool metric_higher_better(const std::string& metric);

}  // namespace fsc
