#pragma once

// Binary PPM (P6) image IO. Images travel as [3,H,W] float tensors in [0,1];
// files store interleaved RGB bytes, maxval 255, making every artifact
// byte-identical across platforms.

#include <string>

#include "fsc/tensor.hpp"

namespace fsc {

void write_ppm(const std::string& path, const Tensor<float>& img);
Tensor<float> read_ppm(const std::string& path);

}  // namespace fsc
