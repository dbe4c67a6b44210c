// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "memprop/tensor.hpp"

namespace memprop {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads a PNG into [1,C,H,W] scaled to [0,1] (C = 1 or 3; alpha channels dropped).
Tensor read_png(const std::filesystem::path& path);

/// Writes a [1,C,H,W] tensor in [0,1] as a PNG with C = 1 (gray) or 3 (RGB)
/// channels at 8 or 16 bits per sample. Values are clamped and rounded.
void write_png(const std::filesystem::path& path, const Tensor& image, int bit_depth);

/// Zero-padded frame file name, e.g. 00007.png.
std::string frame_filename(int index);

}  // namespace memprop
