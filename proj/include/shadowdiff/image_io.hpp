// Copyright (c) 2026 The shadowdiff Authors.
// All rights reserved.
//
// This software is licensed under the Apache License, Version 2.0 (the "License").
// You may not use this file except in compliance with the License. You may
// obtain a copy of the License at http://www.apache.org/licenses/LICENSE-2.0.
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <torch/torch.h>

#include <filesystem>

namespace shadowdiff {

/// Reads an 8-bit raster image as a [3, H, W] float tensor in [0, 1] (RGB order).
torch::Tensor read_rgb(const std::filesystem::path& path);

/// Reads a single-channel image as [1, H, W] in [0, 1]. Color files are converted to gray.
torch::Tensor read_gray(const std::filesystem::path& path);

/// Writes a [3, H, W] or [1, H, W] tensor in [0, 1] as an 8-bit image; values are clamped and rounded.
void write_image(const std::filesystem::path& path, const torch::Tensor& image);

/// Rounds [0, 1] values onto the 8-bit grid, returning floats k / 255.
torch::Tensor quantize_8bit(const torch::Tensor& image);

/// Pixel space [0, 1] <-> diffusion space [-1, 1].
inline torch::Tensor to_model_space(const torch::Tensor& x) { return x * 2.0 - 1.0; }
inline torch::Tensor to_pixel_space(const torch::Tensor& x) { return ((x + 1.0) * 0.5).clamp(0.0, 1.0); }

bool is_image_file(const std::filesystem::path& path);

} // namespace shadowdiff
