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

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace shadowdiff {

inline constexpr double kPsnrCap = 99.0;

/// Metrics over one pixel region. Absent when the region is empty.
struct RegionMetrics {
    std::optional<double> rmse; // mean absolute LAB error summed over channels
    std::optional<double> psnr; // dB, 8-bit RGB
    std::optional<double> ssim; // mean of the SSIM map over the region
    int64_t pixels = 0;
    double squared_error = 0.0; // sum of squared 8-bit RGB errors
};

/// Shadow (S), non-shadow (NS) and whole-image (ALL) metrics.
struct MetricReport {
    RegionMetrics shadow;
    RegionMetrics non_shadow;
    RegionMetrics all;
};

nlohmann::json to_json(const MetricReport& report);

/// sRGB (8-bit code values) to CIE L*a*b* under D65.
std::array<double, 3> srgb8_to_lab(uint8_t r, uint8_t g, uint8_t b);

/// Per-pixel SSIM map of two 8-bit RGB images ([3, H, W] uint8 or [0, 1] floats),
/// averaged over channels. 11x11 Gaussian window, sigma 1.5, symmetric borders.
std::vector<double> ssim_map(const torch::Tensor& a, const torch::Tensor& b);

/// Region metrics of a prediction against ground truth, both [3, H, W] in [0, 1].
/// `mask` is [1, H, W]; values >= 0.5 count as shadow. Without a mask the shadow
/// region is empty and non-shadow equals the whole image.
MetricReport region_metrics(const torch::Tensor& pred, const torch::Tensor& truth,
                            const std::optional<torch::Tensor>& mask);

/// Mean of each available metric across reports, per region.
MetricReport mean_report(const std::vector<MetricReport>& reports);

} // namespace shadowdiff
