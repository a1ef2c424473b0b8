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

#include "shadowdiff/denoiser.hpp"

#include <torch/torch.h>

#include <optional>

namespace shadowdiff {

inline constexpr double kDefaultResidualGain = 5.0;
inline constexpr double kCamProbabilityEpsilon = 1e-7;

/// Class activation map: channel-weighted sum of the classifier features,
/// bilinearly resized to `height` x `width` and min-max normalized per image.
///
/// `feature_map` is [C, h, w] or [N, C, h, w]; the result is [1, H, W] or
/// [N, 1, H, W] accordingly. Maps with zero range become all zeros.
torch::Tensor compute_cam(const torch::Tensor& feature_map, const torch::Tensor& class_weights,
                          int64_t height, int64_t width);

/// Parameter-free attention target from a training pair:
/// 2 * logistic(gain * mean_c |x0 - x_cond|) - 1, so zero difference maps to 0.
torch::Tensor residual_target(const torch::Tensor& x0, const torch::Tensor& x_cond,
                              double gain = kDefaultResidualGain);

/// Mean squared error between an attention map and its residual target.
torch::Tensor loss_att(const torch::Tensor& attention, const torch::Tensor& target);

/// Binary cross-entropy of the shadow classifier with shadow images labeled 1
/// and clean images labeled 0, averaged over the batch.
torch::Tensor loss_cam(const torch::Tensor& prob_shadow, const torch::Tensor& prob_clean);
double loss_cam(double prob_shadow, double prob_clean);

/// Initial attention a_T for reverse sampling. With a classifier, the CAM of
/// the shadow image; without one, a uniform 0.5 map.
torch::Tensor init_attention(const torch::Tensor& x_cond, std::optional<Denoiser> classifier);

} // namespace shadowdiff
