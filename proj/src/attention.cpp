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

#include "shadowdiff/attention.hpp"

#include "shadowdiff/errors.hpp"

#include <algorithm>
#include <cmath>

namespace shadowdiff {

namespace F = torch::nn::functional;

torch::Tensor compute_cam(const torch::Tensor& feature_map, const torch::Tensor& class_weights,
                          int64_t height, int64_t width)
{
    const bool batched = feature_map.dim() == 4;
    if (!batched && feature_map.dim() != 3) {
        throw UsageError("compute_cam: feature map must be [C, h, w] or [N, C, h, w]");
    }
    auto features = batched ? feature_map : feature_map.unsqueeze(0);
    if (class_weights.dim() != 1 || class_weights.size(0) != features.size(1)) {
        throw UsageError("compute_cam: " + std::to_string(class_weights.numel()) +
                         " weights for " + std::to_string(features.size(1)) + " channels");
    }

    auto w = class_weights.to(features.scalar_type()).view({1, -1, 1, 1});
    auto cam = (features * w).sum(1, true);
    if (cam.size(2) != height || cam.size(3) != width) {
        cam = F::interpolate(cam, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{height, width})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
    }

    auto flat = cam.flatten(1);
    auto lo = std::get<0>(flat.min(1, true));
    auto hi = std::get<0>(flat.max(1, true));
    auto range = hi - lo;
    auto normalized = torch::where(range > 0, (flat - lo) / range.clamp_min(1e-30),
                                   torch::zeros_like(flat));
    auto out = normalized.view_as(cam);
    return batched ? out : out.squeeze(0);
}

torch::Tensor residual_target(const torch::Tensor& x0, const torch::Tensor& x_cond, double gain)
{
    if (x0.sizes() != x_cond.sizes()) {
        throw UsageError("residual_target: shape mismatch");
    }
    const int64_t channel_dim = x0.dim() == 4 ? 1 : 0;
    auto diff = (x0 - x_cond).abs().mean(channel_dim, true);
    return 2.0 * torch::sigmoid(gain * diff) - 1.0;
}

torch::Tensor loss_att(const torch::Tensor& attention, const torch::Tensor& target)
{
    if (attention.sizes() != target.sizes()) {
        throw UsageError("loss_att: shape mismatch");
    }
    return (attention - target).pow(2).mean();
}

torch::Tensor loss_cam(const torch::Tensor& prob_shadow, const torch::Tensor& prob_clean)
{
    constexpr double eps = kCamProbabilityEpsilon;
    auto ps = prob_shadow.clamp(eps, 1.0 - eps);
    auto pc = prob_clean.clamp(eps, 1.0 - eps);
    return -(torch::log(ps).mean() + torch::log(1.0 - pc).mean());
}

double loss_cam(double prob_shadow, double prob_clean)
{
    constexpr double eps = kCamProbabilityEpsilon;
    const double ps = std::clamp(prob_shadow, eps, 1.0 - eps);
    const double pc = std::clamp(prob_clean, eps, 1.0 - eps);
    return -(std::log(ps) + std::log(1.0 - pc));
}

torch::Tensor init_attention(const torch::Tensor& x_cond, std::optional<Denoiser> classifier)
{
    const bool batched = x_cond.dim() == 4;
    auto image = batched ? x_cond : x_cond.unsqueeze(0);
    const int64_t h = image.size(2);
    const int64_t w = image.size(3);

    torch::Tensor attention;
    if (!classifier) {
        attention = torch::full({image.size(0), 1, h, w}, 0.5, image.options());
    } else {
        torch::NoGradGuard no_grad;
        auto cls = (*classifier)->classify(image);
        attention = compute_cam(cls.feature_map, cls.class_weights, h, w);
    }
    return batched ? attention : attention.squeeze(0);
}

} // namespace shadowdiff
