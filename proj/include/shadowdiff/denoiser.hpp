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

#include "shadowdiff/schedule.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <vector>

namespace shadowdiff {

struct DenoiserOptions {
    int64_t base_width = 32;
    /// Width multiplier per resolution level; one downsampling between levels.
    std::vector<int64_t> channel_mult{1, 2, 2};
    int64_t time_embed_dim = 128;
    /// GroupNorm group count, reduced automatically where it does not divide a width.
    int64_t groups = 8;
    /// Typical magnitude of the clean-minus-condition residual in model space;
    /// sets the output preconditioning.
    double residual_scale = 0.25;

    int64_t levels() const { return static_cast<int64_t>(channel_mult.size()); }
};

/// Image, condition and attention planes are concatenated into this many input channels.
inline constexpr int64_t kDenoiserInputChannels = 7;

struct DenoiserOutput {
    torch::Tensor eps_hat;   // [N, 3, H, W]
    torch::Tensor attention; // [N, 1, H, W], sigmoid head, values in [0, 1]
};

struct ClassifierOutput {
    torch::Tensor logit;         // [N]
    torch::Tensor probability;   // [N], logistic(logit); shadow class = 1
    torch::Tensor feature_map;   // [N, C, h, w], pooled by the classifier
    torch::Tensor class_weights; // [C], shadow-class weights of the linear head
};

/// Sinusoidal timestep encoding, [N] -> [N, dim].
torch::Tensor timestep_embedding(const torch::Tensor& timesteps, int64_t dim);

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t temb_dim, int64_t groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

private:
    torch::nn::GroupNorm norm1_{nullptr};
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::Linear temb_proj_{nullptr};
    torch::nn::GroupNorm norm2_{nullptr};
    torch::nn::Conv2d conv2_{nullptr};
    torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Conditional noise-prediction network eps_theta(x_t, x_cond, a_t, t).
///
/// A small U-Net with one residual block per level. Two extra heads hang off
/// it: a sigmoid convolution on the last decoder features that refines the
/// shadow attention, and a binary shadow classifier (global average pool plus
/// one linear layer) on the encoder bottleneck, which is what makes class
/// activation maps available.
///
/// The network works on the residual r = (x_t - sqrt(ab) x_cond) / sqrt(ab), which
/// equals x0 - x_cond plus noise of level k = sqrt(1-ab) / sqrt(ab). With d the
/// residual scale and a_ref the refined attention, the clean estimate is
///   x0_hat = x_cond + a_ref * (d^2/(k^2+d^2) r + k d/sqrt(k^2+d^2) F(r/sqrt(k^2+d^2), x_cond, a, t))
/// and the returned noise is eps_hat = (x_t - sqrt(ab) x0_hat) / sqrt(1-ab). ab comes
/// from `schedule` (the default linear schedule when omitted). Pixels the attention
/// leaves out keep the condition value; the F head starts at zero.
class DenoiserImpl : public torch::nn::Module {
public:
    explicit DenoiserImpl(DenoiserOptions options = {},
                          std::optional<NoiseSchedule> schedule = std::nullopt);

    DenoiserOutput forward(const torch::Tensor& x_t, const torch::Tensor& x_cond,
                           const torch::Tensor& attention, const torch::Tensor& timesteps);

    /// Runs the shared encoder on a clean image: the image is the condition, the
    /// residual and attention are zero and the timestep is 0.
    ClassifierOutput classify(const torch::Tensor& image);

    const DenoiserOptions& options() const { return options_; }

    /// Spatial sizes must be divisible by this.
    int64_t size_multiple() const { return int64_t{1} << (options_.levels() - 1); }

private:
    struct Encoded {
        torch::Tensor bottleneck;
        std::vector<torch::Tensor> skips;
    };
    Encoded encode(const torch::Tensor& input, const torch::Tensor& temb);
    torch::Tensor embed_time(const torch::Tensor& timesteps);
    void check_spatial(const torch::Tensor& x) const;

    DenoiserOptions options_;
    torch::Tensor signal_scale_; // sqrt(alpha_bar(t)), t = 0..T, float64
    torch::Tensor noise_scale_;  // sqrt(1 - alpha_bar(t))
    torch::nn::Linear time_fc1_{nullptr};
    torch::nn::Linear time_fc2_{nullptr};
    torch::nn::Conv2d conv_in_{nullptr};
    torch::nn::ModuleList down_blocks_;
    torch::nn::ModuleList downsamplers_;
    ResBlock mid_{nullptr};
    torch::nn::ModuleList up_blocks_;
    torch::nn::ModuleList upsamplers_;
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Conv2d eps_head_{nullptr};
    torch::nn::Conv2d attention_head_{nullptr};
    torch::nn::Linear classifier_{nullptr};
};
TORCH_MODULE(Denoiser);

int64_t parameter_count(torch::nn::Module& module);

} // namespace shadowdiff
