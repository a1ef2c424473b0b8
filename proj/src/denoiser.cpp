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

#include "shadowdiff/denoiser.hpp"

#include "shadowdiff/errors.hpp"

#include <cmath>
#include <numeric>

namespace shadowdiff {

namespace nn = torch::nn;

namespace {

int64_t fit_groups(int64_t channels, int64_t groups)
{
    int64_t g = std::min(groups, channels);
    while (channels % g != 0) {
        --g;
    }
    return g;
}

// Replicate padding: zero padding gives every feature map a border pattern
// that dominates the min-max normalized CAM.
nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1)
{
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).padding_mode(torch::kReplicate));
}

} // namespace

torch::Tensor timestep_embedding(const torch::Tensor& timesteps, int64_t dim)
{
    const int64_t half = dim / 2;
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / half);
    auto args = timesteps.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
    if (dim % 2 == 1) {
        emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, opts)}, 1);
    }
    return emb;
}

ResBlockImpl::ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t temb_dim, int64_t groups)
{
    norm1_ = register_module("norm1", nn::GroupNorm(fit_groups(in_ch, groups), in_ch));
    conv1_ = register_module("conv1", conv3x3(in_ch, out_ch));
    temb_proj_ = register_module("temb_proj", nn::Linear(temb_dim, out_ch));
    norm2_ = register_module("norm2", nn::GroupNorm(fit_groups(out_ch, groups), out_ch));
    conv2_ = register_module("conv2", conv3x3(out_ch, out_ch));
    if (in_ch != out_ch) {
        skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
    }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb)
{
    auto h = conv1_(torch::silu(norm1_(x)));
    h = h + temb_proj_(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2_(torch::silu(norm2_(h)));
    return (skip_ ? skip_(x) : x) + h;
}

DenoiserImpl::DenoiserImpl(DenoiserOptions options, std::optional<NoiseSchedule> schedule)
    : options_(std::move(options))
{
    if (options_.channel_mult.empty() || options_.base_width < 1 || options_.time_embed_dim < 2 ||
        !(options_.residual_scale > 0.0)) {
        throw UsageError("invalid denoiser options");
    }
    if (!schedule) {
        schedule = NoiseSchedule::linear(1000, 1e-4, 0.02);
    }
    std::vector<double> ab{1.0};
    ab.insert(ab.end(), schedule->alpha_bars().begin(), schedule->alpha_bars().end());
    auto alpha_bar = torch::tensor(ab, torch::kFloat64);
    signal_scale_ = alpha_bar.sqrt();
    noise_scale_ = (1.0 - alpha_bar).sqrt();
    const int64_t temb = options_.time_embed_dim;
    const int64_t groups = options_.groups;
    time_fc1_ = register_module("time_fc1", nn::Linear(temb, temb));
    time_fc2_ = register_module("time_fc2", nn::Linear(temb, temb));

    std::vector<int64_t> widths;
    for (auto m : options_.channel_mult) {
        widths.push_back(options_.base_width * m);
    }
    conv_in_ = register_module("conv_in", conv3x3(kDenoiserInputChannels, widths[0]));

    int64_t ch = widths[0];
    for (std::size_t level = 0; level < widths.size(); ++level) {
        down_blocks_->push_back(ResBlock(ch, widths[level], temb, groups));
        ch = widths[level];
        if (level + 1 < widths.size()) {
            downsamplers_->push_back(conv3x3(ch, ch, 2));
        }
    }
    register_module("down_blocks", down_blocks_);
    register_module("downsamplers", downsamplers_);
    mid_ = register_module("mid", ResBlock(ch, ch, temb, groups));

    for (std::size_t i = 0; i < widths.size(); ++i) {
        const std::size_t level = widths.size() - 1 - i;
        up_blocks_->push_back(ResBlock(ch + widths[level], widths[level], temb, groups));
        ch = widths[level];
        if (level > 0) {
            upsamplers_->push_back(conv3x3(ch, widths[level - 1]));
            ch = widths[level - 1];
        }
    }
    register_module("up_blocks", up_blocks_);
    register_module("upsamplers", upsamplers_);

    out_norm_ = register_module("out_norm", nn::GroupNorm(fit_groups(ch, groups), ch));
    eps_head_ = register_module("eps_head", conv3x3(ch, 3));
    {
        torch::NoGradGuard no_grad;
        eps_head_->weight.zero_();
        eps_head_->bias.zero_();
    }
    attention_head_ = register_module("attention_head", conv3x3(ch, 1));
    classifier_ = register_module("classifier", nn::Linear(widths.back(), 1));
}

torch::Tensor DenoiserImpl::embed_time(const torch::Tensor& timesteps)
{
    auto dtype = conv_in_->weight.scalar_type();
    auto emb = timestep_embedding(timesteps, options_.time_embed_dim).to(dtype);
    return time_fc2_(torch::silu(time_fc1_(emb)));
}

void DenoiserImpl::check_spatial(const torch::Tensor& x) const
{
    if (x.dim() != 4) {
        throw UsageError("denoiser expects [N, C, H, W] tensors");
    }
    const int64_t m = size_multiple();
    if (x.size(2) % m != 0 || x.size(3) % m != 0) {
        throw UsageError("image size must be a multiple of " + std::to_string(m));
    }
}

DenoiserImpl::Encoded DenoiserImpl::encode(const torch::Tensor& input, const torch::Tensor& temb)
{
    Encoded out;
    auto h = conv_in_(input);
    for (std::size_t level = 0; level < down_blocks_->size(); ++level) {
        h = down_blocks_[level]->as<ResBlock>()->forward(h, temb);
        out.skips.push_back(h);
        if (level < downsamplers_->size()) {
            h = downsamplers_[level]->as<nn::Conv2d>()->forward(h);
        }
    }
    out.bottleneck = mid_(h, temb);
    return out;
}

DenoiserOutput DenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& x_cond,
                                     const torch::Tensor& attention,
                                     const torch::Tensor& timesteps)
{
    check_spatial(x_t);
    if (x_t.size(1) != 3 || x_cond.sizes() != x_t.sizes()) {
        throw UsageError("denoiser: x_t and x_cond must both be [N, 3, H, W] of equal shape");
    }
    if (attention.dim() != 4 || attention.size(1) != 1 || attention.size(0) != x_t.size(0) ||
        attention.size(2) != x_t.size(2) || attention.size(3) != x_t.size(3)) {
        throw UsageError("denoiser: attention must be [N, 1, H, W] matching x_t");
    }
    if (timesteps.dim() != 1 || timesteps.size(0) != x_t.size(0)) {
        throw UsageError("denoiser: one timestep per batch element required");
    }
    const auto t_max = signal_scale_.size(0) - 1;
    if (timesteps.min().item<int64_t>() < 1 || timesteps.max().item<int64_t>() > t_max) {
        throw UsageError("denoiser: timestep outside [1, " + std::to_string(t_max) + "]");
    }

    const auto t = timesteps.to(torch::kLong);
    const auto opts = x_t.options();
    auto a = signal_scale_.index_select(0, t).to(opts).view({-1, 1, 1, 1});
    auto s = noise_scale_.index_select(0, t).to(opts).view({-1, 1, 1, 1});
    const double d = options_.residual_scale;
    auto k = s / a;
    auto norm = (k * k + d * d).sqrt();
    auto residual = (x_t - a * x_cond) / a;

    auto temb = embed_time(timesteps);
    auto enc = encode(torch::cat({residual / norm, x_cond, attention}, 1), temb);

    auto h = enc.bottleneck;
    for (std::size_t i = 0; i < up_blocks_->size(); ++i) {
        const auto& skip = enc.skips[enc.skips.size() - 1 - i];
        h = up_blocks_[i]->as<ResBlock>()->forward(torch::cat({h, skip}, 1), temb);
        if (i < upsamplers_->size()) {
            h = torch::nn::functional::interpolate(
                h, torch::nn::functional::InterpolateFuncOptions()
                       .scale_factor(std::vector<double>{2.0, 2.0})
                       .mode(torch::kNearest));
            h = upsamplers_[i]->as<nn::Conv2d>()->forward(h);
        }
    }
    auto features = torch::silu(out_norm_(h));
    auto refined = torch::sigmoid(attention_head_(features));
    auto correction = (d * d / (norm * norm)) * residual + (k * d / norm) * eps_head_(features);
    auto x0_hat = x_cond + refined * correction;
    return {(x_t - a * x0_hat) / s, refined};
}

ClassifierOutput DenoiserImpl::classify(const torch::Tensor& image)
{
    check_spatial(image);
    if (image.size(1) != 3) {
        throw UsageError("classify expects [N, 3, H, W]");
    }
    const int64_t n = image.size(0);
    auto temb = embed_time(torch::zeros({n}, torch::kLong));
    auto enc = encode(torch::cat({torch::zeros_like(image), image,
                                  torch::zeros({n, 1, image.size(2), image.size(3)}, image.options())},
                                 1),
                      temb);

    ClassifierOutput out;
    out.feature_map = torch::relu(enc.bottleneck);
    auto pooled = out.feature_map.mean({2, 3});
    out.logit = classifier_(pooled).squeeze(1);
    out.probability = torch::sigmoid(out.logit);
    out.class_weights = classifier_->weight.squeeze(0);
    return out;
}

int64_t parameter_count(torch::nn::Module& module)
{
    int64_t total = 0;
    for (const auto& p : module.parameters()) {
        total += p.numel();
    }
    return total;
}

} // namespace shadowdiff
