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

// Reference computations shared by the unit and acceptance suites. Each one is
// written against the defining formula, independently of the library code paths.

#include "shadowdiff/denoiser.hpp"
#include "shadowdiff/rng.hpp"
#include "shadowdiff/sampler.hpp"
#include "shadowdiff/schedule.hpp"
#include "shadowdiff/vit_sim.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

namespace shadowdiff::test {

inline torch::TensorOptions f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

inline torch::Tensor randn64(at::IntArrayRef shape, uint64_t seed)
{
    auto gen = make_generator(seed);
    return torch::randn(shape, gen, f64());
}

inline torch::Tensor rand64(at::IntArrayRef shape, uint64_t seed)
{
    auto gen = make_generator(seed);
    return torch::rand(shape, gen, f64());
}

inline double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b)
{
    return (a.to(torch::kFloat64) - b.to(torch::kFloat64)).abs().max().item<double>();
}

/// Relative error in the gradient-check sense, floored to avoid dividing by ~0.
inline double relative_error(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Cumulative products of 1 - beta for an evenly spaced beta ramp, one factor at a time.
inline std::vector<double> alpha_bar_oracle(int steps, double beta_start, double beta_end)
{
    std::vector<double> out;
    double running = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double beta = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1);
        running *= 1.0 - beta;
        out.push_back(running);
    }
    return out;
}

/// Returns exactly the noise that makes x̂0 equal `target(t)` at every step.
inline NoisePredictor target_predictor(const NoiseSchedule& sched, std::function<torch::Tensor(int)> target)
{
    return [&sched, target](const torch::Tensor& x_t, const torch::Tensor&, const torch::Tensor& a, int t) {
        const double ab = sched.alpha_bar(t);
        auto x0 = target(t).unsqueeze(0);
        auto eps = (x_t - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
        // Refined attention: a deterministic function of the incoming map.
        return DenoiserOutput{eps, (a * 0.5 + 0.25).clamp(0.0, 1.0)};
    };
}

inline torch::Tensor random_orthogonal(int64_t d, uint64_t seed)
{
    return std::get<0>(torch::linalg_qr(randn64({d, d}, seed)));
}

/// ||S(a) - S(b)||_F with S built entry by entry from cosine similarities.
inline double descriptor_loss_oracle(const torch::Tensor& keys_a, const torch::Tensor& keys_b)
{
    auto ka = keys_a.to(torch::kFloat64).contiguous();
    auto kb = keys_b.to(torch::kFloat64).contiguous();
    const int64_t n = ka.size(0);
    const int64_t d = ka.size(1);
    auto pa = ka.accessor<double, 2>();
    auto pb = kb.accessor<double, 2>();
    auto entry = [d](const auto& p, int64_t i, int64_t j) {
        if (i == j) {
            return 0.0;
        }
        double dot = 0.0, ni = 0.0, nj = 0.0;
        for (int64_t c = 0; c < d; ++c) {
            dot += p[i][c] * p[j][c];
            ni += p[i][c] * p[i][c];
            nj += p[j][c] * p[j][c];
        }
        return 1.0 - dot / (std::sqrt(ni) * std::sqrt(nj));
    };
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            const double diff = entry(pa, i, j) - entry(pb, i, j);
            acc += diff * diff;
        }
    }
    return std::sqrt(acc);
}

/// Largest relative error between autograd and central differences over every
/// `stride`-th element of `x`.
inline double gradient_error(torch::Tensor x, const std::function<torch::Tensor(const torch::Tensor&)>& f,
                             int64_t stride = 1, double h = 1e-6)
{
    auto leaf = x.detach().clone().set_requires_grad(true);
    f(leaf).backward();
    auto analytic = leaf.grad().contiguous();

    auto probe = x.detach().clone().contiguous();
    double* data = probe.data_ptr<double>();
    const double* grad = analytic.data_ptr<double>();
    double worst = 0.0;
    torch::NoGradGuard no_grad;
    for (int64_t i = 0; i < probe.numel(); i += stride) {
        const double keep = data[i];
        data[i] = keep + h;
        const double up = f(probe).item<double>();
        data[i] = keep - h;
        const double down = f(probe).item<double>();
        data[i] = keep;
        worst = std::max(worst, relative_error(grad[i], (up - down) / (2.0 * h)));
    }
    return worst;
}

/// Central-difference check of d loss / d parameter over every parameter entry.
/// Returns the worst relative error.
inline double parameter_gradient_error(torch::nn::Module& model, const std::function<torch::Tensor()>& loss,
                                       double h = 1e-6)
{
    double worst = 0.0;
    for (auto& p : model.named_parameters()) {
        auto param = p.value();
        for (auto& q : model.parameters()) {
            q.mutable_grad() = torch::Tensor();
        }
        loss().backward();
        auto analytic = param.grad().detach().clone().contiguous().view({-1});

        torch::NoGradGuard no_grad;
        auto flat = param.view({-1});
        for (int64_t i = 0; i < flat.numel(); ++i) {
            const double keep = flat[i].item<double>();
            flat[i] = keep + h;
            const double up = loss().item<double>();
            flat[i] = keep - h;
            const double down = loss().item<double>();
            flat[i] = keep;
            worst = std::max(worst, relative_error(analytic[i].item<double>(), (up - down) / (2.0 * h)));
        }
    }
    return worst;
}

/// Under 1e3 parameters.
inline DenoiserOptions tiny_denoiser_options()
{
    DenoiserOptions o;
    o.base_width = 2;
    o.channel_mult = {1, 1};
    o.time_embed_dim = 4;
    o.groups = 1;
    return o;
}

/// The noise head starts at zero; give it generic weights so every parameter
/// influences the loss.
inline void randomize_output_head(torch::nn::Module& model, uint64_t seed = 99)
{
    torch::NoGradGuard no_grad;
    for (auto& p : model.named_parameters()) {
        if (p.key().rfind("eps_head.", 0) == 0) {
            auto& v = p.value();
            v.copy_(randn64(v.sizes(), seed++).mul(0.3).to(v.scalar_type()));
        }
    }
}

struct Lab {
    double l, a, b;
};

/// sRGB code values to L*a*b* (D65), straight from the CIE formulas.
inline Lab lab_oracle(int r8, int g8, int b8)
{
    auto lin = [](int v) {
        const double c = v / 255.0;
        return c > 0.04045 ? std::pow((c + 0.055) / 1.055, 2.4) : c / 12.92;
    };
    const double r = lin(r8), g = lin(g8), b = lin(b8);
    const double xyz[3] = {(0.412453 * r + 0.357580 * g + 0.180423 * b) / 0.95047,
                           0.212671 * r + 0.715160 * g + 0.072169 * b,
                           (0.019334 * r + 0.119193 * g + 0.950227 * b) / 1.08883};
    double f[3];
    for (int i = 0; i < 3; ++i) {
        f[i] = xyz[i] > 216.0 / 24389.0 ? std::cbrt(xyz[i]) : (24389.0 / 27.0 * xyz[i] + 16.0) / 116.0;
    }
    return {116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])};
}

inline int mirror(int i, int n)
{
    while (i < 0 || i >= n) {
        i = i < 0 ? -i - 1 : 2 * n - i - 1;
    }
    return i;
}

/// Per-pixel SSIM from a direct 11x11 weighted window, averaged over channels.
inline std::vector<double> ssim_oracle(const torch::Tensor& a8, const torch::Tensor& b8)
{
    const int h = static_cast<int>(a8.size(1));
    const int w = static_cast<int>(a8.size(2));
    double g[11];
    double gs = 0.0;
    for (int i = 0; i < 11; ++i) {
        g[i] = std::exp(-((i - 5) * (i - 5)) / (2.0 * 1.5 * 1.5));
        gs += g[i];
    }
    const double c1 = 6.5025, c2 = 58.5225;
    auto pa = a8.accessor<uint8_t, 3>();
    auto pb = b8.accessor<uint8_t, 3>();
    std::vector<double> out(static_cast<std::size_t>(h * w), 0.0);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int dy = -5; dy <= 5; ++dy) {
                    for (int dx = -5; dx <= 5; ++dx) {
                        const double wgt = g[dy + 5] * g[dx + 5] / (gs * gs);
                        const double u = pa[c][mirror(y + dy, h)][mirror(x + dx, w)];
                        const double v = pb[c][mirror(y + dy, h)][mirror(x + dx, w)];
                        mx += wgt * u;
                        my += wgt * v;
                        sxx += wgt * u * u;
                        syy += wgt * v * v;
                        sxy += wgt * u * v;
                    }
                }
                const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
                out[y * w + x] += ((2 * mx * my + c1) * (2 * cov + c2)) /
                                  ((mx * mx + my * my + c1) * (vx + vy + c2)) / 3.0;
            }
        }
    }
    return out;
}

inline torch::Tensor to_bytes(const torch::Tensor& img)
{
    return img.clamp(0, 1).mul(255).round().to(torch::kUInt8).contiguous();
}

/// Brute-force S / NS / ALL metrics of a [3, H, W] pair in [0, 1], mask >= 0.5 is shadow.
struct RegionOracle {
    double lab[3] = {0, 0, 0};  // summed per-pixel LAB absolute error
    double se[3] = {0, 0, 0};   // summed squared 8-bit error
    double ssim[3] = {0, 0, 0}; // summed SSIM map
    int64_t count[3] = {0, 0, 0};

    double rmse(int k) const { return lab[k] / count[k]; }
    double psnr(int k) const { return 10.0 * std::log10(255.0 * 255.0 / (se[k] / (3.0 * count[k]))); }
    double mean_ssim(int k) const { return ssim[k] / count[k]; }
};

inline RegionOracle region_oracle(const torch::Tensor& pred, const torch::Tensor& truth, const torch::Tensor& mask)
{
    auto a8 = to_bytes(pred), b8 = to_bytes(truth);
    auto ssim = ssim_oracle(a8, b8);
    auto pa = a8.accessor<uint8_t, 3>();
    auto pb = b8.accessor<uint8_t, 3>();
    auto m = mask.to(torch::kFloat64).contiguous();
    auto pm = m.accessor<double, 3>();
    const int h = static_cast<int>(pred.size(1)), w = static_cast<int>(pred.size(2));
    RegionOracle r;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int region = pm[0][y][x] >= 0.5 ? 0 : 1;
            const Lab p = lab_oracle(pa[0][y][x], pa[1][y][x], pa[2][y][x]);
            const Lab t = lab_oracle(pb[0][y][x], pb[1][y][x], pb[2][y][x]);
            const double d = std::abs(p.l - t.l) + std::abs(p.a - t.a) + std::abs(p.b - t.b);
            double e = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double diff = double(pa[c][y][x]) - double(pb[c][y][x]);
                e += diff * diff;
            }
            for (int k : {region, 2}) {
                r.lab[k] += d;
                r.se[k] += e;
                r.ssim[k] += ssim[y * w + x];
                ++r.count[k];
            }
        }
    }
    return r;
}

} // namespace shadowdiff::test
