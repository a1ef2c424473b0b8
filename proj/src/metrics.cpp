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

#include "shadowdiff/metrics.hpp"

#include "shadowdiff/errors.hpp"

#include <cmath>

namespace shadowdiff {

namespace {

constexpr int kWindowRadius = 5;
constexpr double kWindowSigma = 1.5;
constexpr double kDynamicRange = 255.0;

torch::Tensor to_bytes(const torch::Tensor& image)
{
    if (image.scalar_type() == torch::kUInt8) {
        return image.contiguous();
    }
    return image.detach().to(torch::kFloat64).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8).contiguous();
}

double srgb_to_linear(double c)
{
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double lab_f(double t)
{
    constexpr double delta = 6.0 / 29.0;
    return t > delta * delta * delta ? std::cbrt(t) : t / (3.0 * delta * delta) + 4.0 / 29.0;
}

int64_t reflect(int64_t i, int64_t n)
{
    // Symmetric (edge-duplicating) extension with period 2n.
    const int64_t period = 2 * n;
    i %= period;
    if (i < 0) {
        i += period;
    }
    return i < n ? i : period - 1 - i;
}

std::vector<double> blur(const std::vector<double>& src, int64_t h, int64_t w,
                         const std::array<double, 2 * kWindowRadius + 1>& kernel)
{
    std::vector<double> tmp(src.size());
    std::vector<double> out(src.size());
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -kWindowRadius; k <= kWindowRadius; ++k) {
                acc += kernel[k + kWindowRadius] * src[y * w + reflect(x + k, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -kWindowRadius; k <= kWindowRadius; ++k) {
                acc += kernel[k + kWindowRadius] * tmp[reflect(y + k, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    return out;
}

std::array<double, 2 * kWindowRadius + 1> gaussian_window()
{
    std::array<double, 2 * kWindowRadius + 1> k{};
    double total = 0.0;
    for (int i = -kWindowRadius; i <= kWindowRadius; ++i) {
        k[i + kWindowRadius] = std::exp(-0.5 * i * i / (kWindowSigma * kWindowSigma));
        total += k[i + kWindowRadius];
    }
    for (auto& v : k) {
        v /= total;
    }
    return k;
}

struct Accumulator {
    double lab_abs = 0.0;
    double squared = 0.0;
    double ssim = 0.0;
    int64_t pixels = 0;

    RegionMetrics finish() const
    {
        RegionMetrics m;
        m.pixels = pixels;
        m.squared_error = squared;
        if (pixels == 0) {
            return m;
        }
        m.rmse = lab_abs / static_cast<double>(pixels);
        const double mse = squared / (3.0 * static_cast<double>(pixels));
        m.psnr = mse == 0.0 ? kPsnrCap
                            : std::min(kPsnrCap, 10.0 * std::log10(kDynamicRange * kDynamicRange / mse));
        m.ssim = ssim / static_cast<double>(pixels);
        return m;
    }
};

nlohmann::json region_json(const RegionMetrics& m)
{
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"rmse", opt(m.rmse)}, {"psnr", opt(m.psnr)}, {"ssim", opt(m.ssim)}, {"pixels", m.pixels}};
}

} // namespace

std::array<double, 3> srgb8_to_lab(uint8_t r, uint8_t g, uint8_t b)
{
    const double rl = srgb_to_linear(r / 255.0);
    const double gl = srgb_to_linear(g / 255.0);
    const double bl = srgb_to_linear(b / 255.0);
    const double x = 0.412453 * rl + 0.357580 * gl + 0.180423 * bl;
    const double y = 0.212671 * rl + 0.715160 * gl + 0.072169 * bl;
    const double z = 0.019334 * rl + 0.119193 * gl + 0.950227 * bl;
    const double fx = lab_f(x / 0.95047);
    const double fy = lab_f(y / 1.0);
    const double fz = lab_f(z / 1.08883);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

std::vector<double> ssim_map(const torch::Tensor& a, const torch::Tensor& b)
{
    auto pa = to_bytes(a);
    auto pb = to_bytes(b);
    if (pa.sizes() != pb.sizes() || pa.dim() != 3) {
        throw UsageError("ssim_map: images must share a [C, H, W] shape");
    }
    const int64_t c = pa.size(0);
    const int64_t h = pa.size(1);
    const int64_t w = pa.size(2);
    const std::size_t n = static_cast<std::size_t>(h * w);
    const double c1 = std::pow(0.01 * kDynamicRange, 2);
    const double c2 = std::pow(0.03 * kDynamicRange, 2);
    const auto kernel = gaussian_window();
    const uint8_t* da = pa.data_ptr<uint8_t>();
    const uint8_t* db = pb.data_ptr<uint8_t>();

    std::vector<double> out(n, 0.0);
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (int64_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = da[ch * n + i];
            y[i] = db[ch * n + i];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = blur(x, h, w, kernel);
        const auto my = blur(y, h, w, kernel);
        const auto exx = blur(xx, h, w, kernel);
        const auto eyy = blur(yy, h, w, kernel);
        const auto exy = blur(xy, h, w, kernel);
        for (std::size_t i = 0; i < n; ++i) {
            const double vx = exx[i] - mx[i] * mx[i];
            const double vy = eyy[i] - my[i] * my[i];
            const double cov = exy[i] - mx[i] * my[i];
            const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
            const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            out[i] += num / den;
        }
    }
    for (auto& v : out) {
        v /= static_cast<double>(c);
    }
    return out;
}

MetricReport region_metrics(const torch::Tensor& pred, const torch::Tensor& truth,
                            const std::optional<torch::Tensor>& mask)
{
    if (pred.dim() != 3 || pred.size(0) != 3 || pred.sizes() != truth.sizes()) {
        throw UsageError("region_metrics: prediction and truth must be equal [3, H, W]");
    }
    const int64_t h = pred.size(1);
    const int64_t w = pred.size(2);
    const int64_t n = h * w;
    torch::Tensor region;
    if (mask) {
        if (mask->numel() != n) {
            throw UsageError("region_metrics: mask size does not match the image");
        }
        region = (mask->reshape({n}).to(torch::kFloat64) >= 0.5).contiguous();
    } else {
        region = torch::zeros({n}, torch::kBool);
    }

    auto pa = to_bytes(pred);
    auto pb = to_bytes(truth);
    const uint8_t* da = pa.data_ptr<uint8_t>();
    const uint8_t* db = pb.data_ptr<uint8_t>();
    const bool* in_shadow = region.data_ptr<bool>();
    const auto ssim = ssim_map(pa, pb);

    Accumulator s, ns, all;
    for (int64_t i = 0; i < n; ++i) {
        const auto la = srgb8_to_lab(da[i], da[n + i], da[2 * n + i]);
        const auto lb = srgb8_to_lab(db[i], db[n + i], db[2 * n + i]);
        const double lab_abs = std::abs(la[0] - lb[0]) + std::abs(la[1] - lb[1]) + std::abs(la[2] - lb[2]);
        double sq = 0.0;
        for (int64_t ch = 0; ch < 3; ++ch) {
            const double d = static_cast<double>(da[ch * n + i]) - static_cast<double>(db[ch * n + i]);
            sq += d * d;
        }
        for (Accumulator* acc : {in_shadow[i] ? &s : &ns, &all}) {
            acc->lab_abs += lab_abs;
            acc->squared += sq;
            acc->ssim += ssim[static_cast<std::size_t>(i)];
            acc->pixels += 1;
        }
    }
    return {s.finish(), ns.finish(), all.finish()};
}

MetricReport mean_report(const std::vector<MetricReport>& reports)
{
    auto average = [&](auto region_of) {
        RegionMetrics out;
        double rmse = 0.0, psnr = 0.0, ssim = 0.0;
        int count = 0;
        for (const auto& r : reports) {
            const RegionMetrics& m = region_of(r);
            out.pixels += m.pixels;
            out.squared_error += m.squared_error;
            if (m.rmse) {
                rmse += *m.rmse;
                psnr += *m.psnr;
                ssim += *m.ssim;
                ++count;
            }
        }
        if (count > 0) {
            out.rmse = rmse / count;
            out.psnr = psnr / count;
            out.ssim = ssim / count;
        }
        return out;
    };
    return {average([](const MetricReport& r) -> const RegionMetrics& { return r.shadow; }),
            average([](const MetricReport& r) -> const RegionMetrics& { return r.non_shadow; }),
            average([](const MetricReport& r) -> const RegionMetrics& { return r.all; })};
}

nlohmann::json to_json(const MetricReport& report)
{
    return {{"S", region_json(report.shadow)},
            {"NS", region_json(report.non_shadow)},
            {"ALL", region_json(report.all)}};
}

} // namespace shadowdiff
