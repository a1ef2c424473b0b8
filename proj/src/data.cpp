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

#include "shadowdiff/data.hpp"

#include "shadowdiff/errors.hpp"
#include "shadowdiff/image_io.hpp"
#include "shadowdiff/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

namespace shadowdiff {

namespace fs = std::filesystem;

namespace {

constexpr double kMinVisibleDepth = 0.5 / 255.0;

// Portable uniform draws; std::uniform_real_distribution is implementation-defined.
class Uniform {
public:
    explicit Uniform(uint64_t seed) : state_(seed) {}
    double operator()() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double operator()(double lo, double hi) { return lo + (hi - lo) * (*this)(); }
    int integer(int lo, int hi) { return lo + static_cast<int>((*this)() * (hi - lo + 1)) % (hi - lo + 1); }

private:
    uint64_t next()
    {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix_seed(state_, 0);
    }
    uint64_t state_;
};

bool inside_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y)
{
    bool inside = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) {
            inside = !inside;
        }
    }
    return inside;
}

double polygon_area(const std::vector<std::array<double, 2>>& poly)
{
    double area = 0.0;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        area += poly[j][0] * poly[i][1] - poly[i][0] * poly[j][1];
    }
    return std::abs(area) * 0.5;
}

std::vector<double> gaussian_blur(const std::vector<double>& src, int64_t h, int64_t w, double sigma)
{
    if (sigma <= 0.0) {
        return src;
    }
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
        total += kernel[k + radius];
    }
    for (auto& v : kernel) {
        v /= total;
    }
    auto clampi = [](int64_t v, int64_t n) { return std::clamp<int64_t>(v, 0, n - 1); };
    std::vector<double> tmp(src.size());
    std::vector<double> out(src.size());
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += kernel[k + radius] * src[y * w + clampi(x + k, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += kernel[k + radius] * tmp[clampi(y + k, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    return out;
}

torch::Tensor grid_to_tensor(const std::vector<double>& values, int64_t h, int64_t w)
{
    return torch::tensor(values, torch::TensorOptions().dtype(torch::kDouble)).view({1, h, w});
}

std::array<double, 3> random_color(Uniform& u, double lo, double hi)
{
    return {u(lo, hi), u(lo, hi), u(lo, hi)};
}

} // namespace

std::string to_string(ShadowKind kind)
{
    switch (kind) {
    case ShadowKind::Hard: return "hard";
    case ShadowKind::Soft: return "soft";
    case ShadowKind::Self: return "self";
    }
    return "hard";
}

ShadowKind shadow_kind_from_string(const std::string& name)
{
    if (name == "hard") return ShadowKind::Hard;
    if (name == "soft") return ShadowKind::Soft;
    if (name == "self") return ShadowKind::Self;
    throw UsageError("unknown shadow kind '" + name + "'");
}

void to_json(nlohmann::json& j, const ShadowSpec& spec)
{
    j = nlohmann::json{{"kind", to_string(spec.kind)},
                       {"attenuation", spec.attenuation},
                       {"penumbra_width", spec.penumbra_width},
                       {"seed", spec.seed}};
    if (spec.kind == ShadowKind::Self) {
        j["center"] = spec.center;
        j["radii"] = spec.radii;
        j["light_angle"] = spec.light_angle;
    } else {
        j["polygon"] = spec.polygon;
    }
}

void from_json(const nlohmann::json& j, ShadowSpec& spec)
{
    spec.kind = shadow_kind_from_string(j.at("kind").get<std::string>());
    spec.attenuation = j.at("attenuation").get<double>();
    spec.penumbra_width = j.value("penumbra_width", 0.0);
    spec.seed = j.value("seed", uint64_t{0});
    if (spec.kind == ShadowKind::Self) {
        spec.center = j.at("center").get<std::array<double, 2>>();
        spec.radii = j.at("radii").get<std::array<double, 2>>();
        spec.light_angle = j.value("light_angle", 0.0);
    } else {
        spec.polygon = j.at("polygon").get<std::vector<std::array<double, 2>>>();
    }
}

torch::Tensor shadow_field(const ShadowSpec& spec, int64_t height, int64_t width)
{
    if (!(spec.attenuation > 0.0 && spec.attenuation < 1.0)) {
        throw UsageError("shadow attenuation must lie strictly inside (0, 1)");
    }
    if (spec.penumbra_width < 0.0) {
        throw UsageError("penumbra width must be non-negative");
    }
    const double depth = 1.0 - spec.attenuation;
    const double pixel_area = static_cast<double>(height * width);
    std::vector<double> occlusion(static_cast<std::size_t>(height * width), 0.0);

    if (spec.kind == ShadowKind::Self) {
        const double rx = spec.radii[0];
        const double ry = spec.radii[1];
        if (!(rx > 0.0 && ry > 0.0) || std::numbers::pi * rx * ry * pixel_area < 0.5) {
            throw UsageError("degenerate self-shadow object");
        }
        const double lx = std::cos(spec.light_angle);
        const double ly = std::sin(spec.light_angle);
        for (int64_t y = 0; y < height; ++y) {
            for (int64_t x = 0; x < width; ++x) {
                const double u = ((x + 0.5) / width - spec.center[0]) / rx;
                const double v = ((y + 0.5) / height - spec.center[1]) / ry;
                if (u * u + v * v > 1.0) {
                    continue;
                }
                // Facing away from the light darkens, with a smooth terminator.
                double s = std::clamp((0.1 - (u * lx + v * ly)) / 0.5, 0.0, 1.0);
                s = s * s * (3.0 - 2.0 * s);
                occlusion[y * width + x] = s;
            }
        }
    } else {
        if (spec.polygon.size() < 3 || polygon_area(spec.polygon) * pixel_area < 0.5) {
            throw UsageError("degenerate shadow polygon (zero area)");
        }
        for (int64_t y = 0; y < height; ++y) {
            for (int64_t x = 0; x < width; ++x) {
                if (inside_polygon(spec.polygon, (x + 0.5) / width, (y + 0.5) / height)) {
                    occlusion[y * width + x] = 1.0;
                }
            }
        }
        if (spec.kind == ShadowKind::Soft) {
            occlusion = gaussian_blur(occlusion, height, width, spec.penumbra_width);
        }
    }

    std::vector<double> field(occlusion.size());
    for (std::size_t i = 0; i < field.size(); ++i) {
        field[i] = 1.0 - depth * occlusion[i];
    }
    return grid_to_tensor(field, height, width);
}

ShadowPair synth_shadow(const torch::Tensor& clean, const ShadowSpec& spec)
{
    if (clean.dim() != 3 || clean.size(0) != 3) {
        throw UsageError("synth_shadow expects a [3, H, W] image");
    }
    auto field = shadow_field(spec, clean.size(1), clean.size(2));
    const double midpoint = 0.5 * (spec.attenuation + 1.0);
    auto darkening = 1.0 - field;
    auto mask = ((field < midpoint) & (darkening >= kMinVisibleDepth)).to(clean.scalar_type());

    ShadowPair pair;
    pair.clean = clean;
    // Pixels with a unit field are copied, never recomputed.
    pair.shadow = torch::where(field < 1.0, clean * field.to(clean.scalar_type()), clean);
    pair.mask = mask;
    pair.provenance = Provenance::Synthetic;
    return pair;
}

torch::Tensor make_scene(int64_t size, uint64_t seed)
{
    if (size < 4) {
        throw UsageError("scene size must be at least 4 pixels");
    }
    Uniform u(mix_seed(seed, 11));
    const auto c0 = random_color(u, 0.45, 0.95);
    const auto c1 = random_color(u, 0.45, 0.95);
    const double angle = u(0.0, 2.0 * std::numbers::pi);
    const double gx = std::cos(angle);
    const double gy = std::sin(angle);
    const double freq = u(2.0, 6.0);
    const double stripe_angle = u(0.0, std::numbers::pi);
    const double sx = std::cos(stripe_angle);
    const double sy = std::sin(stripe_angle);
    const double amp = u(0.02, 0.06);

    struct Shape {
        bool circle;
        double cx, cy, rx, ry;
        std::array<double, 3> color;
    };
    std::vector<Shape> shapes(static_cast<std::size_t>(u.integer(2, 4)));
    for (auto& s : shapes) {
        s.circle = u() < 0.5;
        s.cx = u(0.1, 0.9);
        s.cy = u(0.1, 0.9);
        s.rx = u(0.08, 0.25);
        s.ry = s.circle ? s.rx : u(0.08, 0.25);
        s.color = random_color(u, 0.3, 0.95);
    }

    std::vector<double> img(static_cast<std::size_t>(3 * size * size));
    for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
            const double px = (x + 0.5) / size;
            const double py = (y + 0.5) / size;
            const double g = std::clamp(0.5 + 0.5 * ((px - 0.5) * gx + (py - 0.5) * gy) * 1.4, 0.0, 1.0);
            std::array<double, 3> c{};
            for (int k = 0; k < 3; ++k) {
                c[k] = (1.0 - g) * c0[k] + g * c1[k];
            }
            for (const auto& s : shapes) {
                const double dx = (px - s.cx) / s.rx;
                const double dy = (py - s.cy) / s.ry;
                const bool hit = s.circle ? dx * dx + dy * dy <= 1.0
                                          : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
                if (hit) {
                    c = s.color;
                }
            }
            const double stripe = amp * std::sin(2.0 * std::numbers::pi * freq * (px * sx + py * sy));
            for (int k = 0; k < 3; ++k) {
                img[(k * size + y) * size + x] = std::clamp(c[k] + stripe, 0.0, 1.0);
            }
        }
    }
    return torch::tensor(img, torch::TensorOptions().dtype(torch::kDouble))
        .view({3, size, size})
        .to(torch::kFloat32);
}

ShadowSpec random_shadow_spec(ShadowKind kind, int64_t size, uint64_t seed)
{
    Uniform u(mix_seed(seed, 23));
    ShadowSpec spec;
    spec.kind = kind;
    spec.seed = seed;
    spec.attenuation = u(0.3, 0.6);
    if (kind == ShadowKind::Self) {
        spec.center = {u(0.35, 0.65), u(0.35, 0.65)};
        spec.radii = {u(0.2, 0.32), u(0.2, 0.32)};
        spec.light_angle = u(0.0, 2.0 * std::numbers::pi);
        return spec;
    }
    const double cx = u(0.3, 0.7);
    const double cy = u(0.3, 0.7);
    const int vertices = u.integer(3, 6);
    std::vector<double> angles(static_cast<std::size_t>(vertices));
    for (auto& a : angles) {
        a = u(0.0, 2.0 * std::numbers::pi);
    }
    std::sort(angles.begin(), angles.end());
    for (double a : angles) {
        const double r = u(0.2, 0.42);
        spec.polygon.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
    }
    // Fall back to a triangle-safe quad if the random star is too thin.
    if (polygon_area(spec.polygon) * static_cast<double>(size * size) < 16.0) {
        spec.polygon = {{cx - 0.25, cy - 0.2}, {cx + 0.25, cy - 0.2}, {cx + 0.2, cy + 0.25}, {cx - 0.2, cy + 0.25}};
    }
    if (kind == ShadowKind::Soft) {
        spec.penumbra_width = u(1.0, 2.5) * static_cast<double>(size) / 32.0;
    }
    return spec;
}

torch::Tensor paint_self_object(const torch::Tensor& scene, const ShadowSpec& spec)
{
    Uniform u(mix_seed(spec.seed, 31));
    const auto color = random_color(u, 0.55, 0.95);
    auto out = scene.clone();
    const int64_t h = scene.size(1);
    const int64_t w = scene.size(2);
    auto acc = out.accessor<float, 3>();
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const double dx = ((x + 0.5) / w - spec.center[0]) / spec.radii[0];
            const double dy = ((y + 0.5) / h - spec.center[1]) / spec.radii[1];
            if (dx * dx + dy * dy > 1.0) {
                continue;
            }
            for (int k = 0; k < 3; ++k) {
                acc[k][y][x] = static_cast<float>(0.85 * color[k] + 0.15 * acc[k][y][x]);
            }
        }
    }
    return out;
}

std::vector<SyntheticSample> make_synthetic_dataset(const SyntheticCounts& counts, int64_t size,
                                                    uint64_t seed)
{
    if (counts.hard < 0 || counts.soft < 0 || counts.self < 0 || counts.total() == 0) {
        throw UsageError("synthetic dataset needs a positive number of pairs");
    }
    std::array<int, 3> remaining{counts.hard, counts.soft, counts.self};
    const std::array<ShadowKind, 3> kinds{ShadowKind::Hard, ShadowKind::Soft, ShadowKind::Self};

    std::vector<SyntheticSample> out;
    std::size_t cursor = 0;
    for (int i = 0; i < counts.total(); ++i) {
        while (remaining[cursor % 3] == 0) {
            ++cursor;
        }
        const ShadowKind kind = kinds[cursor % 3];
        --remaining[cursor % 3];
        ++cursor;

        const uint64_t item_seed = mix_seed(seed, static_cast<uint64_t>(i));
        auto scene = make_scene(size, mix_seed(item_seed, 1));
        auto spec = random_shadow_spec(kind, size, mix_seed(item_seed, 2));
        if (kind == ShadowKind::Self) {
            scene = paint_self_object(scene, spec);
        }
        SyntheticSample s{synth_shadow(scene, spec), spec};
        char name[32];
        std::snprintf(name, sizeof(name), "%04d_%s", i, to_string(kind).c_str());
        s.pair.name = name;
        out.push_back(std::move(s));
    }
    return out;
}

void save_pairs(const fs::path& dir, const std::vector<ShadowPair>& pairs)
{
    for (const auto& p : pairs) {
        const auto file = p.name + ".png";
        write_image(dir / "shadow" / file, p.shadow);
        write_image(dir / "clean" / file, p.clean);
        if (p.mask) {
            write_image(dir / "mask" / file, *p.mask);
        }
    }
}

LoadedDataset load_paired_dataset(const fs::path& dir)
{
    const auto shadow_dir = dir / "shadow";
    const auto clean_dir = dir / "clean";
    const auto mask_dir = dir / "mask";
    if (!fs::is_directory(shadow_dir) || !fs::is_directory(clean_dir)) {
        throw DataError("dataset " + dir.string() + " needs shadow/ and clean/ directories");
    }

    auto list = [](const fs::path& d) {
        std::vector<std::string> names;
        if (fs::is_directory(d)) {
            for (const auto& entry : fs::directory_iterator(d)) {
                if (entry.is_regular_file() && is_image_file(entry.path())) {
                    names.push_back(entry.path().filename().string());
                }
            }
        }
        std::sort(names.begin(), names.end());
        return names;
    };
    const auto shadows = list(shadow_dir);
    const auto cleans = list(clean_dir);

    LoadedDataset out;
    for (const auto& name : cleans) {
        if (!std::binary_search(shadows.begin(), shadows.end(), name)) {
            out.warnings.push_back("clean/" + name + " has no shadow counterpart; skipped");
        }
    }
    for (const auto& name : shadows) {
        if (!std::binary_search(cleans.begin(), cleans.end(), name)) {
            out.warnings.push_back("shadow/" + name + " has no clean counterpart; skipped");
            continue;
        }
        ShadowPair pair;
        pair.name = fs::path(name).stem().string();
        pair.provenance = Provenance::External;
        pair.shadow = read_rgb(shadow_dir / name);
        pair.clean = read_rgb(clean_dir / name);
        if (pair.shadow.sizes() != pair.clean.sizes()) {
            out.warnings.push_back(name + ": shadow and clean sizes differ; skipped");
            continue;
        }
        if (fs::exists(mask_dir / name)) {
            auto mask = read_gray(mask_dir / name);
            if (mask.size(1) != pair.shadow.size(1) || mask.size(2) != pair.shadow.size(2)) {
                out.warnings.push_back(name + ": mask size differs; skipped");
                continue;
            }
            pair.mask = mask;
        }
        out.pairs.push_back(std::move(pair));
    }
    if (out.pairs.empty()) {
        throw DataError("no usable pairs in " + dir.string());
    }
    return out;
}

std::pair<torch::Tensor, torch::Tensor> stack_pairs(const std::vector<ShadowPair>& pairs)
{
    if (pairs.empty()) {
        throw DataError("cannot stack an empty pair list");
    }
    std::vector<torch::Tensor> shadows;
    std::vector<torch::Tensor> cleans;
    for (const auto& p : pairs) {
        if (p.shadow.sizes() != pairs.front().shadow.sizes()) {
            throw DataError("all pairs must share one image size for training");
        }
        shadows.push_back(to_model_space(p.shadow.to(torch::kFloat32)));
        cleans.push_back(to_model_space(p.clean.to(torch::kFloat32)));
    }
    return {torch::stack(shadows), torch::stack(cleans)};
}

} // namespace shadowdiff
