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
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace shadowdiff {

enum class ShadowKind { Hard, Soft, Self };

std::string to_string(ShadowKind kind);
ShadowKind shadow_kind_from_string(const std::string& name);

enum class Provenance { Synthetic, External };

/// Geometry and strength of one synthetic shadow. Coordinates are normalized
/// to [0, 1] image space, x to the right and y down.
struct ShadowSpec {
    ShadowKind kind = ShadowKind::Hard;
    /// Occluder outline for hard and soft shadows.
    std::vector<std::array<double, 2>> polygon;
    /// Self shadows: elliptical object and the direction light comes from.
    std::array<double, 2> center{0.5, 0.5};
    std::array<double, 2> radii{0.25, 0.25};
    double light_angle = 0.0;
    /// Fraction of light that survives inside the umbra, strictly inside (0, 1).
    double attenuation = 0.5;
    /// Gaussian penumbra sigma in pixels; 0 for hard shadows.
    double penumbra_width = 0.0;
    uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ShadowSpec& spec);
void from_json(const nlohmann::json& j, ShadowSpec& spec);

/// Images are [3, H, W] in [0, 1] pixel space; the mask is [1, H, W].
struct ShadowPair {
    std::string name;
    torch::Tensor shadow;
    torch::Tensor clean;
    std::optional<torch::Tensor> mask;
    Provenance provenance = Provenance::Synthetic;
};

/// Multiplicative light field in [attenuation, 1], [1, H, W].
torch::Tensor shadow_field(const ShadowSpec& spec, int64_t height, int64_t width);

/// Applies a synthetic shadow to a clean image. The mask marks pixels darker
/// than the midpoint of [attenuation, 1] by at least half an 8-bit level.
ShadowPair synth_shadow(const torch::Tensor& clean, const ShadowSpec& spec);

/// Procedural scene: color gradient, stripes and a few flat shapes.
torch::Tensor make_scene(int64_t size, uint64_t seed);

/// Random shadow geometry of the given kind for a square image of `size` pixels.
ShadowSpec random_shadow_spec(ShadowKind kind, int64_t size, uint64_t seed);

/// Paints the occluding object of a self-shadow spec into a scene.
torch::Tensor paint_self_object(const torch::Tensor& scene, const ShadowSpec& spec);

struct SyntheticSample {
    ShadowPair pair;
    ShadowSpec spec;
};

struct SyntheticCounts {
    int hard = 0;
    int soft = 0;
    int self = 0;
    int total() const { return hard + soft + self; }
};

/// Deterministic synthetic dataset; kinds are interleaved so any prefix is balanced.
std::vector<SyntheticSample> make_synthetic_dataset(const SyntheticCounts& counts,
                                                    int64_t size, uint64_t seed);

/// Writes `shadow/`, `clean/` and `mask/` PNGs named `<pair.name>.png`.
void save_pairs(const std::filesystem::path& dir, const std::vector<ShadowPair>& pairs);

struct LoadedDataset {
    std::vector<ShadowPair> pairs;
    std::vector<std::string> warnings;
};

/// Loads `shadow/` + `clean/` (+ optional `mask/`) with matching filenames,
/// sorted by name. Unmatched or mis-shaped files are skipped with a warning.
LoadedDataset load_paired_dataset(const std::filesystem::path& dir);

/// Stacks pairs into [N, 3, H, W] model-space tensors (shadow, clean).
std::pair<torch::Tensor, torch::Tensor> stack_pairs(const std::vector<ShadowPair>& pairs);

} // namespace shadowdiff
