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
#include "shadowdiff/schedule.hpp"
#include "shadowdiff/vit_sim.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace shadowdiff {

struct SamplingConfig {
    int infer_steps = 25;
    double lambda_sim = 2.0;
    int stop_patience = 1;
    double stop_rel_tol = 0.01;
    bool early_stop = true;
    uint64_t seed = 0;
    int vit_layer = kDefaultVitLayer;
    /// Seed a_T from the classifier CAM; otherwise start from a uniform 0.5 map.
    bool cam_init = true;
};

/// Earliest step (1-based count of recorded losses) at which stopping may fire.
inline constexpr std::size_t kMinStepsBeforeStop = 3;

/// True once the total loss has risen by more than `stop_rel_tol` (relative)
/// over the previous step for `stop_patience` consecutive steps. Never fires
/// with fewer than three recorded losses.
bool stop_check(std::span<const double> loss_history, const SamplingConfig& config);

struct StepRecord {
    int t = 0;
    int t_prev = 0;
    torch::Tensor x_t;       // [3, H, W]
    torch::Tensor eps_hat;   // [3, H, W]
    torch::Tensor x0_hat;    // [3, H, W], unclamped
    torch::Tensor attention; // [1, H, W], a_t fed to the network at this step
    torch::Tensor attention_refined; // [1, H, W], a_refined; becomes a_{t_prev}
    double l_sim = 0.0;
    double l_total = 0.0;
};

struct SampleTrajectory {
    std::vector<StepRecord> steps;
    torch::Tensor output; // [3, H, W] in [-1, 1] model space, unclamped
    int steps_executed = 0;
    bool stopped_early = false;
    /// Index into `steps` whose x0_hat was returned on an early stop.
    std::optional<std::size_t> selected_step;
};

/// Noise predictor signature used by the sampler. Batched [1, ...] tensors in,
/// (eps_hat, attention_refined) out.
using NoisePredictor = std::function<DenoiserOutput(const torch::Tensor& x_t,
                                                    const torch::Tensor& x_cond,
                                                    const torch::Tensor& attention, int t)>;

NoisePredictor make_predictor(Denoiser model);

/// Conditional DDIM reverse sampling from seeded noise, chaining the refined
/// attention into the next step and scoring every clean-image estimate with
/// the structure loss against the condition image.
///
/// `x_cond` is [3, H, W] in model space. `initial_attention` is [1, H, W].
SampleTrajectory sample(const torch::Tensor& x_cond, const torch::Tensor& initial_attention,
                        const NoisePredictor& predictor, const NoiseSchedule& schedule,
                        FeatureExtractor& extractor, const SamplingConfig& config);

/// Convenience overload: wraps the network and initializes attention from it.
SampleTrajectory sample(const torch::Tensor& x_cond, Denoiser model,
                        const NoiseSchedule& schedule, FeatureExtractor& extractor,
                        const SamplingConfig& config);

} // namespace shadowdiff
