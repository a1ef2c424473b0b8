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

#include "shadowdiff/sampler.hpp"

#include "shadowdiff/attention.hpp"
#include "shadowdiff/errors.hpp"
#include "shadowdiff/rng.hpp"

#include <algorithm>
#include <cmath>

namespace shadowdiff {

bool stop_check(std::span<const double> loss_history, const SamplingConfig& config)
{
    if (!config.early_stop || config.lambda_sim <= 0.0) {
        return false;
    }
    const std::size_t n = loss_history.size();
    const auto patience = static_cast<std::size_t>(std::max(config.stop_patience, 1));
    if (n < kMinStepsBeforeStop || n < patience + 1) {
        return false;
    }
    for (std::size_t k = n - patience; k < n; ++k) {
        const double prev = loss_history[k - 1];
        const double cur = loss_history[k];
        if (!(cur > prev + config.stop_rel_tol * std::abs(prev))) {
            return false;
        }
    }
    return true;
}

NoisePredictor make_predictor(Denoiser model)
{
    return [model](const torch::Tensor& x_t, const torch::Tensor& x_cond,
                   const torch::Tensor& attention, int t) mutable {
        auto ts = torch::full({x_t.size(0)}, t, torch::kLong);
        return model->forward(x_t, x_cond, attention, ts);
    };
}

SampleTrajectory sample(const torch::Tensor& x_cond, const torch::Tensor& initial_attention,
                        const NoisePredictor& predictor, const NoiseSchedule& schedule,
                        FeatureExtractor& extractor, const SamplingConfig& config)
{
    if (x_cond.dim() != 3 || x_cond.size(0) != 3) {
        throw UsageError("sample expects a [3, H, W] condition image");
    }
    if (initial_attention.dim() != 3 || initial_attention.size(0) != 1 ||
        initial_attention.size(1) != x_cond.size(1) ||
        initial_attention.size(2) != x_cond.size(2)) {
        throw UsageError("initial attention must be [1, H, W] matching the image");
    }
    if (config.lambda_sim < 0.0) {
        throw UsageError("lambda_sim must be non-negative");
    }
    torch::NoGradGuard no_grad;

    const auto timesteps = inference_timesteps(schedule.steps(), config.infer_steps);
    auto gen = make_generator(config.seed);
    auto x = torch::randn(x_cond.sizes(), gen, x_cond.options());
    auto attention = initial_attention.to(x_cond.scalar_type());
    const auto cond = x_cond.unsqueeze(0);
    StructureLoss structure(x_cond, extractor, config.vit_layer);

    SampleTrajectory traj;
    std::vector<double> history;
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        StepRecord rec;
        rec.t = timesteps[i];
        rec.t_prev = previous_timestep(timesteps, i);
        rec.x_t = x;
        rec.attention = attention;

        auto out = predictor(x.unsqueeze(0), cond, attention.unsqueeze(0), rec.t);
        rec.eps_hat = out.eps_hat.squeeze(0);
        rec.attention_refined = out.attention.squeeze(0);
        if (!torch::isfinite(rec.eps_hat).all().item<bool>()) {
            throw NumericError("non-finite noise estimate at t=" + std::to_string(rec.t));
        }
        rec.x0_hat = predict_x0(x, rec.eps_hat, rec.t, schedule);
        rec.l_sim = structure(rec.x0_hat).item<double>();
        rec.l_total = config.lambda_sim * rec.l_sim;

        x = ddim_step(x, rec.eps_hat, rec.t, rec.t_prev, schedule);
        attention = rec.attention_refined;
        history.push_back(rec.l_total);
        traj.steps.push_back(std::move(rec));

        if (stop_check(history, config)) {
            traj.stopped_early = true;
            break;
        }
    }

    traj.steps_executed = static_cast<int>(traj.steps.size());
    if (traj.stopped_early) {
        const auto best = std::min_element(history.begin(), history.end()) - history.begin();
        traj.selected_step = static_cast<std::size_t>(best);
        traj.output = traj.steps[*traj.selected_step].x0_hat;
    } else {
        traj.output = x;
    }
    return traj;
}

SampleTrajectory sample(const torch::Tensor& x_cond, Denoiser model,
                        const NoiseSchedule& schedule, FeatureExtractor& extractor,
                        const SamplingConfig& config)
{
    model->eval();
    std::optional<Denoiser> classifier;
    if (config.cam_init) {
        classifier = model;
    }
    auto a0 = init_attention(x_cond, classifier);
    return sample(x_cond, a0, make_predictor(model), schedule, extractor, config);
}

} // namespace shadowdiff
