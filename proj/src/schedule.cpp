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

#include "shadowdiff/schedule.hpp"

#include "shadowdiff/errors.hpp"

#include <cmath>
#include <string>

namespace shadowdiff {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end)
{
    if (steps < 2) {
        throw UsageError("noise schedule needs at least 2 steps, got " + std::to_string(steps));
    }
    if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
        throw UsageError("noise schedule requires 0 < beta_start < beta_end < 1");
    }

    NoiseSchedule s;
    s.betas_.resize(steps);
    s.alphas_.resize(steps);
    s.alpha_bars_.resize(steps);
    const double span = beta_end - beta_start;
    double running = 1.0;
    for (int i = 0; i < steps; ++i) {
        // Pin both endpoints exactly instead of trusting the last increment.
        const double beta = i == steps - 1 ? beta_end
                                           : beta_start + span * static_cast<double>(i) / (steps - 1);
        s.betas_[i] = beta;
        s.alphas_[i] = 1.0 - beta;
        running *= s.alphas_[i];
        s.alpha_bars_[i] = running;
    }
    return s;
}

void NoiseSchedule::check_timestep(int t) const
{
    if (t < 1 || t > steps()) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " +
                                std::to_string(steps()) + "]");
    }
}

double NoiseSchedule::beta(int t) const
{
    check_timestep(t);
    return betas_[t - 1];
}

double NoiseSchedule::alpha(int t) const
{
    check_timestep(t);
    return alphas_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const
{
    if (t == 0) {
        return 1.0;
    }
    check_timestep(t);
    return alpha_bars_[t - 1];
}

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what)
{
    if (a.sizes() != b.sizes()) {
        throw UsageError(std::string(what) + ": shape mismatch");
    }
}

} // namespace

torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule)
{
    check_same_shape(x0, eps, "q_sample");
    const double abar = schedule.alpha_bar(t);
    if (t == 0) {
        throw std::out_of_range("q_sample: timestep 0 is not a forward step");
    }
    return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * eps;
}

torch::Tensor q_sample(const torch::Tensor& x0, std::span<const int> timesteps,
                       const torch::Tensor& eps, const NoiseSchedule& schedule)
{
    check_same_shape(x0, eps, "q_sample");
    if (x0.dim() < 1 || x0.size(0) != static_cast<int64_t>(timesteps.size())) {
        throw UsageError("q_sample: one timestep per batch element required");
    }
    std::vector<double> signal(timesteps.size());
    std::vector<double> noise(timesteps.size());
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        if (timesteps[i] < 1) {
            throw std::out_of_range("q_sample: timestep must be >= 1");
        }
        const double abar = schedule.alpha_bar(timesteps[i]);
        signal[i] = std::sqrt(abar);
        noise[i] = std::sqrt(1.0 - abar);
    }
    std::vector<int64_t> shape(x0.dim(), 1);
    shape[0] = x0.size(0);
    const auto opts = torch::TensorOptions().dtype(torch::kDouble);
    auto a = torch::tensor(signal, opts).to(x0.scalar_type()).view(shape);
    auto b = torch::tensor(noise, opts).to(x0.scalar_type()).view(shape);
    return a * x0 + b * eps;
}

torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t,
                         const NoiseSchedule& schedule)
{
    check_same_shape(x_t, eps_hat, "predict_x0");
    if (t == 0) {
        throw std::out_of_range("predict_x0: timestep must be >= 1");
    }
    const double abar = schedule.alpha_bar(t);
    return (x_t - std::sqrt(1.0 - abar) * eps_hat) / std::sqrt(abar);
}

torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& schedule)
{
    if (!(0 <= t_prev && t_prev < t && t <= schedule.steps())) {
        throw UsageError("ddim_step: need 0 <= t_prev < t <= T, got t=" + std::to_string(t) +
                         " t_prev=" + std::to_string(t_prev));
    }
    auto x0_hat = predict_x0(x_t, eps_hat, t, schedule);
    if (t_prev == 0) {
        return x0_hat;
    }
    const double abar_prev = schedule.alpha_bar(t_prev);
    return std::sqrt(abar_prev) * x0_hat + std::sqrt(1.0 - abar_prev) * eps_hat;
}

std::vector<int> inference_timesteps(int train_steps, int infer_steps)
{
    if (infer_steps < 1 || infer_steps > train_steps) {
        throw UsageError("inference steps must lie in [1, " + std::to_string(train_steps) +
                         "], got " + std::to_string(infer_steps));
    }
    const int stride = train_steps / infer_steps;
    std::vector<int> steps(infer_steps);
    for (int i = 0; i < infer_steps; ++i) {
        steps[i] = train_steps - i * stride;
    }
    return steps;
}

} // namespace shadowdiff
