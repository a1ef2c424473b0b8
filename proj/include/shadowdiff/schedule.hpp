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

#include <torch/torch.h>

#include <span>
#include <vector>

namespace shadowdiff {

/// Variance schedule of the forward diffusion process.
///
/// Timesteps are 1-based: beta(1) is the first forward step and beta(steps())
/// the last. alpha_bar(0) is defined as exactly 1 so that a reverse step to
/// t_prev = 0 lands on the clean-image estimate.
class NoiseSchedule {
public:
    /// Linearly spaced betas from beta_start to beta_end inclusive.
    static NoiseSchedule linear(int steps, double beta_start, double beta_end);

    int steps() const { return static_cast<int>(betas_.size()); }
    double beta_start() const { return betas_.front(); }
    double beta_end() const { return betas_.back(); }

    double beta(int t) const;
    double alpha(int t) const;
    double alpha_bar(int t) const;

    std::span<const double> betas() const { return betas_; }
    std::span<const double> alphas() const { return alphas_; }
    std::span<const double> alpha_bars() const { return alpha_bars_; }

private:
    NoiseSchedule() = default;
    void check_timestep(int t) const;

    std::vector<double> betas_;
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
torch::Tensor q_sample(const torch::Tensor& x0, int t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);

/// Batched forward noising; timesteps[i] applies to x0[i].
torch::Tensor q_sample(const torch::Tensor& x0, std::span<const int> timesteps,
                       const torch::Tensor& eps, const NoiseSchedule& schedule);

/// Clean-image estimate (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t). Not clamped.
torch::Tensor predict_x0(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t,
                         const NoiseSchedule& schedule);

/// Deterministic (eta = 0) DDIM update from t to t_prev.
torch::Tensor ddim_step(const torch::Tensor& x_t, const torch::Tensor& eps_hat, int t, int t_prev,
                        const NoiseSchedule& schedule);

/// Evenly strided, strictly decreasing timesteps starting at train_steps.
/// The reverse step after the last entry targets t_prev = 0.
std::vector<int> inference_timesteps(int train_steps, int infer_steps);

/// Target of the reverse step taken at position i of `timesteps`.
inline int previous_timestep(std::span<const int> timesteps, std::size_t i)
{
    return i + 1 < timesteps.size() ? timesteps[i + 1] : 0;
}

} // namespace shadowdiff
