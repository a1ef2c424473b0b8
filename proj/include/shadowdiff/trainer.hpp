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

#include "shadowdiff/data.hpp"
#include "shadowdiff/denoiser.hpp"
#include "shadowdiff/schedule.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace shadowdiff {

struct TrainConfig {
    int train_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    double alpha_w = 0.5; // weight on the classifier loss
    double beta_w = 0.5;  // weight on the attention loss
    double learning_rate = 6e-4;
    int batch_size = 8;
    int iterations = 2000;
    uint64_t seed = 0;
    int checkpoint_every = 500;
    double residual_gain = 5.0;
    bool augment = true; // random flips and transposes
    bool weighted_cdm = true;
    DenoiserOptions model;

    NoiseSchedule schedule() const { return NoiseSchedule::linear(train_steps, beta_start, beta_end); }
    void validate() const;
};

struct LossReport {
    int iteration = 0;
    double l_cdm = 0.0;
    double l_cam = 0.0;
    double l_att = 0.0;
    double total = 0.0;
};

/// Differentiable loss terms of one batch.
struct LossTerms {
    torch::Tensor l_cdm;
    torch::Tensor l_cam;
    torch::Tensor l_att;
    torch::Tensor total;
};

/// total = l_cdm + alpha_w * l_cam + beta_w * l_att from network outputs.
/// An optional per-sample cdm_weight [N] scales the squared noise error.
LossTerms combine_losses(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                         const torch::Tensor& attention_refined, const torch::Tensor& residual,
                         const torch::Tensor& prob_shadow, const torch::Tensor& prob_clean,
                         double alpha_w, double beta_w, const torch::Tensor& cdm_weight = {});

/// Per-sample weight 1 + (1 - ab) / (ab d^2) on the noise error, with d the
/// denoiser's residual scale. Under the denoiser's parameterization this gives
/// the output head unit weight at every timestep; without it the head is
/// trained almost only at small t.
torch::Tensor cdm_weight(const std::vector<int>& timesteps, const NoiseSchedule& schedule,
                         double residual_scale);

/// Per-image dihedral transform of [N, C, H, W]: bit 0 of the code flips
/// columns, bit 1 flips rows, bit 2 transposes (square images only).
torch::Tensor apply_symmetry(const torch::Tensor& images, const torch::Tensor& symmetry);

/// Random draws for one batch; fixed per (seed, iteration).
struct BatchDraw {
    std::vector<int64_t> indices;
    std::vector<int> timesteps;
    torch::Tensor eps;
    torch::Tensor symmetry; // long [N], codes for apply_symmetry
};

/// Attention fed to the network during training: interpolates between the
/// CAM of the shadow image and the residual target, with weight t / T on the
/// CAM, so the network learns to refine classifier attention toward the target
/// as t decreases. Computed without gradient.
torch::Tensor teacher_attention(Denoiser& model, const torch::Tensor& shadow, const torch::Tensor& clean,
                                const std::vector<int>& timesteps, const NoiseSchedule& schedule,
                                const TrainConfig& config);

/// Full training objective on a batch in model space ([N, 3, H, W] each),
/// with a given input attention that is treated as a constant.
LossTerms training_losses(Denoiser& model, const torch::Tensor& shadow, const torch::Tensor& clean,
                          const std::vector<int>& timesteps, const torch::Tensor& eps,
                          const torch::Tensor& attention, const NoiseSchedule& schedule,
                          const TrainConfig& config);

/// Loss terms with the teacher attention.
LossTerms training_losses(Denoiser& model, const torch::Tensor& shadow, const torch::Tensor& clean,
                          const std::vector<int>& timesteps, const torch::Tensor& eps,
                          const NoiseSchedule& schedule, const TrainConfig& config);


class Trainer {
public:
    explicit Trainer(TrainConfig config);

    /// One optimizer update on a batch drawn from the given model-space pool.
    LossReport step(const torch::Tensor& shadow_pool, const torch::Tensor& clean_pool);

    BatchDraw draw_batch(int64_t pool_size, int64_t height, int64_t width) const;

    int iteration() const { return iteration_; }
    const TrainConfig& config() const { return config_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    Denoiser& model() { return model_; }

    void save(const std::filesystem::path& path);
    static Trainer resume(const std::filesystem::path& path);

private:
    TrainConfig config_;
    NoiseSchedule schedule_;
    Denoiser model_;
    std::unique_ptr<torch::optim::Adam> optimizer_;
    int iteration_ = 0;
};

inline constexpr const char* kCheckpointFormat = "shadowdiff-checkpoint/2";

struct Checkpoint {
    TrainConfig config;
    int iteration = 0;
    Denoiser model{nullptr};
};

/// Loads network weights and settings; throws DataError on foreign or corrupt files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainRunOptions {
    std::filesystem::path run_dir;
    /// Continue from `run_dir/checkpoint.pt` if it exists.
    bool resume = false;
    std::function<void(const LossReport&)> on_step;
};

/// Trains on `pairs` until `config.iterations`, checkpointing periodically.
/// Writes `checkpoint.pt` and `loss_log.csv` under the run directory and
/// returns the checkpoint path.
std::filesystem::path train(const std::vector<ShadowPair>& pairs, const TrainConfig& config,
                            const TrainRunOptions& options);

/// Rows of a loss log written by `train`.
std::vector<LossReport> read_loss_log(const std::filesystem::path& path);

} // namespace shadowdiff
