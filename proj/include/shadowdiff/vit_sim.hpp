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

#include <cstdint>
#include <memory>
#include <string>

namespace shadowdiff {

inline constexpr int kDefaultVitLayer = 11;

/// Per-patch attention keys of one transformer layer, class token excluded.
struct KeyTensor {
    torch::Tensor keys; // [n, d]
    int layer = 0;
};

/// Source of per-layer patch keys for the structure-similarity descriptor.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;

    virtual int64_t patch_size() const = 0;
    virtual int depth() const = 0;
    /// Square side the input is resized to; 0 keeps the native size, cropped
    /// down to a multiple of the patch size.
    virtual int64_t input_size() const = 0;

    /// Keys for a preprocessed [1, 3, S, S'] batch. Must be differentiable
    /// with respect to the input and deterministic.
    virtual torch::Tensor layer_keys(const torch::Tensor& preprocessed, int layer) = 0;
};

/// Maps a [3, H, W] or [1, 3, H, W] image in [-1, 1] to the extractor's input:
/// [0, 1] range, ImageNet channel normalization, resized bilinearly.
torch::Tensor preprocess_for_extractor(const torch::Tensor& image, int64_t input_size,
                                       int64_t patch_size);

KeyTensor extract_keys(const torch::Tensor& image, int layer, FeatureExtractor& extractor);

struct StubExtractorOptions {
    int64_t patch_size = 16;
    int depth = 12;
    int64_t key_dim = 64;
    int64_t input_size = 224;
    uint64_t seed = 0;
};

/// Deterministic stand-in for a pretrained ViT: a fixed random projection of
/// flattened patches followed by residual tanh mixing per layer.
class StubExtractor final : public FeatureExtractor {
public:
    explicit StubExtractor(StubExtractorOptions options = {});

    int64_t patch_size() const override { return options_.patch_size; }
    int depth() const override { return options_.depth; }
    int64_t input_size() const override { return options_.input_size; }
    torch::Tensor layer_keys(const torch::Tensor& preprocessed, int layer) override;

private:
    StubExtractorOptions options_;
    torch::Tensor embed_;               // [3 p^2, d]
    std::vector<torch::Tensor> mixing_; // per layer [d, d]
    std::vector<torch::Tensor> key_proj_;
};

struct VitOptions {
    int64_t patch_size = 16;
    int64_t embed_dim = 384;
    int depth = 12;
    int64_t heads = 6;
    int64_t mlp_ratio = 4;
    int64_t input_size = 224;
};

class VitBlockImpl : public torch::nn::Module {
public:
    VitBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x);
    /// Concatenated per-head keys of the block's self-attention input.
    torch::Tensor keys(const torch::Tensor& x);

private:
    int64_t dim_;
    int64_t heads_;
    torch::nn::LayerNorm norm1_{nullptr};
    torch::nn::Linear qkv_{nullptr};
    torch::nn::Linear proj_{nullptr};
    torch::nn::LayerNorm norm2_{nullptr};
    torch::nn::Linear fc1_{nullptr};
    torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(VitBlock);

/// ViT-S/16 style backbone. Parameter names follow the DINO state dict
/// (`cls_token`, `pos_embed`, `patch_embed.proj.*`, `blocks.<i>.attn.qkv.*`, ...)
/// so pretrained weights load by name.
class VitImpl : public torch::nn::Module {
public:
    explicit VitImpl(VitOptions options = {});

    torch::Tensor layer_keys(const torch::Tensor& preprocessed, int layer);
    const VitOptions& options() const { return options_; }

    /// Loads a `torch.save`d state dict. Returns the number of tensors copied;
    /// throws DataError on missing or misshapen entries.
    int load_state_dict_file(const std::string& path);

private:
    torch::Tensor position_embedding(int64_t grid_h, int64_t grid_w);

    VitOptions options_;
    torch::Tensor cls_token_;
    torch::Tensor pos_embed_;
    torch::nn::Conv2d patch_proj_{nullptr};
    torch::nn::ModuleList blocks_;
};
TORCH_MODULE(Vit);

class VitExtractor final : public FeatureExtractor {
public:
    explicit VitExtractor(VitOptions options = {});
    /// Builds the backbone and loads pretrained weights from `weights_path`.
    VitExtractor(VitOptions options, const std::string& weights_path);

    int64_t patch_size() const override { return model_->options().patch_size; }
    int depth() const override { return model_->options().depth; }
    int64_t input_size() const override { return model_->options().input_size; }
    torch::Tensor layer_keys(const torch::Tensor& preprocessed, int layer) override;

    Vit& model() { return model_; }

private:
    Vit model_;
};

/// S_ij = 1 - cos(k_i, k_j) with an exactly zero diagonal and entries in [0, 2].
torch::Tensor self_similarity(const torch::Tensor& keys);

/// Frobenius distance between two descriptors.
torch::Tensor descriptor_distance(const torch::Tensor& a, const torch::Tensor& b);

/// Structure loss ||S(x_cond) - S(x0_hat)||_F at one extractor layer.
torch::Tensor loss_sim(const torch::Tensor& x_cond, const torch::Tensor& x0_hat,
                       FeatureExtractor& extractor, int layer = kDefaultVitLayer);

/// Loss against a fixed reference image with its descriptor computed once.
class StructureLoss {
public:
    StructureLoss(const torch::Tensor& reference, FeatureExtractor& extractor,
                  int layer = kDefaultVitLayer);
    torch::Tensor operator()(const torch::Tensor& image) const;
    const torch::Tensor& reference_descriptor() const { return reference_; }

private:
    FeatureExtractor* extractor_;
    int layer_;
    torch::Tensor reference_;
};

/// Scores of the descriptor rows on their top `components` principal axes,
/// [n, components], ordered by decreasing variance. Axes beyond the numerical
/// rank are zero.
torch::Tensor principal_projections(const torch::Tensor& descriptor, int64_t components = 3);

/// Top three principal components as an RGB image [3, grid_h, grid_w], each
/// channel min-max normalized to [0, 1].
torch::Tensor keys_pca_rgb(const torch::Tensor& descriptor, int64_t grid_h, int64_t grid_w);

struct ExtractorConfig {
    /// "stub" or a path to a DINO ViT-S state dict.
    std::string weights = "stub";
    int64_t patch_size = 16;
    int64_t input_size = 224;
    int layer = kDefaultVitLayer;
};

std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorConfig& config);

} // namespace shadowdiff
