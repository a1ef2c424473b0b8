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

#include "shadowdiff/vit_sim.hpp"

#include "shadowdiff/errors.hpp"
#include "shadowdiff/rng.hpp"

#include <torch/serialize.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace shadowdiff {

namespace F = torch::nn::functional;
namespace nn = torch::nn;

torch::Tensor preprocess_for_extractor(const torch::Tensor& image, int64_t input_size,
                                       int64_t patch_size)
{
    auto x = image.dim() == 3 ? image.unsqueeze(0) : image;
    if (x.dim() != 4 || x.size(0) != 1 || x.size(1) != 3) {
        throw UsageError("extractor input must be a single [3, H, W] image");
    }
    x = (x + 1.0) * 0.5;
    auto opts = torch::TensorOptions().dtype(x.scalar_type());
    auto mean = torch::tensor({0.485, 0.456, 0.406}, opts).view({1, 3, 1, 1});
    auto std = torch::tensor({0.229, 0.224, 0.225}, opts).view({1, 3, 1, 1});
    x = (x - mean) / std;

    if (input_size > 0) {
        if (input_size % patch_size != 0) {
            throw UsageError("extractor input size must be a multiple of the patch size");
        }
        if (x.size(2) != input_size || x.size(3) != input_size) {
            x = F::interpolate(x, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{input_size, input_size})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
        }
        return x;
    }
    const int64_t h = x.size(2) / patch_size * patch_size;
    const int64_t w = x.size(3) / patch_size * patch_size;
    if (h == 0 || w == 0) {
        throw UsageError("image smaller than one " + std::to_string(patch_size) + "px patch");
    }
    using torch::indexing::Slice;
    return x.index({Slice(), Slice(), Slice(0, h), Slice(0, w)});
}

KeyTensor extract_keys(const torch::Tensor& image, int layer, FeatureExtractor& extractor)
{
    if (layer < 0 || layer >= extractor.depth()) {
        throw UsageError("layer " + std::to_string(layer) + " outside extractor depth " +
                         std::to_string(extractor.depth()));
    }
    auto input = preprocess_for_extractor(image, extractor.input_size(), extractor.patch_size());
    return {extractor.layer_keys(input, layer), layer};
}

// ---------------------------------------------------------------------------
// Stub extractor

StubExtractor::StubExtractor(StubExtractorOptions options) : options_(options)
{
    if (options_.patch_size < 1 || options_.depth < 1 || options_.key_dim < 1) {
        throw UsageError("invalid stub extractor options");
    }
    auto gen = make_generator(mix_seed(options_.seed, 0x5eed));
    auto opts = torch::TensorOptions().dtype(torch::kDouble);
    const int64_t in_dim = 3 * options_.patch_size * options_.patch_size;
    const int64_t d = options_.key_dim;
    embed_ = torch::randn({in_dim, d}, gen, opts) / std::sqrt(static_cast<double>(in_dim));
    for (int l = 0; l < options_.depth; ++l) {
        mixing_.push_back(torch::randn({d, d}, gen, opts) / std::sqrt(static_cast<double>(d)));
        key_proj_.push_back(torch::randn({d, d}, gen, opts) / std::sqrt(static_cast<double>(d)));
    }
}

torch::Tensor StubExtractor::layer_keys(const torch::Tensor& preprocessed, int layer)
{
    if (layer < 0 || layer >= options_.depth) {
        throw UsageError("stub extractor layer out of range");
    }
    const auto dtype = preprocessed.scalar_type();
    const int64_t p = options_.patch_size;
    // [1, 3 p^2, n] -> [n, 3 p^2]
    auto patches = F::unfold(preprocessed, F::UnfoldFuncOptions({p, p}).stride({p, p}))
                       .squeeze(0)
                       .transpose(0, 1);
    auto h = patches.matmul(embed_.to(dtype));
    for (int l = 0; l < layer; ++l) {
        h = h + torch::tanh(h.matmul(mixing_[l].to(dtype)));
    }
    return h.matmul(key_proj_[layer].to(dtype));
}

// ---------------------------------------------------------------------------
// ViT backbone

VitBlockImpl::VitBlockImpl(int64_t dim, int64_t heads, int64_t mlp_ratio)
    : dim_(dim), heads_(heads)
{
    if (dim % heads != 0) {
        throw UsageError("embedding width must be divisible by the head count");
    }
    auto ln = [dim] { return nn::LayerNorm(nn::LayerNormOptions({dim}).eps(1e-6)); };
    norm1_ = register_module("norm1", ln());
    auto attn = register_module("attn", std::make_shared<nn::Module>());
    qkv_ = attn->register_module("qkv", nn::Linear(dim, 3 * dim));
    proj_ = attn->register_module("proj", nn::Linear(dim, dim));
    norm2_ = register_module("norm2", ln());
    auto mlp = register_module("mlp", std::make_shared<nn::Module>());
    fc1_ = mlp->register_module("fc1", nn::Linear(dim, mlp_ratio * dim));
    fc2_ = mlp->register_module("fc2", nn::Linear(mlp_ratio * dim, dim));
}

torch::Tensor VitBlockImpl::forward(const torch::Tensor& x)
{
    const int64_t b = x.size(0);
    const int64_t n = x.size(1);
    const int64_t hd = dim_ / heads_;
    auto qkv = qkv_(norm1_(x)).reshape({b, n, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
    auto q = qkv[0];
    auto k = qkv[1];
    auto v = qkv[2];
    auto attn = torch::softmax(q.matmul(k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
    auto out = attn.matmul(v).transpose(1, 2).reshape({b, n, dim_});
    auto h = x + proj_(out);
    return h + fc2_(F::gelu(fc1_(norm2_(h))));
}

torch::Tensor VitBlockImpl::keys(const torch::Tensor& x)
{
    using torch::indexing::Slice;
    // The key slice of qkv is already laid out head-major, i.e. heads concatenated.
    return qkv_(norm1_(x)).index({Slice(), Slice(), Slice(dim_, 2 * dim_)});
}

VitImpl::VitImpl(VitOptions options) : options_(options)
{
    const int64_t d = options_.embed_dim;
    const int64_t grid = options_.input_size / options_.patch_size;
    cls_token_ = register_parameter("cls_token", torch::zeros({1, 1, d}));
    pos_embed_ = register_parameter("pos_embed", torch::zeros({1, grid * grid + 1, d}));
    auto patch_embed = register_module("patch_embed", std::make_shared<nn::Module>());
    patch_proj_ = patch_embed->register_module(
        "proj",
        nn::Conv2d(nn::Conv2dOptions(3, d, options_.patch_size).stride(options_.patch_size)));
    for (int i = 0; i < options_.depth; ++i) {
        blocks_->push_back(VitBlock(d, options_.heads, options_.mlp_ratio));
    }
    register_module("blocks", blocks_);
    // Final norm is unused for keys but part of the state dict.
    register_module("norm", nn::LayerNorm(nn::LayerNormOptions({d}).eps(1e-6)));
    // Random but reproducible until real weights are loaded.
    auto gen = make_generator(0xd1a0);
    torch::NoGradGuard no_grad;
    for (auto& item : named_parameters()) {
        auto& p = item.value();
        if (p.dim() >= 2) {
            p.copy_(torch::randn(p.sizes(), gen) * 0.02);
        } else if (item.key().ends_with("bias")) {
            p.zero_();
        }
    }
}

torch::Tensor VitImpl::position_embedding(int64_t grid_h, int64_t grid_w)
{
    using torch::indexing::Slice;
    const int64_t stored = pos_embed_.size(1) - 1;
    const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(stored))));
    if (side * side != stored) {
        throw DataError("position embedding does not describe a square patch grid");
    }
    if (grid_h == side && grid_w == side) {
        return pos_embed_;
    }
    auto cls = pos_embed_.index({Slice(), Slice(0, 1)});
    auto patch = pos_embed_.index({Slice(), Slice(1)})
                     .reshape({1, side, side, -1})
                     .permute({0, 3, 1, 2});
    patch = F::interpolate(patch, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{grid_h, grid_w})
                                      .mode(torch::kBicubic)
                                      .align_corners(false));
    patch = patch.permute({0, 2, 3, 1}).reshape({1, grid_h * grid_w, -1});
    return torch::cat({cls, patch}, 1);
}

torch::Tensor VitImpl::layer_keys(const torch::Tensor& preprocessed, int layer)
{
    if (layer < 0 || layer >= options_.depth) {
        throw UsageError("ViT layer out of range");
    }
    const auto dtype = preprocessed.scalar_type();
    if (patch_proj_->weight.scalar_type() != dtype) {
        to(dtype);
    }
    auto x = patch_proj_(preprocessed);
    const int64_t gh = x.size(2);
    const int64_t gw = x.size(3);
    x = x.flatten(2).transpose(1, 2);
    x = torch::cat({cls_token_.expand({x.size(0), 1, -1}), x}, 1) + position_embedding(gh, gw);
    for (int i = 0; i < layer; ++i) {
        x = blocks_[i]->as<VitBlock>()->forward(x);
    }
    using torch::indexing::Slice;
    auto keys = blocks_[layer]->as<VitBlock>()->keys(x);
    return keys.index({0, Slice(1)});
}

int VitImpl::load_state_dict_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open ViT weights: " + path);
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    c10::IValue value;
    try {
        value = torch::pickle_load(bytes);
    } catch (const c10::Error& e) {
        throw DataError("unreadable ViT weights " + path + ": " + e.what_without_backtrace());
    }
    if (!value.isGenericDict()) {
        throw DataError("ViT weights must be a state dict: " + path);
    }
    auto dict = value.toGenericDict();

    torch::NoGradGuard no_grad;
    int loaded = 0;
    for (auto& item : named_parameters(true)) {
        const std::string& name = item.key();
        auto it = dict.find(name);
        if (it == dict.end()) {
            throw DataError("ViT weights missing '" + name + "'");
        }
        auto src = it->value().toTensor();
        if (name == "pos_embed" && src.sizes() != item.value().sizes()) {
            // Checkpoint trained at another resolution; keep its grid and interpolate at use.
            pos_embed_.set_data(src.to(item.value().scalar_type()).clone());
        } else if (src.sizes() != item.value().sizes()) {
            throw DataError("ViT weight '" + name + "' has an unexpected shape");
        } else {
            item.value().copy_(src);
        }
        ++loaded;
    }
    return loaded;
}

VitExtractor::VitExtractor(VitOptions options) : model_(options)
{
    model_->eval();
}

VitExtractor::VitExtractor(VitOptions options, const std::string& weights_path)
    : VitExtractor(options)
{
    model_->load_state_dict_file(weights_path);
}

torch::Tensor VitExtractor::layer_keys(const torch::Tensor& preprocessed, int layer)
{
    return model_->layer_keys(preprocessed, layer);
}

// ---------------------------------------------------------------------------
// Descriptor and losses

torch::Tensor self_similarity(const torch::Tensor& keys)
{
    if (keys.dim() != 2) {
        throw UsageError("self_similarity expects an [n, d] key matrix");
    }
    auto norms = keys.norm(2, 1, true);
    if ((norms <= 0).any().item<bool>()) {
        throw NumericError("self_similarity: zero-norm key row");
    }
    auto unit = keys / norms.clamp_min(1e-12);
    auto s = (1.0 - unit.matmul(unit.transpose(0, 1))).clamp(0.0, 2.0);
    auto eye = torch::eye(keys.size(0), torch::TensorOptions().dtype(torch::kBool));
    return s.masked_fill(eye, 0.0);
}

torch::Tensor descriptor_distance(const torch::Tensor& a, const torch::Tensor& b)
{
    if (a.sizes() != b.sizes()) {
        throw UsageError("descriptor sizes differ; preprocess both images identically");
    }
    return (a - b).pow(2).sum().sqrt();
}

torch::Tensor loss_sim(const torch::Tensor& x_cond, const torch::Tensor& x0_hat,
                       FeatureExtractor& extractor, int layer)
{
    auto s_cond = self_similarity(extract_keys(x_cond, layer, extractor).keys);
    auto s_hat = self_similarity(extract_keys(x0_hat, layer, extractor).keys);
    return descriptor_distance(s_cond, s_hat);
}

StructureLoss::StructureLoss(const torch::Tensor& reference, FeatureExtractor& extractor, int layer)
    : extractor_(&extractor), layer_(layer)
{
    torch::NoGradGuard no_grad;
    reference_ = self_similarity(extract_keys(reference, layer, extractor).keys);
}

torch::Tensor StructureLoss::operator()(const torch::Tensor& image) const
{
    auto s = self_similarity(extract_keys(image, layer_, *extractor_).keys);
    return descriptor_distance(reference_.to(s.scalar_type()), s);
}

torch::Tensor principal_projections(const torch::Tensor& descriptor, int64_t components)
{
    if (descriptor.dim() != 2) {
        throw UsageError("descriptor must be a matrix");
    }
    auto x = descriptor.to(torch::kDouble);
    const int64_t n = x.size(0);
    auto centered = x - x.mean(0, true);
    auto cov = centered.transpose(0, 1).matmul(centered) / static_cast<double>(std::max<int64_t>(n, 1));
    auto [eigenvalues, eigenvectors] = torch::linalg_eigh(cov);

    const int64_t dims = eigenvalues.size(0);
    const double largest = dims > 0 ? eigenvalues[dims - 1].item<double>() : 0.0;
    const double floor = std::max(1e-12, 1e-9 * largest);
    auto scores = torch::zeros({n, components}, torch::TensorOptions().dtype(torch::kDouble));
    for (int64_t c = 0; c < components && c < dims; ++c) {
        const int64_t idx = dims - 1 - c;
        if (eigenvalues[idx].item<double>() <= floor) {
            break;
        }
        scores.select(1, c).copy_(centered.matmul(eigenvectors.select(1, idx)));
    }
    return scores;
}

torch::Tensor keys_pca_rgb(const torch::Tensor& descriptor, int64_t grid_h, int64_t grid_w)
{
    if (descriptor.dim() != 2 || descriptor.size(0) != grid_h * grid_w) {
        throw UsageError("descriptor rows must match the patch grid");
    }
    auto scores = principal_projections(descriptor, 3);
    auto lo = std::get<0>(scores.min(0, true));
    auto hi = std::get<0>(scores.max(0, true));
    auto range = hi - lo;
    auto normalized = torch::where(range > 0, (scores - lo) / range.clamp_min(1e-300),
                                   torch::zeros_like(scores));
    return normalized.transpose(0, 1).reshape({3, grid_h, grid_w});
}

std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorConfig& config)
{
    if (config.weights.empty() || config.weights == "stub") {
        StubExtractorOptions opts;
        opts.patch_size = config.patch_size;
        opts.input_size = config.input_size;
        opts.depth = std::max(12, config.layer + 1);
        return std::make_unique<StubExtractor>(opts);
    }
    VitOptions opts;
    opts.patch_size = config.patch_size;
    opts.input_size = config.input_size;
    return std::make_unique<VitExtractor>(opts, config.weights);
}

} // namespace shadowdiff
