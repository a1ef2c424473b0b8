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

#include "shadowdiff/config.hpp"

#include "shadowdiff/errors.hpp"

#include <fstream>

namespace shadowdiff {

using nlohmann::json;

void to_json(json& j, const DenoiserOptions& o)
{
    j = json{{"base_width", o.base_width},
             {"channel_mult", o.channel_mult},
             {"time_embed_dim", o.time_embed_dim},
             {"groups", o.groups},
             {"residual_scale", o.residual_scale}};
}

void from_json(const json& j, DenoiserOptions& o)
{
    o.base_width = j.value("base_width", o.base_width);
    o.channel_mult = j.value("channel_mult", o.channel_mult);
    o.time_embed_dim = j.value("time_embed_dim", o.time_embed_dim);
    o.groups = j.value("groups", o.groups);
    o.residual_scale = j.value("residual_scale", o.residual_scale);
}

void to_json(json& j, const TrainConfig& c)
{
    j = json{{"train_steps", c.train_steps},
             {"beta_start", c.beta_start},
             {"beta_end", c.beta_end},
             {"alpha_w", c.alpha_w},
             {"beta_w", c.beta_w},
             {"learning_rate", c.learning_rate},
             {"batch_size", c.batch_size},
             {"iterations", c.iterations},
             {"seed", c.seed},
             {"checkpoint_every", c.checkpoint_every},
             {"residual_gain", c.residual_gain},
             {"augment", c.augment},
             {"weighted_cdm", c.weighted_cdm},
             {"model", c.model}};
}

void from_json(const json& j, TrainConfig& c)
{
    c.train_steps = j.value("train_steps", c.train_steps);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    c.alpha_w = j.value("alpha_w", c.alpha_w);
    c.beta_w = j.value("beta_w", c.beta_w);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.residual_gain = j.value("residual_gain", c.residual_gain);
    c.augment = j.value("augment", c.augment);
    c.weighted_cdm = j.value("weighted_cdm", c.weighted_cdm);
    if (j.contains("model")) {
        c.model = j.at("model").get<DenoiserOptions>();
    }
}

void to_json(json& j, const SamplingConfig& c)
{
    j = json{{"infer_steps", c.infer_steps},
             {"lambda_sim", c.lambda_sim},
             {"stop_patience", c.stop_patience},
             {"stop_rel_tol", c.stop_rel_tol},
             {"early_stop", c.early_stop},
             {"seed", c.seed},
             {"vit_layer", c.vit_layer},
             {"cam_init", c.cam_init}};
}

void from_json(const json& j, SamplingConfig& c)
{
    c.infer_steps = j.value("infer_steps", c.infer_steps);
    c.lambda_sim = j.value("lambda_sim", c.lambda_sim);
    c.stop_patience = j.value("stop_patience", c.stop_patience);
    c.stop_rel_tol = j.value("stop_rel_tol", c.stop_rel_tol);
    c.early_stop = j.value("early_stop", c.early_stop);
    c.seed = j.value("seed", c.seed);
    c.vit_layer = j.value("vit_layer", c.vit_layer);
    c.cam_init = j.value("cam_init", c.cam_init);
}

void to_json(json& j, const ExtractorConfig& c)
{
    j = json{{"weights", c.weights},
             {"patch_size", c.patch_size},
             {"input_size", c.input_size},
             {"layer", c.layer}};
}

void from_json(const json& j, ExtractorConfig& c)
{
    c.weights = j.value("weights", c.weights);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.input_size = j.value("input_size", c.input_size);
    c.layer = j.value("layer", c.layer);
}

json read_config_file(const std::filesystem::path& path)
{
    if (path.empty()) {
        return json::object();
    }
    std::ifstream in(path);
    if (!in) {
        throw UsageError("cannot open config file " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw UsageError("config " + path.string() + ": " + e.what());
    }
}

void apply_overrides(json& config, const std::vector<std::string>& overrides)
{
    for (const auto& item : overrides) {
        const auto eq = item.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw UsageError("override '" + item + "' is not key=value");
        }
        const std::string key = item.substr(0, eq);
        const std::string raw = item.substr(eq + 1);
        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) {
            value = raw;
        }
        json* node = &config;
        std::size_t start = 0;
        while (true) {
            const auto dot = key.find('.', start);
            const std::string part = key.substr(start, dot - start);
            if (part.empty()) {
                throw UsageError("override key '" + key + "' has an empty segment");
            }
            if (!node->is_object()) {
                *node = json::object();
            }
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            start = dot + 1;
        }
    }
}

json merge(json base, const json& patch)
{
    if (!base.is_object() || !patch.is_object()) {
        return patch;
    }
    for (const auto& [key, value] : patch.items()) {
        base[key] = base.contains(key) ? merge(base[key], value) : value;
    }
    return base;
}

} // namespace shadowdiff
