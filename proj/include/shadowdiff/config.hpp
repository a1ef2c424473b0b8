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

#include "shadowdiff/sampler.hpp"
#include "shadowdiff/trainer.hpp"
#include "shadowdiff/vit_sim.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace shadowdiff {

void to_json(nlohmann::json& j, const DenoiserOptions& o);
void from_json(const nlohmann::json& j, DenoiserOptions& o);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const SamplingConfig& c);
void from_json(const nlohmann::json& j, SamplingConfig& c);
void to_json(nlohmann::json& j, const ExtractorConfig& c);
void from_json(const nlohmann::json& j, ExtractorConfig& c);

/// Reads a JSON config file; an empty path yields an empty object.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Applies `dotted.key=value` overrides in order. Values parse as JSON when
/// possible (numbers, booleans, arrays) and fall back to plain strings.
void apply_overrides(nlohmann::json& config, const std::vector<std::string>& overrides);

/// Deep merge: keys in `patch` win over keys in `base`.
nlohmann::json merge(nlohmann::json base, const nlohmann::json& patch);

} // namespace shadowdiff
