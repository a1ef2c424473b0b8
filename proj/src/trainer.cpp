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

#include "shadowdiff/trainer.hpp"

#include "shadowdiff/attention.hpp"
#include "shadowdiff/config.hpp"
#include "shadowdiff/errors.hpp"
#include "shadowdiff/rng.hpp"

#include <torch/csrc/jit/serialization/pickle.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace shadowdiff {

namespace fs = std::filesystem;

void TrainConfig::validate() const
{
    if (alpha_w < 0.0 || beta_w < 0.0) {
        throw UsageError("loss weights must be non-negative");
    }
    if (!(learning_rate > 0.0)) {
        throw UsageError("learning rate must be positive");
    }
    if (batch_size < 1 || iterations < 0) {
        throw UsageError("batch size must be positive and iterations non-negative");
    }
    (void)schedule();
}

LossTerms combine_losses(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                         const torch::Tensor& attention_refined, const torch::Tensor& residual,
                         const torch::Tensor& prob_shadow, const torch::Tensor& prob_clean,
                         double alpha_w, double beta_w, const torch::Tensor& cdm_weight)
{
    LossTerms terms;
    auto sq = (eps - eps_hat).pow(2);
    if (cdm_weight.defined()) {
        sq = sq * cdm_weight.to(sq.scalar_type()).view({-1, 1, 1, 1});
    }
    terms.l_cdm = sq.mean();
    terms.l_cam = loss_cam(prob_shadow, prob_clean);
    terms.l_att = loss_att(attention_refined, residual);
    terms.total = terms.l_cdm + alpha_w * terms.l_cam + beta_w * terms.l_att;
    return terms;
}

torch::Tensor cdm_weight(const std::vector<int>& timesteps, const NoiseSchedule& schedule,
                         double residual_scale)
{
    std::vector<double> w(timesteps.size());
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        const double ab = schedule.alpha_bar(timesteps[i]);
        w[i] = 1.0 + (1.0 - ab) / (ab * residual_scale * residual_scale);
    }
    return torch::tensor(w, torch::TensorOptions().dtype(torch::kDouble));
}

torch::Tensor teacher_attention(Denoiser& model, const torch::Tensor& shadow, const torch::Tensor& clean,
                                const std::vector<int>& timesteps, const NoiseSchedule& schedule,
                                const TrainConfig& config)
{
    torch::NoGradGuard no_grad;
    const int64_t n = shadow.size(0);
    auto residual = residual_target(clean, shadow, config.residual_gain);
    auto cls = model->classify(shadow);
    auto cam = compute_cam(cls.feature_map, cls.class_weights, shadow.size(2), shadow.size(3));
    std::vector<double> frac(timesteps.size());
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        frac[i] = static_cast<double>(timesteps[i]) / schedule.steps();
    }
    auto s = torch::tensor(frac, torch::TensorOptions().dtype(torch::kDouble))
                 .to(shadow.scalar_type())
                 .view({n, 1, 1, 1});
    return s * cam + (1.0 - s) * residual;
}

LossTerms training_losses(Denoiser& model, const torch::Tensor& shadow, const torch::Tensor& clean,
                          const std::vector<int>& timesteps, const torch::Tensor& eps,
                          const torch::Tensor& attention, const NoiseSchedule& schedule,
                          const TrainConfig& config)
{
    const int64_t n = shadow.size(0);
    auto x_t = q_sample(clean, timesteps, eps, schedule);
    auto residual = residual_target(clean, shadow, config.residual_gain);

    // Shadow images are class 1, clean images class 0.
    auto cls = model->classify(torch::cat({shadow, clean}, 0));
    auto prob_shadow = cls.probability.slice(0, 0, n);
    auto prob_clean = cls.probability.slice(0, n, 2 * n);

    auto ts = torch::tensor(std::vector<int64_t>(timesteps.begin(), timesteps.end()), torch::kLong);
    auto out = model->forward(x_t, shadow, attention.detach(), ts);
    torch::Tensor weight;
    if (config.weighted_cdm) {
        weight = cdm_weight(timesteps, schedule, config.model.residual_scale);
    }
    return combine_losses(eps, out.eps_hat, out.attention, residual, prob_shadow, prob_clean,
                          config.alpha_w, config.beta_w, weight);
}

LossTerms training_losses(Denoiser& model, const torch::Tensor& shadow, const torch::Tensor& clean,
                          const std::vector<int>& timesteps, const torch::Tensor& eps,
                          const NoiseSchedule& schedule, const TrainConfig& config)
{
    auto attention = teacher_attention(model, shadow, clean, timesteps, schedule, config);
    return training_losses(model, shadow, clean, timesteps, eps, attention, schedule, config);
}

Trainer::Trainer(TrainConfig config)
    : config_(std::move(config)), schedule_(config_.schedule())
{
    config_.validate();
    // Parameter init draws from the global generator.
    torch::manual_seed(config_.seed);
    model_ = Denoiser(config_.model, schedule_);
    optimizer_ = std::make_unique<torch::optim::Adam>(
        model_->parameters(), torch::optim::AdamOptions(config_.learning_rate));
}

torch::Tensor apply_symmetry(const torch::Tensor& images, const torch::Tensor& symmetry)
{
    const bool square = images.size(2) == images.size(3);
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < images.size(0); ++i) {
        const int64_t code = symmetry[i].item<int64_t>();
        auto x = images[i];
        if (code & 1) {
            x = x.flip({2});
        }
        if (code & 2) {
            x = x.flip({1});
        }
        if ((code & 4) && square) {
            x = x.transpose(1, 2);
        }
        out.push_back(x);
    }
    return torch::stack(out).contiguous();
}

BatchDraw Trainer::draw_batch(int64_t pool_size, int64_t height, int64_t width) const
{
    auto gen = make_generator(mix_seed(config_.seed, static_cast<uint64_t>(iteration_)));
    const int64_t n = std::min<int64_t>(config_.batch_size, pool_size);
    BatchDraw draw;
    auto perm = torch::randperm(pool_size, gen, torch::kLong).slice(0, 0, n);
    draw.indices.assign(perm.data_ptr<int64_t>(), perm.data_ptr<int64_t>() + n);
    auto t = torch::randint(1, config_.train_steps + 1, {n}, gen, torch::kLong);
    for (int64_t i = 0; i < n; ++i) {
        draw.timesteps.push_back(static_cast<int>(t[i].item<int64_t>()));
    }
    draw.eps = torch::randn({n, 3, height, width}, gen, torch::kFloat32);
    draw.symmetry = torch::randint(0, 8, {n}, gen, torch::kLong);
    return draw;
}

LossReport Trainer::step(const torch::Tensor& shadow_pool, const torch::Tensor& clean_pool)
{
    if (shadow_pool.size(0) == 0) {
        throw DataError("training pool is empty");
    }
    model_->train();
    auto draw = draw_batch(shadow_pool.size(0), shadow_pool.size(2), shadow_pool.size(3));
    auto idx = torch::tensor(draw.indices, torch::kLong);
    auto shadow = shadow_pool.index_select(0, idx);
    auto clean = clean_pool.index_select(0, idx);
    if (config_.augment) {
        shadow = apply_symmetry(shadow, draw.symmetry);
        clean = apply_symmetry(clean, draw.symmetry);
    }

    auto terms = training_losses(model_, shadow, clean, draw.timesteps, draw.eps, schedule_, config_);
    LossReport report;
    report.iteration = iteration_ + 1;
    report.l_cdm = terms.l_cdm.item<double>();
    report.l_cam = terms.l_cam.item<double>();
    report.l_att = terms.l_att.item<double>();
    report.total = terms.total.item<double>();
    if (!std::isfinite(report.total)) {
        std::ostringstream msg;
        msg << "non-finite training loss at iteration " << report.iteration << " (l_cdm=" << report.l_cdm
            << ", l_cam=" << report.l_cam << ", l_att=" << report.l_att << ")";
        throw NumericError(msg.str());
    }

    optimizer_->zero_grad();
    terms.total.backward();
    optimizer_->step();
    ++iteration_;
    return report;
}

namespace {

using IDict = c10::impl::GenericDict;

IDict string_dict()
{
    return IDict(c10::StringType::get(), c10::AnyType::get());
}

c10::Dict<std::string, torch::Tensor> module_state(const torch::nn::Module& module)
{
    c10::Dict<std::string, torch::Tensor> state;
    for (const auto& p : module.named_parameters()) {
        state.insert(p.key(), p.value().detach().contiguous());
    }
    for (const auto& b : module.named_buffers()) {
        state.insert(b.key(), b.value().detach().contiguous());
    }
    return state;
}

c10::IValue entry(const IDict& dict, const std::string& key, const fs::path& path)
{
    auto it = dict.find(c10::IValue(key));
    if (it == dict.end()) {
        throw DataError("checkpoint " + path.string() + " lacks '" + key + "'");
    }
    return it->value();
}

void load_module_state(torch::nn::Module& module, const c10::IValue& value, const fs::path& path)
{
    if (!value.isGenericDict()) {
        throw DataError("checkpoint " + path.string() + " has malformed weights");
    }
    const auto dict = value.toGenericDict();
    torch::NoGradGuard no_grad;
    auto assign = [&](const std::string& name, torch::Tensor& target) {
        auto v = entry(dict, name, path);
        if (!v.isTensor() || v.toTensor().sizes() != target.sizes()) {
            throw DataError("checkpoint weights do not match the stored architecture at '" + name + "'");
        }
        target.copy_(v.toTensor());
    };
    for (auto& p : module.named_parameters()) {
        assign(p.key(), p.value());
    }
    for (auto& b : module.named_buffers()) {
        assign(b.key(), b.value());
    }
}

struct RawCheckpoint {
    TrainConfig config;
    int iteration = 0;
    IDict contents = string_dict();
};

RawCheckpoint read_checkpoint(const fs::path& path)
{
    if (!fs::exists(path)) {
        throw DataError("checkpoint not found: " + path.string());
    }
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    c10::IValue root;
    try {
        root = torch::pickle_load(bytes);
    } catch (const c10::Error& e) {
        throw DataError("unreadable checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
    if (!root.isGenericDict()) {
        throw DataError(path.string() + " is not a " + std::string(kCheckpointFormat) + " archive");
    }
    RawCheckpoint raw;
    raw.contents = root.toGenericDict();
    auto format = raw.contents.find(c10::IValue(std::string("format")));
    if (format == raw.contents.end() || !format->value().isString() ||
        format->value().toStringRef() != kCheckpointFormat) {
        throw DataError(path.string() + " is not a " + std::string(kCheckpointFormat) + " archive");
    }
    try {
        raw.config = nlohmann::json::parse(entry(raw.contents, "config", path).toStringRef()).get<TrainConfig>();
        raw.iteration = static_cast<int>(entry(raw.contents, "iteration", path).toInt());
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint " + path.string() + " has a malformed config: " + e.what());
    } catch (const c10::Error& e) {
        throw DataError("checkpoint " + path.string() + " is malformed: " + e.what_without_backtrace());
    }
    return raw;
}

} // namespace

// Written as a pickled dict (readable with torch.load). Optimizer moments are
// listed in parameter order so equal runs give byte-identical files.
void Trainer::save(const fs::path& path)
{
    c10::impl::GenericList moments(c10::AnyType::get());
    for (const auto& p : model_->parameters()) {
        auto it = optimizer_->state().find(p.unsafeGetTensorImpl());
        if (it == optimizer_->state().end()) {
            moments.push_back(c10::IValue());
            continue;
        }
        const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
        auto m = string_dict();
        m.insert("step", st.step());
        m.insert("exp_avg", st.exp_avg());
        m.insert("exp_avg_sq", st.exp_avg_sq());
        moments.push_back(m);
    }
    auto root = string_dict();
    root.insert("format", std::string(kCheckpointFormat));
    root.insert("config", nlohmann::json(config_).dump());
    root.insert("iteration", static_cast<int64_t>(iteration_));
    root.insert("model", module_state(*model_));
    root.insert("optimizer", moments);
    const auto bytes = torch::pickle_save(root);

    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    // Write-then-rename so an interrupted save never clobbers the previous checkpoint.
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw DataError("cannot write checkpoint " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

Trainer Trainer::resume(const fs::path& path)
{
    auto raw = read_checkpoint(path);
    Trainer trainer(raw.config);
    load_module_state(*trainer.model_, entry(raw.contents, "model", path), path);
    auto moments = entry(raw.contents, "optimizer", path);
    const auto params = trainer.model_->parameters();
    if (!moments.isList() || moments.toListRef().size() != params.size()) {
        throw DataError("checkpoint " + path.string() + " has malformed optimizer state");
    }
    const auto& list = moments.toListRef();
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (list[i].isNone()) {
            continue;
        }
        const auto m = list[i].toGenericDict();
        auto st = std::make_unique<torch::optim::AdamParamState>();
        st->step(entry(m, "step", path).toInt());
        st->exp_avg(entry(m, "exp_avg", path).toTensor().clone());
        st->exp_avg_sq(entry(m, "exp_avg_sq", path).toTensor().clone());
        trainer.optimizer_->state()[params[i].unsafeGetTensorImpl()] = std::move(st);
    }
    trainer.iteration_ = raw.iteration;
    return trainer;
}

Checkpoint load_checkpoint(const fs::path& path)
{
    auto raw = read_checkpoint(path);
    Checkpoint ckpt;
    ckpt.config = raw.config;
    ckpt.iteration = raw.iteration;
    ckpt.model = Denoiser(raw.config.model, raw.config.schedule());
    load_module_state(*ckpt.model, entry(raw.contents, "model", path), path);
    ckpt.model->eval();
    return ckpt;
}

namespace {

constexpr const char* kLossLogHeader = "iteration,l_cdm,l_cam,l_att,total";

std::string format_row(const LossReport& r)
{
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g", r.iteration, r.l_cdm, r.l_cam, r.l_att, r.total);
    return buf;
}

} // namespace

std::vector<LossReport> read_loss_log(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot read loss log " + path.string());
    }
    std::vector<LossReport> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        LossReport r;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &r.iteration, &r.l_cdm, &r.l_cam, &r.l_att,
                        &r.total) != 5) {
            throw DataError("malformed loss log row: " + line);
        }
        rows.push_back(r);
    }
    return rows;
}

fs::path train(const std::vector<ShadowPair>& pairs, const TrainConfig& config,
               const TrainRunOptions& options)
{
    if (pairs.empty()) {
        throw DataError("cannot train on an empty dataset");
    }
    auto [shadow, clean] = stack_pairs(pairs);
    const fs::path ckpt_path = options.run_dir / "checkpoint.pt";
    const fs::path log_path = options.run_dir / "loss_log.csv";
    fs::create_directories(options.run_dir);

    std::optional<Trainer> trainer;
    std::vector<LossReport> history;
    if (options.resume && fs::exists(ckpt_path)) {
        trainer.emplace(Trainer::resume(ckpt_path));
        if (fs::exists(log_path)) {
            for (const auto& r : read_loss_log(log_path)) {
                if (r.iteration <= trainer->iteration()) {
                    history.push_back(r);
                }
            }
        }
    } else {
        trainer.emplace(config);
    }

    std::ofstream log(log_path, std::ios::trunc);
    if (!log) {
        throw DataError("cannot write loss log " + log_path.string());
    }
    log << kLossLogHeader << '\n';
    for (const auto& r : history) {
        log << format_row(r) << '\n';
    }

    const int target = config.iterations;
    while (trainer->iteration() < target) {
        auto report = trainer->step(shadow, clean);
        log << format_row(report) << '\n';
        if (options.on_step) {
            options.on_step(report);
        }
        const int every = trainer->config().checkpoint_every;
        if (every > 0 && trainer->iteration() % every == 0 && trainer->iteration() < target) {
            log.flush();
            trainer->save(ckpt_path);
        }
    }
    log.flush();
    trainer->save(ckpt_path);
    return ckpt_path;
}

} // namespace shadowdiff
