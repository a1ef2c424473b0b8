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

#include "helpers.hpp"

#include "shadowdiff/errors.hpp"
#include "shadowdiff/sampler.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace shadowdiff;
using namespace shadowdiff::test;

namespace {

StubExtractor small_stub()
{
    StubExtractorOptions o;
    o.patch_size = 4;
    o.depth = 12;
    o.key_dim = 16;
    o.input_size = 16;
    return StubExtractor(o);
}

SamplingConfig base_config()
{
    SamplingConfig cfg;
    cfg.seed = 42;
    cfg.vit_layer = 11;
    return cfg;
}

} // namespace

TEST_SUITE("sampler")
{
    TEST_CASE("stop rule")
    {
        SamplingConfig cfg;
        std::vector<double> falling{10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
        for (std::size_t n = 1; n <= falling.size(); ++n) {
            CHECK_FALSE(stop_check(std::span(falling).first(n), cfg));
        }
        std::vector<double> rise{5.0, 4.0, 4.2};
        CHECK(stop_check(rise, cfg));
        std::vector<double> small{5.0, 4.0, 4.02};
        CHECK_FALSE(stop_check(small, cfg));
        std::vector<double> early{5.0, 6.0};
        CHECK_FALSE(stop_check(early, cfg));

        auto patient = cfg;
        patient.stop_patience = 2;
        CHECK_FALSE(stop_check(rise, patient));
        std::vector<double> twice{5.0, 4.0, 4.2, 4.5};
        CHECK(stop_check(twice, patient));
        std::vector<double> broken{5.0, 4.2, 4.0, 4.5};
        CHECK_FALSE(stop_check(broken, patient));

        auto off = cfg;
        off.lambda_sim = 0.0;
        CHECK_FALSE(stop_check(twice, off));
        off = cfg;
        off.early_stop = false;
        CHECK_FALSE(stop_check(twice, off));
    }

    TEST_CASE("oracle predictor recovers the clean image in 25 steps")
    {
        auto sched = NoiseSchedule::linear(1000, 1e-4, 0.02);
        auto stub = small_stub();
        auto clean = rand64({3, 16, 16}, 1) * 2 - 1;
        auto cond = (clean * 0.6).clamp(-1, 1);
        auto cfg = base_config();
        cfg.early_stop = false;
        auto traj = sample(cond, torch::full({1, 16, 16}, 0.5, f64()),
                           target_predictor(sched, [&](int) { return clean; }), sched, stub, cfg);
        CHECK(traj.steps_executed == 25);
        CHECK_FALSE(traj.stopped_early);
        CHECK(max_abs_diff(traj.output, clean) < 1e-3);

        const auto& last = traj.steps.back();
        CHECK(last.t_prev == 0);
        CHECK(max_abs_diff(last.x0_hat, predict_x0(last.x_t, last.eps_hat, last.t, sched)) == 0.0);
        CHECK(max_abs_diff(traj.output, last.x0_hat) == 0.0);

        for (std::size_t i = 0; i < traj.steps.size(); ++i) {
            const auto& r = traj.steps[i];
            CHECK(r.l_total == doctest::Approx(cfg.lambda_sim * r.l_sim).epsilon(1e-15));
            if (i + 1 < traj.steps.size()) {
                CHECK(bitwise_equal(traj.steps[i + 1].attention, r.attention_refined));
                CHECK(traj.steps[i + 1].t == r.t_prev);
            }
        }
    }

    TEST_CASE("recorded losses match an independent recomputation")
    {
        auto sched = NoiseSchedule::linear(1000, 1e-4, 0.02);
        auto stub = small_stub();
        auto cond = rand64({3, 16, 16}, 2) * 2 - 1;
        auto noise = randn64({3, 16, 16}, 3);
        auto cfg = base_config();
        cfg.early_stop = false;
        auto traj = sample(cond, torch::full({1, 16, 16}, 0.5, f64()),
                           target_predictor(sched, [&](int t) { return cond + noise * (t / 1000.0); }),
                           sched, stub, cfg);
        for (const auto& r : traj.steps) {
            const double ref = loss_sim(cond, r.x0_hat, stub, cfg.vit_layer).item<double>();
            CHECK(std::abs(r.l_total - cfg.lambda_sim * ref) < 1e-9);
        }
    }

    TEST_CASE("sampling is bitwise deterministic under a fixed seed")
    {
        auto sched = NoiseSchedule::linear(1000, 1e-4, 0.02);
        auto stub = small_stub();
        auto cond = torch::rand({3, 16, 16}) * 2 - 1;
        DenoiserOptions o;
        o.base_width = 8;
        o.channel_mult = {1, 2};
        o.time_embed_dim = 16;
        o.groups = 4;
        torch::manual_seed(9);
        Denoiser model(o);
        auto cfg = base_config();
        auto a = sample(cond, model, sched, stub, cfg);
        auto b = sample(cond, model, sched, stub, cfg);
        CHECK(a.steps_executed == b.steps_executed);
        CHECK(bitwise_equal(a.output, b.output));
        auto other = cfg;
        other.seed = 43;
        CHECK(max_abs_diff(sample(cond, model, sched, stub, other).output, a.output) > 0.0);
    }

    TEST_CASE("early stop contract")
    {
        auto sched = NoiseSchedule::linear(1000, 1e-4, 0.02);
        auto stub = small_stub();
        auto cond = rand64({3, 16, 16}, 4) * 2 - 1;
        auto drift = randn64({3, 16, 16}, 5);
        // x̂0 moves steadily away from the condition, so the structure loss keeps rising.
        auto predictor = target_predictor(sched, [&](int t) { return cond + drift * (1.0 - t / 1000.0); });
        auto a0 = torch::full({1, 16, 16}, 0.5, f64());

        auto cfg = base_config();
        auto stopped = sample(cond, a0, predictor, sched, stub, cfg);
        auto full_cfg = cfg;
        full_cfg.early_stop = false;
        auto full = sample(cond, a0, predictor, sched, stub, full_cfg);
        auto zero_cfg = cfg;
        zero_cfg.lambda_sim = 0.0;
        auto zero = sample(cond, a0, predictor, sched, stub, zero_cfg);

        CHECK(stopped.stopped_early);
        CHECK(stopped.steps_executed == 3);
        CHECK(stopped.steps_executed <= full.steps_executed);
        CHECK(full.steps_executed == 25);
        REQUIRE(stopped.selected_step.has_value());
        CHECK(*stopped.selected_step == 0);
        CHECK(bitwise_equal(stopped.output, stopped.steps[0].x0_hat));
        for (int i = 0; i < stopped.steps_executed; ++i) {
            CHECK(bitwise_equal(stopped.steps[i].x_t, full.steps[i].x_t));
            CHECK(bitwise_equal(stopped.steps[i].x0_hat, full.steps[i].x0_hat));
            CHECK(bitwise_equal(stopped.steps[i].attention_refined, full.steps[i].attention_refined));
            CHECK(stopped.steps[i].l_total == full.steps[i].l_total);
        }

        CHECK_FALSE(zero.stopped_early);
        CHECK(zero.steps_executed == 25);
        CHECK(bitwise_equal(zero.output, full.output));
        for (const auto& r : zero.steps) {
            CHECK(r.l_total == 0.0);
        }
    }

    TEST_CASE("sampler errors")
    {
        auto sched = NoiseSchedule::linear(100, 1e-4, 0.02);
        auto stub = small_stub();
        auto cond = rand64({3, 16, 16}, 6);
        auto a0 = torch::full({1, 16, 16}, 0.5, f64());
        auto cfg = base_config();
        auto ok = target_predictor(sched, [&](int) { return cond; });
        CHECK_THROWS_AS(sample(cond.unsqueeze(0), a0, ok, sched, stub, cfg), UsageError);
        CHECK_THROWS_AS(sample(cond, torch::full({1, 8, 16}, 0.5, f64()), ok, sched, stub, cfg), UsageError);
        auto neg = cfg;
        neg.lambda_sim = -1.0;
        CHECK_THROWS_AS(sample(cond, a0, ok, sched, stub, neg), UsageError);
        auto too_many = cfg;
        too_many.infer_steps = 101;
        CHECK_THROWS_AS(sample(cond, a0, ok, sched, stub, too_many), UsageError);

        NoisePredictor broken = [](const torch::Tensor& x, const torch::Tensor&, const torch::Tensor& a, int) {
            return DenoiserOutput{torch::full_like(x, std::numeric_limits<double>::quiet_NaN()), a};
        };
        CHECK_THROWS_AS(sample(cond, a0, broken, sched, stub, cfg), NumericError);
    }
}
