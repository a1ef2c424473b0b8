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

#include "shadowdiff/data.hpp"
#include "shadowdiff/errors.hpp"
#include "shadowdiff/image_io.hpp"

#include <doctest.h>

#include <set>

using namespace shadowdiff;
using namespace shadowdiff::test;

namespace {

ShadowSpec square_spec(double attenuation)
{
    ShadowSpec s;
    s.kind = ShadowKind::Hard;
    s.polygon = {{0.25, 0.25}, {0.75, 0.25}, {0.75, 0.75}, {0.25, 0.75}};
    s.attenuation = attenuation;
    return s;
}

} // namespace

TEST_SUITE("data")
{
    TEST_CASE("hard shadow halves the pixels inside the polygon")
    {
        auto clean = make_scene(16, 3).to(torch::kFloat64);
        auto pair = synth_shadow(clean, square_spec(0.5));
        REQUIRE(pair.mask.has_value());
        auto inside = pair.mask->to(torch::kBool).expand({3, 16, 16});
        CHECK(max_abs_diff(pair.shadow.masked_select(inside), clean.masked_select(inside) * 0.5) == 0.0);
        CHECK(bitwise_equal(pair.shadow.masked_select(~inside), clean.masked_select(~inside)));
        // Pixel centres in [4, 12) fall inside the square.
        CHECK(pair.mask->sum().item<double>() == 64.0);
        CHECK(pair.provenance == Provenance::Synthetic);
    }

    TEST_CASE("no-shadow limit")
    {
        auto clean = make_scene(16, 4);
        auto pair = synth_shadow(clean, square_spec(1.0 - 1e-9));
        CHECK(max_abs_diff(pair.shadow, clean) < 1e-8);
        CHECK(pair.mask->sum().item<double>() == 0.0);
    }

    TEST_CASE("soft shadow field has a penumbra")
    {
        auto spec = square_spec(0.4);
        spec.kind = ShadowKind::Soft;
        spec.penumbra_width = 2.0;
        auto field = shadow_field(spec, 32, 32);
        CHECK(field.min().item<double>() >= 0.4 - 1e-12);
        CHECK(field.max().item<double>() <= 1.0);
        // Count distinct levels strictly between the two extremes.
        auto interior = field.masked_select((field > 0.41) & (field < 0.99));
        CHECK(interior.numel() > 40);
        std::set<long> bins;
        for (int64_t i = 0; i < interior.numel(); ++i) {
            bins.insert(static_cast<long>(interior[i].item<double>() * 20));
        }
        CHECK(bins.size() >= 8);

        auto hard = shadow_field(square_spec(0.4), 32, 32);
        CHECK(hard.masked_select((hard > 0.41) & (hard < 0.99)).numel() == 0);
    }

    TEST_CASE("synthetic shadows never brighten")
    {
        for (auto kind : {ShadowKind::Hard, ShadowKind::Soft, ShadowKind::Self}) {
            for (uint64_t seed = 0; seed < 6; ++seed) {
                auto spec = random_shadow_spec(kind, 32, seed);
                auto clean = make_scene(32, seed);
                if (kind == ShadowKind::Self) {
                    clean = paint_self_object(clean, spec);
                }
                auto pair = synth_shadow(clean, spec);
                auto field = shadow_field(spec, 32, 32);
                CHECK((pair.shadow <= pair.clean).all().item<bool>());
                auto untouched = (field == 1.0).expand({3, 32, 32});
                CHECK(bitwise_equal(pair.shadow.masked_select(untouched), pair.clean.masked_select(untouched)));
                CHECK(pair.mask->sum().item<double>() > 0.0);
                CHECK(spec.attenuation > 0.0);
                CHECK(spec.attenuation < 1.0);
                CHECK(spec.penumbra_width >= 0.0);
            }
        }
    }

    TEST_CASE("degenerate geometry is rejected")
    {
        auto clean = make_scene(16, 0);
        auto flat = square_spec(0.5);
        flat.polygon = {{0.1, 0.1}, {0.9, 0.1}, {0.5, 0.1}};
        CHECK_THROWS_AS(synth_shadow(clean, flat), UsageError);
        auto tiny = square_spec(0.5);
        tiny.polygon = {{0.5, 0.5}, {0.501, 0.5}, {0.5, 0.501}};
        CHECK_THROWS_AS(synth_shadow(clean, tiny), UsageError);
        auto self = square_spec(0.5);
        self.kind = ShadowKind::Self;
        self.radii = {0.0, 0.2};
        CHECK_THROWS_AS(synth_shadow(clean, self), UsageError);
        CHECK_THROWS_AS(synth_shadow(clean, square_spec(0.0)), UsageError);
        CHECK_THROWS_AS(synth_shadow(clean, square_spec(1.0)), UsageError);
        auto neg = square_spec(0.5);
        neg.penumbra_width = -1.0;
        CHECK_THROWS_AS(synth_shadow(clean, neg), UsageError);
    }

    TEST_CASE("spec serialization round trip")
    {
        auto spec = random_shadow_spec(ShadowKind::Soft, 32, 9);
        nlohmann::json j = spec;
        auto back = j.get<ShadowSpec>();
        CHECK(back.kind == spec.kind);
        CHECK((back.polygon == spec.polygon));
        CHECK(back.attenuation == spec.attenuation);
        CHECK(back.penumbra_width == spec.penumbra_width);
        CHECK(back.seed == spec.seed);
        CHECK(shadow_kind_from_string("self") == ShadowKind::Self);
        CHECK_THROWS_AS(shadow_kind_from_string("penumbral"), UsageError);
    }

    TEST_CASE("synthetic dataset is deterministic and balanced")
    {
        SyntheticCounts counts{4, 3, 2};
        auto a = make_synthetic_dataset(counts, 32, 7);
        auto b = make_synthetic_dataset(counts, 32, 7);
        REQUIRE(a.size() == 9);
        int hard = 0, soft = 0, self = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].pair.name == b[i].pair.name);
            CHECK(bitwise_equal(a[i].pair.shadow, b[i].pair.shadow));
            CHECK(bitwise_equal(*a[i].pair.mask, *b[i].pair.mask));
            hard += a[i].spec.kind == ShadowKind::Hard;
            soft += a[i].spec.kind == ShadowKind::Soft;
            self += a[i].spec.kind == ShadowKind::Self;
        }
        CHECK(hard == 4);
        CHECK(soft == 3);
        CHECK(self == 2);
        auto c = make_synthetic_dataset(counts, 32, 8);
        CHECK(max_abs_diff(c[0].pair.clean, a[0].pair.clean) > 0.0);
        CHECK_THROWS_AS(make_synthetic_dataset({0, 0, 0}, 32, 1), UsageError);
    }

    TEST_CASE("save and load round trip")
    {
        TempDir dir("roundtrip");
        auto samples = make_synthetic_dataset({1, 1, 1}, 16, 5);
        std::vector<ShadowPair> pairs;
        for (const auto& s : samples) {
            pairs.push_back(s.pair);
        }
        save_pairs(dir.path(), pairs);
        auto loaded = load_paired_dataset(dir.path());
        REQUIRE(loaded.pairs.size() == 3);
        CHECK(loaded.warnings.empty());
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(loaded.pairs[i].name == pairs[i].name);
            CHECK(loaded.pairs[i].provenance == Provenance::External);
            CHECK(bitwise_equal(quantize_8bit(loaded.pairs[i].shadow), quantize_8bit(pairs[i].shadow)));
            CHECK(bitwise_equal(quantize_8bit(loaded.pairs[i].clean), quantize_8bit(pairs[i].clean)));
            REQUIRE(loaded.pairs[i].mask.has_value());
            CHECK(bitwise_equal(quantize_8bit(*loaded.pairs[i].mask), quantize_8bit(*pairs[i].mask)));
        }

        // A second save of the loaded data is byte-stable.
        TempDir again("roundtrip2");
        save_pairs(again.path(), loaded.pairs);
        auto reloaded = load_paired_dataset(again.path());
        CHECK(bitwise_equal(reloaded.pairs[1].shadow, loaded.pairs[1].shadow));

        auto [shadow, clean] = stack_pairs(loaded.pairs);
        CHECK(shadow.sizes() == torch::IntArrayRef({3, 3, 16, 16}));
        CHECK(shadow.min().item<double>() >= -1.0);
        CHECK(clean.max().item<double>() <= 1.0);
    }

    TEST_CASE("unmatched files are skipped with warnings")
    {
        TempDir dir("unmatched");
        auto samples = make_synthetic_dataset({2, 0, 0}, 16, 6);
        save_pairs(dir.path(), {samples[0].pair, samples[1].pair});
        write_image(dir / "shadow/extra.png", samples[0].pair.shadow);
        write_image(dir / "clean/orphan.png", samples[0].pair.clean);
        write_image(dir / "shadow/odd.png", make_scene(8, 1));
        write_image(dir / "clean/odd.png", make_scene(16, 1));
        auto loaded = load_paired_dataset(dir.path());
        CHECK(loaded.pairs.size() == 2);
        CHECK(loaded.warnings.size() == 3);
    }

    TEST_CASE("dataset errors")
    {
        TempDir dir("empty");
        CHECK_THROWS_AS(load_paired_dataset(dir.path()), DataError);
        std::filesystem::create_directories(dir / "shadow");
        std::filesystem::create_directories(dir / "clean");
        CHECK_THROWS_AS(load_paired_dataset(dir.path()), DataError);
        CHECK_THROWS_AS(stack_pairs({}), DataError);
        CHECK_THROWS_AS(read_rgb(dir / "missing.png"), DataError);
    }
}
