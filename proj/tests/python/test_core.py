# Copyright (c) 2026 The shadowdiff Authors.
# All rights reserved.
#
# This software is licensed under the Apache License, Version 2.0 (the "License").
# You may not use this file except in compliance with the License. You may
# obtain a copy of the License at http://www.apache.org/licenses/LICENSE-2.0.
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import shadowdiff as sd


def test_alpha_bar_matches_cumulative_product():
    s = sd.NoiseSchedule.linear(1000, 1e-4, 0.02)
    betas = np.linspace(1e-4, 0.02, 1000)
    expected = np.cumprod(1.0 - betas)
    assert s.steps == 1000
    assert s.alpha_bar(0) == 1.0
    assert np.max(np.abs(np.array(s.alpha_bars()) - expected)) < 1e-12


def test_ddim_step_closed_form():
    s = sd.NoiseSchedule.linear()
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (3, 8, 8))
    eps = rng.standard_normal((3, 8, 8))
    x_t = sd.q_sample(x0, 600, eps, s)
    x_prev = sd.ddim_step(x_t, eps, 600, 560, s)
    a = s.alpha_bar(560)
    assert np.allclose(x_prev, math.sqrt(a) * x0 + math.sqrt(1 - a) * eps, atol=1e-10)
    assert np.allclose(sd.predict_x0(x_t, eps, 600, s), x0, atol=1e-10)
    assert sd.inference_timesteps(1000, 25)[:3] == [1000, 960, 920]


def test_self_similarity_against_numpy():
    rng = np.random.default_rng(1)
    k = rng.standard_normal((20, 16))
    n = k / np.linalg.norm(k, axis=1, keepdims=True)
    expected = 1.0 - n @ n.T
    np.fill_diagonal(expected, 0.0)
    got = sd.self_similarity(k)
    assert np.allclose(got, expected, atol=1e-12)
    assert sd.descriptor_distance(got, got) == 0.0
    assert sd.self_similarity(3.0 * k) == pytest.approx(got, abs=1e-12)


def test_cam_and_losses():
    fm = np.zeros((2, 4, 4))
    fm[0, 1, 2] = 1.0
    cam = sd.compute_cam(fm, np.array([2.0, -1.0]), 4, 4)
    assert cam.shape == (1, 4, 4)
    assert cam[0, 1, 2] == 1.0 and cam.min() == 0.0
    assert sd.loss_cam(0.9, 0.2) == pytest.approx(-(math.log(0.9) + math.log(0.8)))
    same = np.full((3, 4, 4), 0.3)
    assert np.all(sd.residual_target(same, same) == 0.0)


def test_stop_rule():
    assert not sd.stop_check([1.0, 2.0])
    assert sd.stop_check([1.0, 1.0, 1.5])
    assert not sd.stop_check([1.0, 1.0, 1.005])


def test_region_metrics_identity_and_shift():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (3, 16, 16)).round(3)
    mask = np.zeros((1, 16, 16))
    mask[:, :8] = 1.0
    rep = sd.region_metrics(img, img, mask)
    assert rep["ALL"]["rmse"] == 0.0
    assert rep["ALL"]["ssim"] == pytest.approx(1.0)
    shifted = np.clip(img + 10 / 255, 0, 1)
    worse = sd.region_metrics(shifted, img, mask)
    assert worse["ALL"]["rmse"] > 0.0
    assert worse["S"]["psnr"] < 99.0


def test_synthetic_shadow_darkens():
    clean = sd.make_scene(32, 5)
    spec = {"kind": "hard", "polygon": [[0.0, 0.0], [0.5, 0.0], [0.5, 1.0], [0.0, 1.0]],
            "attenuation": 0.5}
    shadow, mask = sd.synth_shadow(clean, spec)
    assert np.all(shadow <= clean + 1e-12)
    assert mask[:, :, :8].mean() == 1.0 and mask[:, :, 24:].sum() == 0.0


def test_sampler_with_python_predictor_recovers_target():
    s = sd.NoiseSchedule.linear()
    rng = np.random.default_rng(3)
    target = rng.uniform(-1, 1, (3, 16, 16))

    def predictor(x_t, x_cond, a, t):
        ab = s.alpha_bar(t)
        eps = (x_t - math.sqrt(ab) * target[None]) / math.sqrt(1 - ab)
        return eps, a

    out = sd.sample(target, np.full((1, 16, 16), 0.5), predictor, s,
                    sampling={"early_stop": False},
                    extractor={"weights": "stub", "patch_size": 4, "input_size": 16})
    assert out["steps_executed"] == 25
    assert np.max(np.abs(out["output"] - target)) < 1e-3


def test_errors_map_to_python_exceptions():
    with pytest.raises(ValueError):
        sd.compute_cam(np.zeros((2, 4, 4)), np.zeros(3), 4, 4)
    with pytest.raises(OSError):
        sd.extract_keys(np.zeros((3, 32, 32)), 11, {"weights": "/nonexistent/vit.pth"})


# Reference ViT-S/16 written directly against the DINO state-dict layout.
def _reference_keys(sd_, image, layer, input_size):
    x = (torch.from_numpy(image)[None] + 1) / 2
    mean = torch.tensor([0.485, 0.456, 0.406], dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225], dtype=x.dtype).view(1, 3, 1, 1)
    x = F.interpolate((x - mean) / std, size=(input_size, input_size), mode="bilinear",
                      align_corners=False)
    x = F.conv2d(x, sd_["patch_embed.proj.weight"], sd_["patch_embed.proj.bias"], stride=16)
    g = x.shape[-1]
    x = x.flatten(2).transpose(1, 2)
    pos = sd_["pos_embed"]
    side = int(round(math.sqrt(pos.shape[1] - 1)))
    grid = pos[:, 1:].reshape(1, side, side, -1).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(g, g), mode="bicubic", align_corners=False)
    pos = torch.cat([pos[:, :1], grid.permute(0, 2, 3, 1).reshape(1, g * g, -1)], 1)
    x = torch.cat([sd_["cls_token"], x], 1) + pos
    d, heads = 384, 6
    for i in range(layer + 1):
        p = f"blocks.{i}."
        h = F.layer_norm(x, (d,), sd_[p + "norm1.weight"], sd_[p + "norm1.bias"], 1e-6)
        qkv = F.linear(h, sd_[p + "attn.qkv.weight"], sd_[p + "attn.qkv.bias"])
        if i == layer:
            return qkv[0, 1:, d:2 * d].numpy()
        q, k, v = qkv.reshape(1, -1, 3, heads, d // heads).permute(2, 0, 3, 1, 4)
        a = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // heads), -1)
        x = x + F.linear((a @ v).transpose(1, 2).reshape(1, -1, d),
                         sd_[p + "attn.proj.weight"], sd_[p + "attn.proj.bias"])
        h = F.layer_norm(x, (d,), sd_[p + "norm2.weight"], sd_[p + "norm2.bias"], 1e-6)
        h = F.linear(F.gelu(F.linear(h, sd_[p + "mlp.fc1.weight"], sd_[p + "mlp.fc1.bias"])),
                     sd_[p + "mlp.fc2.weight"], sd_[p + "mlp.fc2.bias"])
        x = x + h


def test_vit_weights_load_and_match_reference(tmp_path):
    g = torch.Generator().manual_seed(0)
    d = 384

    def rnd(*shape, scale=0.02):
        return torch.randn(*shape, generator=g, dtype=torch.float64) * scale

    state = {"cls_token": rnd(1, 1, d), "pos_embed": rnd(1, 197, d),
             "patch_embed.proj.weight": rnd(d, 3, 16, 16), "patch_embed.proj.bias": rnd(d)}
    for i in range(12):
        p = f"blocks.{i}."
        state.update({
            p + "norm1.weight": 1 + rnd(d), p + "norm1.bias": rnd(d),
            p + "attn.qkv.weight": rnd(3 * d, d), p + "attn.qkv.bias": rnd(3 * d),
            p + "attn.proj.weight": rnd(d, d), p + "attn.proj.bias": rnd(d),
            p + "norm2.weight": 1 + rnd(d), p + "norm2.bias": rnd(d),
            p + "mlp.fc1.weight": rnd(4 * d, d), p + "mlp.fc1.bias": rnd(4 * d),
            p + "mlp.fc2.weight": rnd(d, 4 * d), p + "mlp.fc2.bias": rnd(d),
        })
    state.update({"norm.weight": 1 + rnd(d), "norm.bias": rnd(d)})
    path = tmp_path / "vit_s16.pth"
    torch.save(state, path)

    image = np.random.default_rng(4).uniform(-1, 1, (3, 32, 32))
    config = {"weights": str(path), "patch_size": 16, "input_size": 64}
    for layer in (0, 11):
        got = sd.extract_keys(image, layer, config)
        want = _reference_keys(state, image, layer, 64)
        assert got.shape == (16, d)
        assert np.max(np.abs(got - want)) < 1e-6
