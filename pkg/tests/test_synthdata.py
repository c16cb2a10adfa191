import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage
from scipy.stats import poisson

from gradprom.metrics import psnr
from gradprom.synthdata import (DegradeConfig, SceneConfig, block_mean, blur, degrade, augment,
                                flip_horizontal, gaussian_kernel1d, generate_scene,
                                label_frequencies, make_dataset, make_sample, parse_degrade,
                                read_pnm, save_dataset, scene_distribution, splitmix, write_pnm)


def test_scene_deterministic():
    a, b = generate_scene(42), generate_scene(42)
    assert a[0].tobytes() == b[0].tobytes() and a[1] == b[1] and a[2].tobytes() == b[2].tobytes()


@pytest.mark.parametrize("dist", ["A", "B"])
def test_scene_contract(dist):
    cfg = scene_distribution(dist)
    for seed in range(200):
        clean, label, mask = generate_scene(seed, cfg)
        assert clean.shape == (1, 32, 32) and clean.min() >= 0 and clean.max() <= 1
        assert label in (0, 1, 2)
        _, n = ndimage.label(mask)
        assert n == label + 1
        assert clean[0][mask == 1].mean() > clean[0][mask == 0].mean()


def test_label_balance():
    labels = [generate_scene(splitmix(0, "train", i))[1] for i in range(1000)]
    freq = label_frequencies(labels)
    assert np.all((freq >= 0.25) & (freq <= 0.42)), freq


def test_multichannel_scene():
    clean, _, mask = generate_scene(3, SceneConfig(channels=3))
    assert clean.shape == (3, 32, 32) and mask.shape == (32, 32)


def test_gaussian_zero_sigma_identity(rng):
    x = rng.uniform(size=(1, 8, 8))
    assert degrade(x, DegradeConfig("gaussian", sigma=0.0), 1).tobytes() == x.tobytes()


def test_gaussian_noise_std():
    x = np.full((1000, 1000), 0.5)
    y = degrade(x, DegradeConfig("gaussian", sigma=0.1), 7)
    assert abs((y - x).std() / 0.1 - 1.0) < 0.02


def test_poisson_variance_matches_clamped_pmf():
    x = np.full((1000, 1000), 0.5)
    y = degrade(x, DegradeConfig("poisson", rate=0.1), 7)
    # exact moments of clip(Poisson(5) * 0.1, 0, 1) from the pmf
    k = np.arange(200)
    p = poisson.pmf(k, 5.0)
    v = np.minimum(k * 0.1, 1.0)
    mean = (p * v).sum()
    var = (p * v * v).sum() - mean ** 2
    assert abs(y.var() / var - 1.0) < 0.01
    assert abs(y.mean() / mean - 1.0) < 0.01


def test_blur_kernel_weights():
    w = gaussian_kernel1d(3, 2.0)
    ref = np.array([np.exp(-1 / 8), 1.0, np.exp(-1 / 8)])
    np.testing.assert_allclose(w, ref / ref.sum(), rtol=0, atol=1e-15)
    np.testing.assert_allclose(w, [0.3192, 0.3616, 0.3192], atol=1e-4)


def test_blur_constant_exact():
    x = np.full((1, 9, 9), 0.37)
    assert blur(x, 3, 2.0).tobytes() == x.tobytes()


def test_blur_matches_scipy(rng):
    x = rng.uniform(size=(1, 10, 12))
    w = gaussian_kernel1d(5, 1.3)
    # numpy "reflect" padding is scipy's "mirror" mode
    ref = ndimage.correlate1d(ndimage.correlate1d(x, w, axis=-2, mode="mirror"), w, axis=-1, mode="mirror")
    np.testing.assert_allclose(blur(x, 5, 1.3), ref, rtol=0, atol=1e-14)


def test_downsample_block_means(rng):
    x = rng.uniform(size=(1, 8, 8))
    y = block_mean(x, 2)
    np.testing.assert_allclose(y, x.reshape(1, 4, 2, 4, 2).mean(axis=(2, 4)), atol=1e-15)
    up = np.repeat(np.repeat(y, 2, -2), 2, -1)
    np.testing.assert_array_equal(block_mean(up, 2), y)
    with pytest.raises(ValueError):
        block_mean(np.zeros((1, 6, 6)), 4)


def test_parse_composite():
    cfg = parse_degrade("gaussian(0.3)+poisson(0.1)+blur(3,2.0)")
    assert cfg.kind == "composite" and [s.kind for s in cfg.steps] == ["gaussian", "poisson", "blur"]
    assert cfg.describe() == "gaussian(0.3)+poisson(0.1)+blur(3,2)"
    assert parse_degrade("downsample(4)").scale_factor == 4


@pytest.mark.parametrize("text", ["gaussian", "blur(4,1.0)", "downsample(3)", "fog(1)", "", "gaussian(-1)"])
def test_parse_errors(text):
    with pytest.raises(ValueError):
        parse_degrade(text)


def test_psnr_monotone_in_sigma():
    clean = np.stack([generate_scene(s)[0] for s in range(100)])
    values = []
    for sigma in (0.05, 0.1, 0.2, 0.3):
        cfg = DegradeConfig("gaussian", sigma=sigma)
        values.append(np.mean([psnr(degrade(c, cfg, i), c) for i, c in enumerate(clean)]))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_augment_disabled_and_flip_involution():
    s = make_sample(5, SceneConfig(), DegradeConfig())
    assert augment(s, 1, enabled=False) is s
    back = flip_horizontal(flip_horizontal(s))
    assert back.clean.tobytes() == s.clean.tobytes() and back.mask.tobytes() == s.mask.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 62))
def test_augment_mask_stays_binary(seed):
    s = make_sample(11, SceneConfig(), DegradeConfig())
    out = augment(s, seed)
    assert set(np.unique(out.mask)) <= {0, 1}
    assert out.clean.shape == s.clean.shape and out.degraded.shape == s.degraded.shape


def test_dataset_splits_disjoint_and_deterministic(tmp_path):
    a = make_dataset(3, 20, 10)
    b = make_dataset(3, 20, 10)
    assert not set(a.seeds["train"]) & set(a.seeds["eval"])
    assert a.clean["eval"].tobytes() == b.clean["eval"].tobytes()
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    digest = lambda root: hashlib.sha256(b"".join(p.read_bytes() for p in sorted(root.rglob("*.*")))).hexdigest()
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert [e["seed"] for e in manifest["splits"]["train"]] == a.seeds["train"]


def test_sr_dataset_shapes():
    d = make_dataset(0, 4, 2, degradation=parse_degrade("downsample(2)"))
    assert d.degraded["train"].shape == (4, 1, 16, 16) and d.clean["train"].shape == (4, 1, 32, 32)


def test_pnm_roundtrip(tmp_path, rng):
    img = rng.uniform(size=(1, 5, 7))
    write_pnm(tmp_path / "a.pgm", img)
    np.testing.assert_allclose(read_pnm(tmp_path / "a.pgm"), img, atol=1 / 65535)
    rgb = rng.uniform(size=(3, 4, 4))
    write_pnm(tmp_path / "b.ppm", rgb)
    assert read_pnm(tmp_path / "b.ppm").shape == (3, 4, 4)
    mask = (rng.uniform(size=(6, 6)) > 0.5).astype(np.int64)
    write_pnm(tmp_path / "m.pgm", mask, maxval=1)
    np.testing.assert_array_equal(read_pnm(tmp_path / "m.pgm", as_float=False)[0], mask)
