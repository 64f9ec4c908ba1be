import numpy as np
import pytest
import torch
from scipy import stats

from hlnet.imaging import normalize_exposure
from hlnet.simdata import (
    DegradeConfig,
    degrade,
    gen_scene,
    make_dataset,
    read_dataset,
    read_manifest,
    write_dataset,
)

QUIET = dict(read_noise_sigma=0.0, shot_noise_gain=0.0, blur_sigma=0.0)


def naive_box(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h // k, w // k))
    for i in range(h // k):
        for j in range(w // k):
            acc = 0.0
            for dy in range(k):
                for dx in range(k):
                    acc = acc + x[:, i * k + dy, j * k + dx]
            out[:, i, j] = acc / (k * k)
    return out


def test_gen_scene_deterministic_and_in_range():
    a, b = gen_scene(3, 4, 32, 40), gen_scene(3, 4, 32, 40)
    assert torch.equal(a, b)
    assert a.shape == (4, 32, 40)
    assert a.min() >= 0 and a.max() == 1


def test_gen_scene_seeds_differ():
    scenes = [gen_scene(s, 4, 32, 32) for s in range(20)]
    for a, b in zip(scenes, scenes[1:]):
        assert (a - b).abs().mean() > 0.01


def test_gen_scene_has_highlights():
    # most energy low, a few bright spots: median well below the max
    s = gen_scene(0, 4, 64, 64)
    assert s.median() < 0.5


def test_gen_scene_small_dims_rejected():
    with pytest.raises(ValueError):
        gen_scene(0, 4, 7, 16)


def test_degrade_identity_pipeline():
    gt = gen_scene(1, 4, 16, 16)
    cfg = DegradeConfig(exposure_ratios=[1.0], downscale=1, **QUIET)
    seq = degrade(gt, cfg)
    assert torch.equal(seq.frames[0].data[0], gt)


def test_degrade_saturates_long_frame():
    gt = torch.full((4, 16, 16), 0.5)
    seq = degrade(gt, DegradeConfig(**QUIET))
    assert torch.all(seq.frames[4].data == 1.0)
    seq = degrade(gt, DegradeConfig(saturation_level=0.8, **QUIET))
    assert torch.all(seq.frames[4].data == 0.8)


def test_normalized_frames_match_box_downsample_oracle():
    gt = gen_scene(2, 4, 32, 32) / 300  # dim enough that ratio 256 never clips
    seq = degrade(gt, DegradeConfig(**QUIET))
    oracle = naive_box(gt.double().numpy(), 4)
    for fr in seq.frames:
        y = normalize_exposure(fr, seq.frames[0].exposure_time).double().numpy()[0]
        np.testing.assert_allclose(y, oracle, atol=1e-6, rtol=0)


def test_degrade_rejects_out_of_range():
    with pytest.raises(ValueError):
        degrade(torch.full((4, 8, 8), 1.5), DegradeConfig())
    with pytest.raises(ValueError):
        degrade(torch.full((4, 8, 8), -0.1), DegradeConfig())
    with pytest.raises(ValueError):
        degrade(torch.full((4, 9, 9), 0.1), DegradeConfig())


def test_degrade_config_validation():
    with pytest.raises(ValueError):
        DegradeConfig(exposure_ratios=[2.0, 4.0])
    with pytest.raises(ValueError):
        DegradeConfig(exposure_ratios=[1.0, 4.0, 4.0])
    with pytest.raises(ValueError):
        DegradeConfig(downscale=0)
    with pytest.raises(ValueError):
        DegradeConfig(read_noise_sigma=-1)


def test_noise_keyed_by_scene_and_seed():
    gt = gen_scene(0, 4, 32, 32)
    a = degrade(gt, DegradeConfig(), "0000")
    b = degrade(gt, DegradeConfig(), "0000")
    c = degrade(gt, DegradeConfig(), "0001")
    d = degrade(gt, DegradeConfig(seed=1), "0000")
    assert torch.equal(a.stack(), b.stack())
    assert not torch.equal(a.stack(), c.stack())
    assert not torch.equal(a.stack(), d.stack())


def test_blur_only_on_configured_frames():
    gt = gen_scene(4, 4, 32, 32)
    sharp = degrade(gt, DegradeConfig(**QUIET))
    blurred = degrade(gt, DegradeConfig(read_noise_sigma=0.0, shot_noise_gain=0.0, blur_sigma=1.0))
    for i in range(5):
        same = torch.equal(sharp.frames[i].data, blurred.frames[i].data)
        assert same == (i not in (3, 4)) or torch.all(sharp.frames[i].data == 1.0)


def test_short_frames_noisier_after_normalization():
    cfg = DegradeConfig(seed=11)
    quiet = DegradeConfig(seed=11, **QUIET)
    pairs = make_dataset(50, cfg, (4, 16, 16))
    short_res, long_res = [], []
    for p in pairs:
        clean = degrade(p.gt, quiet, p.scene_id)
        t0 = p.bracket.frames[0].exposure_time
        # long frame index 2 (ratio 16); mask pixels far from saturation in it
        mask = (clean.frames[2].data < 0.9 * cfg.saturation_level) & (clean.frames[0].data > 0.01)
        for idx, sink in ((0, short_res), (2, long_res)):
            noisy = normalize_exposure(p.bracket.frames[idx], t0)
            ref = normalize_exposure(clean.frames[idx], t0)
            sink.append((noisy - ref)[mask].double().numpy())
    s, l = np.concatenate(short_res), np.concatenate(long_res)
    f = s.var(ddof=1) / l.var(ddof=1)
    p_value = stats.f.sf(f, len(s) - 1, len(l) - 1)
    assert f > 1 and p_value < 1e-6
    per_scene = [a.var() > b.var() for a, b in zip(short_res, long_res) if a.size > 10]
    assert all(per_scene)


def test_saturated_fraction_non_decreasing():
    for seed in range(10):
        gt = gen_scene(seed, 4, 64, 64)
        seq = degrade(gt, DegradeConfig(seed=seed))
        fracs = [(fr.data >= seq.saturation_level).float().mean().item() for fr in seq.frames]
        assert all(b >= a for a, b in zip(fracs, fracs[1:])), fracs


def test_make_dataset_shapes_and_determinism():
    cfg = DegradeConfig(seed=7)
    a = make_dataset(8, cfg, (4, 12, 16))
    b = make_dataset(8, cfg, (4, 12, 16))
    assert len(a) == 8
    assert [p.scene_id for p in a] == [f"{i:04d}" for i in range(8)]
    for p, q in zip(a, b):
        assert p.gt.shape == (4, 48, 64)
        assert p.bracket.stack().shape == (5, 4, 12, 16)
        assert torch.equal(p.gt, q.gt) and torch.equal(p.bracket.stack(), q.bracket.stack())
    # seed splitting rule
    assert torch.equal(a[3].gt, gen_scene(7 * 1_000_003 + 3, 4, 48, 64))
    with pytest.raises(ValueError):
        make_dataset(0, cfg, (4, 12, 16))


def test_dataset_roundtrip(tmp_path):
    cfg = DegradeConfig(seed=2, blur_sigma=0.5)
    pairs = make_dataset(3, cfg, (4, 8, 8))
    paths = write_dataset(pairs, tmp_path, cfg)
    assert sorted(p.name for p in paths) == ["scene_0000.hlt", "scene_0001.hlt", "scene_0002.hlt"]
    manifest = read_manifest(tmp_path / "manifest.txt")
    assert manifest["ids"] == "0000,0001,0002"
    assert manifest["exposure_ratios"] == "1,4,16,64,256"
    assert float(manifest["blur_sigma"]) == 0.5
    back = read_dataset(tmp_path)
    assert len(back) == 3
    for p, q in zip(pairs, back):
        assert p.scene_id == q.scene_id
        assert torch.equal(p.gt, q.gt)
        assert torch.equal(p.bracket.stack(), q.bracket.stack())
        assert p.bracket.exposure_times == q.bracket.exposure_times
        assert p.bracket.saturation_level == q.bracket.saturation_level
