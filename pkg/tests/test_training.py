import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from hlnet.blocks import HLFDBConfig, ResidualBlock
from hlnet.imaging import tonemap_mu_inv
from hlnet.metrics import MetricsRecord, psnr_mu, ssim, ssim_mu
from hlnet.model import ABLATIONS, HLNet, HLNetConfig, init_params
from hlnet.simdata import DegradeConfig, SamplePair, make_dataset
from hlnet.training import (
    AdamState,
    DivergenceError,
    TrainConfig,
    TrainingError,
    UnsupportedVariantError,
    ablation_registry,
    crop_offsets,
    crop_sampler,
    evaluate,
    load_checkpoint,
    lr_at,
    mu_l1_loss,
    optimizer_step,
    save_checkpoint,
    stack_pairs,
    train,
)


def toy_cfg(**kw):
    base = dict(width=8, hlfdb_cfg=HLFDBConfig(n_scales=2, n_dense_layers=2))
    base.update(kw)
    return HLNetConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return make_dataset(2, DegradeConfig(seed=3), (4, 16, 16))


# -- loss ----------------------------------------------------------------------------

def test_loss_identical_is_zero(gen):
    x = torch.rand(2, 4, 8, 8, generator=gen)
    assert mu_l1_loss(x, x).item() == 0.0


def test_loss_endpoints():
    assert mu_l1_loss(torch.ones(1, 4, 4), torch.zeros(1, 4, 4)).item() == pytest.approx(1.0, abs=1e-7)


def test_loss_positive_for_different(gen):
    x = torch.rand(4, 8, 8, generator=gen)
    assert mu_l1_loss(x * 0.9, x).item() > 0


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        mu_l1_loss(torch.zeros(4, 8, 8), torch.zeros(4, 8, 9))


def test_loss_gradient_matches_fd(gen):
    gt = torch.rand(64, generator=gen, dtype=torch.float64) * 0.8 + 0.1
    pred = (gt + 0.05 * torch.randn(64, generator=gen, dtype=torch.float64)).clamp(0.05, 0.95)
    pred.requires_grad_(True)
    mu_l1_loss(pred, gt).backward()
    eps = 1e-7
    num = torch.empty(64, dtype=torch.float64)
    with torch.no_grad():
        for i in range(64):
            d = torch.zeros(64, dtype=torch.float64)
            d[i] = eps
            num[i] = (mu_l1_loss(pred + d, gt) - mu_l1_loss(pred - d, gt)) / (2 * eps)
    rel = (pred.grad - num).norm() / (pred.grad.norm() + num.norm())
    assert rel <= 1e-4


def test_loss_clamp_blocks_gradient_outside_range():
    pred = torch.tensor([-0.5, 1.5, 0.5], dtype=torch.float64, requires_grad=True)
    mu_l1_loss(pred, torch.full((3,), 0.2, dtype=torch.float64)).backward()
    assert pred.grad[0] == 0 and pred.grad[1] == 0 and pred.grad[2] != 0


# -- crops ---------------------------------------------------------------------------

def _pair(h, w, s=4, c=4):
    from hlnet.imaging import BracketSequence, RawFrame
    frames = [RawFrame(torch.rand(1, c, h, w), 4.0 ** i) for i in range(5)]
    gt = torch.arange(c * h * s * w * s, dtype=torch.float32).reshape(c, h * s, w * s)
    return SamplePair(gt / gt.max(), BracketSequence(frames, "s"))


@pytest.mark.parametrize("size,expected", [(96, 4), (64, 1), (128, 9)])
def test_crop_counts(size, expected):
    crops = crop_sampler(_pair(size, size, s=1), 64, 32)
    assert len(crops) == expected
    assert len(crops) == (math.floor((size - 64) / 32) + 1) ** 2


def test_crop_geometry_and_order():
    pair = _pair(24, 20, s=4)
    crops = crop_sampler(pair, 8, 4)
    ys, xs = crop_offsets(24, 8, 4), crop_offsets(20, 8, 4)
    assert [c.scene_id for c in crops] == [f"s_{y}_{x}" for y in ys for x in xs]
    for c in crops:
        _, y, x = c.scene_id.split("_")
        y, x = int(y), int(x)
        assert torch.equal(c.bracket.frames[2].data, pair.bracket.frames[2].data[..., y:y + 8, x:x + 8])
        assert torch.equal(c.gt, pair.gt[:, 4 * y:4 * y + 32, 4 * x:4 * x + 32])


def test_crop_union_covers_frame():
    for h, w, crop, stride in [(24, 20, 8, 4), (32, 32, 16, 16), (40, 40, 16, 8)]:
        cover = torch.zeros(h, w, dtype=torch.bool)
        for y in crop_offsets(h, crop, stride):
            for x in crop_offsets(w, crop, stride):
                cover[y:y + crop, x:x + crop] = True
        if (h - crop) % stride == 0 and (w - crop) % stride == 0:
            assert cover.all()


def test_crop_too_large():
    with pytest.raises(ValueError):
        crop_sampler(_pair(32, 32), 64, 32)


# -- optimizer -----------------------------------------------------------------------

def test_zero_grad_no_decay_is_noop(gen):
    p = {"w": torch.randn(5, generator=gen)}
    before = p["w"].clone()
    cfg = TrainConfig(weight_decay=0.0)
    state = AdamState()
    for _ in range(3):
        optimizer_step(p, {"w": torch.zeros(5)}, state, cfg)
    assert torch.equal(p["w"], before)


def test_constant_gradient_closed_form():
    cfg = TrainConfig(lr=1e-2, weight_decay=0.0, eps=1e-8)
    for g in (0.37, -2.5):
        p = {"w": torch.zeros(1, dtype=torch.float64)}
        state = AdamState()
        prev = 0.0
        for t in range(1, 200):
            optimizer_step(p, {"w": torch.tensor([g], dtype=torch.float64)}, state, cfg)
            step = p["w"].item() - prev
            prev = p["w"].item()
            # bias-corrected moments equal g and g^2 exactly for a constant gradient
            assert step == pytest.approx(-cfg.lr * g / (abs(g) + cfg.eps), rel=1e-9)
        assert abs(step) == pytest.approx(cfg.lr, rel=1e-6)
        assert math.copysign(1, -step) == math.copysign(1, g)


def test_matches_torch_adamw(gen):
    cfg = TrainConfig(lr=3e-3, weight_decay=0.1)
    w0 = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    ours = {"w": w0.clone()}
    ref = torch.nn.Parameter(w0.clone())
    opt = torch.optim.AdamW([ref], lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                            weight_decay=cfg.weight_decay)
    state = AdamState()
    for _ in range(25):
        g = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        optimizer_step(ours, {"w": g}, state, cfg)
        ref.grad = g.clone()
        opt.step()
    torch.testing.assert_close(ours["w"], ref.detach(), rtol=1e-12, atol=1e-14)


def test_non_finite_gradient_names_parameter():
    p = {"a": torch.zeros(2), "b.weight": torch.zeros(2)}
    with pytest.raises(TrainingError, match="b.weight"):
        optimizer_step(p, {"a": torch.zeros(2), "b.weight": torch.tensor([1.0, float("nan")])},
                       AdamState(), TrainConfig())


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0)
    assert lr_at(cfg, 0, 10) == 1.0
    assert lr_at(cfg, 5, 10) == pytest.approx(0.5)
    assert lr_at(TrainConfig(lr=1.0, schedule="constant"), 7, 10) == 1.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(schedule="step")


# -- training loop -------------------------------------------------------------------

def test_train_records_every_step(tiny_data, tmp_path):
    tc = TrainConfig(crop=8, stride=8, batch=4, epochs=2, lr=1e-3)
    run = train(toy_cfg(), tiny_data, tc, out_dir=tmp_path)
    # 2 scenes x 4 crops / batch 4 = 2 steps per epoch
    assert len(run.losses) == 4 == run.state.step
    assert all(math.isfinite(v) for v in run.losses)
    lines = (tmp_path / "train_log.txt").read_text().splitlines()
    assert len(lines) == 4
    assert [f.split("=")[0] for f in lines[0].split("\t")] == ["step", "epoch", "loss", "lr", "wall"]
    assert [p.name for p in run.checkpoints] == ["ckpt_epoch_0000.hlt", "ckpt_epoch_0001.hlt"]


def test_train_deterministic(tiny_data):
    tc = TrainConfig(crop=8, stride=8, batch=2, max_steps=3, lr=1e-3)
    a = train(toy_cfg(), tiny_data, tc)
    b = train(toy_cfg(), tiny_data, tc)
    assert a.losses == b.losses
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n


def test_checkpoint_resume_bit_identical(tiny_data, tmp_path):
    tc = TrainConfig(crop=8, stride=8, batch=4, epochs=2, lr=1e-3)
    full = train(toy_cfg(), tiny_data, tc, out_dir=tmp_path / "a")
    resumed = train(toy_cfg(), tiny_data, tc, out_dir=tmp_path / "b", resume=full.checkpoints[0])
    assert resumed.losses == full.losses[2:]
    assert resumed.losses[0] == full.losses[2]


def test_checkpoint_roundtrip(tmp_path):
    model = init_params(toy_cfg(ablation="wavelet"), 5)
    state = AdamState(step=3, m={"x": torch.ones(2)}, v={"x": torch.full((2,), 2.0)})
    tc = TrainConfig(lr=5e-4)
    save_checkpoint(tmp_path / "c.hlt", model, state, tc, epoch=2, loss=0.25)
    m2, s2, tc2, epoch, loss = load_checkpoint(tmp_path / "c.hlt")
    assert m2.cfg == model.cfg and tc2 == tc and epoch == 2 and loss == 0.25
    assert s2.step == 3 and torch.equal(s2.v["x"], state.v["x"])
    for k, v in model.state_dict().items():
        assert torch.equal(v, m2.state_dict()[k])


def test_divergence_raises_with_last_checkpoint(tiny_data, tmp_path):
    tc = TrainConfig(crop=8, stride=8, batch=8, epochs=2, lr=1e-3)
    model = init_params(toy_cfg(), 0)

    calls = {"n": 0}
    orig = model.forward

    def poisoned(x):
        calls["n"] += 1
        out = orig(x)
        return out * float("nan") if calls["n"] > 1 else out

    model.forward = poisoned
    with pytest.raises(DivergenceError) as err:
        train(toy_cfg(), tiny_data, tc, out_dir=tmp_path, model=model)
    assert err.value.last_checkpoint == tmp_path / "ckpt_epoch_0000.hlt"
    assert err.value.last_checkpoint.exists()


def test_crop_divisibility_enforced(tiny_data):
    with pytest.raises(ValueError):
        train(toy_cfg(), tiny_data, TrainConfig(crop=6, stride=6))


# -- registry ------------------------------------------------------------------------

def test_registry_variants():
    assert set(ABLATIONS) == {"full", "no_sceb", "no_hlfdb", "ll", "gg", "wavelet"}
    assert ablation_registry("full").hlfdb_cfg.variant == "standard"
    assert ablation_registry("wavelet").hlfdb_cfg.variant == "wavelet_split"
    m = HLNet(ablation_registry("no_hlfdb"))
    assert all(isinstance(s[0], ResidualBlock) for s in m.nonshared)
    m = HLNet(ablation_registry("no_sceb"))
    assert isinstance(m.shared[0], ResidualBlock)
    base = toy_cfg()
    assert ablation_registry("gg", base).width == 8


@pytest.mark.parametrize("name", ["esrt", "ESRT", "nope"])
def test_registry_rejects(name):
    with pytest.raises(UnsupportedVariantError) as err:
        ablation_registry(name)
    if name.lower() == "esrt":
        assert "HLNet-ESRT" in str(err.value)


@pytest.mark.parametrize("name", ABLATIONS)
def test_every_variant_trains_one_step(tiny_data, name):
    cfg = ablation_registry(name, toy_cfg())
    run = train(cfg, tiny_data[:1], TrainConfig(crop=8, stride=8, batch=4, max_steps=1))
    assert len(run.losses) == 1 and math.isfinite(run.losses[0])
    assert all(torch.isfinite(p).all() for p in run.model.parameters())


def test_evaluate_sorted_records(tiny_data):
    model = init_params(toy_cfg(), 0)
    rec = evaluate(model, list(reversed(tiny_data)))
    assert rec.ids == ["0000", "0001"]
    assert all(math.isfinite(v) for v in rec.psnr + rec.ssim)


# -- metrics -------------------------------------------------------------------------

def _tonemapped_pair(gen, delta):
    t = torch.rand(4, 32, 32, generator=gen, dtype=torch.float64) * 0.5 + 0.2
    return tonemap_mu_inv(t + delta), tonemap_mu_inv(t)


def test_psnr_fixtures(gen):
    assert psnr_mu(*_tonemapped_pair(gen, 0.1)) == pytest.approx(20.0, abs=1e-9)
    assert psnr_mu(*_tonemapped_pair(gen, 0.01)) == pytest.approx(40.0, abs=1e-9)
    x = torch.rand(4, 16, 16, generator=gen)
    assert psnr_mu(x, x) == 100.0
    with pytest.raises(ValueError):
        psnr_mu(x, x[:, :8])


def test_psnr_permutation_invariant(gen):
    a = torch.rand(4, 16, 16, generator=gen)
    b = torch.rand(4, 16, 16, generator=gen)
    perm = torch.randperm(a.numel(), generator=gen)
    pa, pb = a.reshape(-1)[perm].reshape(a.shape), b.reshape(-1)[perm].reshape(b.shape)
    assert psnr_mu(a, b) == pytest.approx(psnr_mu(pa, pb), abs=1e-12)


def test_ssim_identity_and_symmetry(gen):
    a = torch.rand(4, 24, 24, generator=gen)
    b = (a + 0.1 * torch.randn(4, 24, 24, generator=gen)).clamp(0, 1)
    assert ssim_mu(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim_mu(a, b) == pytest.approx(ssim_mu(b, a), abs=1e-12)


def test_ssim_inverted_low(gen):
    t = torch.rand(4, 32, 32, generator=gen, dtype=torch.float64)
    assert ssim_mu(tonemap_mu_inv(1 - t), tonemap_mu_inv(t)) < 0.2


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(torch.zeros(1, 10, 12), torch.zeros(1, 10, 12))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(11, 30), st.integers(11, 30))
def test_ssim_matches_skimage(seed, h, w):
    rng = np.random.default_rng(seed)
    a = rng.random((3, h, w))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                data_range=1.0, channel_axis=0)
    assert ssim(torch.from_numpy(a), torch.from_numpy(b)) == pytest.approx(ref, abs=1e-10)


def test_metrics_record_tsv():
    rec = MetricsRecord()
    rec.add("b", 30.0, 0.5)
    rec.add("a", 20.0, 0.7)
    lines = rec.to_tsv().splitlines()
    assert lines[0] == "sample_id\tpsnr_mu\tssim_mu"
    assert lines[1].startswith("a\t20.0000")
    assert lines[-1] == "mean\t25.0000\t0.600000"
