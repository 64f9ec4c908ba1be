"""Mu-law L1 training: crops, AdamW, the training loop, checkpoints and the ablation registry."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from hlnet.container import decode_text, encode_text, read_container, write_container
from hlnet.imaging import MU, BracketSequence, RawFrame, preprocess_frames, tonemap_mu
from hlnet.metrics import MetricsRecord, psnr_mu, ssim_mu
from hlnet.model import ABLATIONS, HLNet, HLNetConfig, init_params
from hlnet.simdata import SamplePair

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class UnsupportedVariantError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    epochs: int = 1
    crop: int = 64
    stride: int = 32
    batch: int = 4
    mu: float = MU
    seed: int = 0
    schedule: str = "cosine"
    max_steps: int | None = None

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.batch < 1 or self.epochs < 1 or self.crop < 1 or self.stride < 1:
            raise ValueError("batch, epochs, crop and stride must be positive")


# -- loss ----------------------------------------------------------------------------

def mu_l1_loss(pred: torch.Tensor, gt: torch.Tensor, mu: float = MU) -> torch.Tensor:
    """mean |T(gt) - T(clamp(pred, 0, 1))|; the clamp passes gradient only inside [0, 1]."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (tonemap_mu(gt, mu) - tonemap_mu(pred.clamp(0.0, 1.0), mu)).abs().mean()


# -- crops ---------------------------------------------------------------------------

def crop_offsets(size: int, crop: int, stride: int) -> list[int]:
    if crop > size:
        raise ValueError(f"crop {crop} exceeds dimension {size}")
    return list(range(0, size - crop + 1, stride))


def crop_sampler(pair: SamplePair, crop: int, stride: int) -> list[SamplePair]:
    """All crop x crop bracket windows at stride offsets (row-major), with matching gt windows."""
    _, _, h, w = pair.bracket.frames[0].data.shape
    s = pair.gt.shape[-1] // w
    out = []
    for y in crop_offsets(h, crop, stride):
        for x in crop_offsets(w, crop, stride):
            frames = [RawFrame(fr.data[..., y:y + crop, x:x + crop], fr.exposure_time)
                      for fr in pair.bracket.frames]
            gt = pair.gt[..., y * s:(y + crop) * s, x * s:(x + crop) * s]
            sid = f"{pair.scene_id}_{y}_{x}"
            out.append(SamplePair(gt, BracketSequence(frames, sid, pair.bracket.saturation_level)))
    return out


def stack_pairs(pairs: list[SamplePair], gamma: float, dtype=torch.float32):
    """Preprocessed inputs (M, N, 2C, H, W) and targets (M, C, sH, sW)."""
    xs = [preprocess_frames(p.bracket.stack().to(dtype), p.bracket.exposure_times, gamma) for p in pairs]
    return torch.stack(xs), torch.stack([p.gt.to(dtype) for p in pairs])


# -- AdamW ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def optimizer_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState,
                   cfg: TrainConfig, lr: float | None = None) -> AdamState:
    """Bias-corrected Adam step with decoupled (multiplicative) weight decay, in place."""
    lr = cfg.lr if lr is None else lr
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1 - cfg.beta1 ** t
    bc2 = 1 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        p.mul_(1 - lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps))
    return state


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.schedule == "constant" or total <= 1:
        return cfg.lr
    return cfg.lr * 0.5 * (1 + math.cos(math.pi * step / total))


# -- checkpoints ---------------------------------------------------------------------

def save_checkpoint(path, model: HLNet, state: AdamState | None = None, train_cfg: TrainConfig | None = None,
                    epoch: int = 0, loss: float = float("nan")) -> None:
    rec = {}
    header = {"model": model.cfg.to_dict(), "train": asdict(train_cfg) if train_cfg else None}
    rec["meta/config"] = encode_text(json.dumps(header, sort_keys=True))
    rec["meta/progress"] = np.array([state.step if state else 0, epoch, loss], dtype=np.float64)
    for name, p in model.state_dict().items():
        rec[f"param/{name}"] = p.detach().cpu().numpy()
    if state is not None:
        for name in state.m:
            rec[f"adam_m/{name}"] = state.m[name].cpu().numpy()
            rec[f"adam_v/{name}"] = state.v[name].cpu().numpy()
    write_container(path, rec)


def load_checkpoint(path):
    """Returns (model, adam state, train config or None, epoch, loss)."""
    rec = read_container(path)
    header = json.loads(decode_text(rec["meta/config"]))
    cfg = HLNetConfig(**header["model"])
    model = HLNet(cfg)
    params = {k[len("param/"):]: torch.from_numpy(np.array(v)) for k, v in rec.items() if k.startswith("param/")}
    dtype = next(iter(params.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(params)
    step, epoch, loss = rec["meta/progress"].tolist()
    state = AdamState(step=int(step))
    for k, v in rec.items():
        if k.startswith("adam_m/"):
            state.m[k[len("adam_m/"):]] = torch.from_numpy(np.array(v))
        elif k.startswith("adam_v/"):
            state.v[k[len("adam_v/"):]] = torch.from_numpy(np.array(v))
    train_cfg = TrainConfig(**header["train"]) if header.get("train") else None
    return model, state, train_cfg, int(epoch), loss


# -- loop ----------------------------------------------------------------------------

@dataclass
class TrainRun:
    model: HLNet
    state: AdamState
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    log_path: Path | None = None


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(model_cfg: HLNetConfig, data: list[SamplePair], train_cfg: TrainConfig, out_dir=None,
          resume=None, model: HLNet | None = None, init_seed: int | None = None) -> TrainRun:
    """Train on every crop of ``data``.

    Writes ``train_log.txt`` and one ``ckpt_epoch_XXXX.hlt`` per epoch to ``out_dir``
    when given. ``resume`` continues from a checkpoint written by a previous run.
    """
    start_epoch = 0
    if resume is not None:
        model, state, _, last_epoch, _ = load_checkpoint(resume)
        model_cfg = model.cfg
        start_epoch = last_epoch + 1
    else:
        if model is None:
            model = init_params(model_cfg, train_cfg.seed if init_seed is None else init_seed)
        state = AdamState()
    dtype = next(model.parameters()).dtype
    if train_cfg.crop % model_cfg.spatial_multiple:
        raise ValueError(f"crop {train_cfg.crop} not divisible by model multiple {model_cfg.spatial_multiple}")

    crops = [c for pair in data for c in crop_sampler(pair, train_cfg.crop, train_cfg.stride)]
    if not crops:
        raise ValueError("no training crops")
    x_all, y_all = stack_pairs(crops, model_cfg.gamma, dtype)
    per_epoch = math.ceil(len(crops) / train_cfg.batch)
    if train_cfg.max_steps is not None:
        total = train_cfg.max_steps
        n_epochs = math.ceil(total / per_epoch)
    else:
        n_epochs = train_cfg.epochs
        total = n_epochs * per_epoch

    run = TrainRun(model, state)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        run.log_path = out_dir / "train_log.txt"
        log_fh = open(run.log_path, "a" if resume else "w")
    last_ckpt = Path(resume) if resume is not None else None
    params = dict(model.named_parameters())
    t0 = time.perf_counter()
    try:
        for epoch in range(start_epoch, n_epochs):
            order = epoch_order(len(crops), train_cfg.seed, epoch)
            loss_val = float("nan")
            for b in range(per_epoch):
                if state.step >= total:
                    break
                idx = torch.from_numpy(order[b * train_cfg.batch:(b + 1) * train_cfg.batch])
                lr = lr_at(train_cfg, state.step, total)
                model.zero_grad(set_to_none=True)
                loss = mu_l1_loss(model(x_all[idx]), y_all[idx], train_cfg.mu)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise DivergenceError(f"loss became {loss_val} at step {state.step}", last_ckpt)
                loss.backward()
                optimizer_step(params, {k: p.grad for k, p in params.items()}, state, train_cfg, lr)
                run.losses.append(loss_val)
                run.lrs.append(lr)
                if log_fh:
                    log_fh.write(f"step={state.step}\tepoch={epoch}\tloss={loss_val:.8g}\t"
                                 f"lr={lr:.6g}\twall={time.perf_counter() - t0:.3f}\n")
            if out_dir is not None:
                last_ckpt = out_dir / f"ckpt_epoch_{epoch:04d}.hlt"
                save_checkpoint(last_ckpt, model, state, train_cfg, epoch, loss_val)
                run.checkpoints.append(last_ckpt)
            log.info("epoch %d done, step %d, loss %.5f", epoch, state.step, loss_val)
            if state.step >= total:
                break
    finally:
        if log_fh:
            log_fh.close()
    return run


# -- evaluation ----------------------------------------------------------------------

@torch.no_grad()
def predict(model: HLNet, pair: SamplePair) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    x = preprocess_frames(pair.bracket.stack().to(dtype), pair.bracket.exposure_times, model.cfg.gamma)
    return model(x[None])[0].clamp(0.0, 1.0)


def evaluate(model: HLNet, pairs: list[SamplePair], mu: float = MU) -> MetricsRecord:
    rec = MetricsRecord()
    for pair in pairs:
        pred = predict(model, pair)
        rec.add(pair.scene_id, psnr_mu(pred, pair.gt, mu), ssim_mu(pred, pair.gt, mu))
    return rec.sorted()


# -- ablations -----------------------------------------------------------------------

ABLATION_NAMES = {
    "full": "HLNet",
    "no_sceb": "HLNet-NoSCEB",
    "no_hlfdb": "HLNet-NoHLFDB",
    "ll": "HLNet-LL",
    "gg": "HLNet-GG",
    "wavelet": "HLNet-Wavelet",
}


def ablation_registry(name: str, base: HLNetConfig | None = None) -> HLNetConfig:
    """Config for one ablation row; ``base`` supplies everything the variant does not change."""
    key = name.strip().lower()
    if key == "esrt":
        raise UnsupportedVariantError(
            "variant 'esrt' (HLNet-ESRT) is not supported: it needs the external ESRT "
            f"high/low branch; valid variants: {', '.join(ABLATIONS)}")
    if key not in ABLATIONS:
        raise UnsupportedVariantError(f"unknown variant {name!r}; valid variants: {', '.join(ABLATIONS)}")
    base = base or HLNetConfig()
    return replace(base, ablation=key)
