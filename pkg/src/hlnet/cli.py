"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 training divergence.
Settings resolve as built-in defaults < ``--config`` file (key=value, '#' comments) < flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from hlnet import report
from hlnet.blocks import HLFDBConfig
from hlnet.container import ContainerError, read_container, write_container
from hlnet.freqops import split_high_low
from hlnet.model import HLNetConfig, count_params
from hlnet.simdata import DegradeConfig, make_dataset, read_dataset, read_manifest, write_dataset
from hlnet.training import (
    ABLATION_NAMES,
    DivergenceError,
    TrainConfig,
    UnsupportedVariantError,
    ablation_registry,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from hlnet.metrics import MetricsRecord, psnr_mu, ssim_mu

log = logging.getLogger("hlnet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- config resolution ---------------------------------------------------------------

GEN_DEFAULTS = {
    "scenes": 8, "seed": 0, "size": "16", "channels": 4, "frames": 5, "ratios": "1,4,16,64,256",
    "noise": 2e-3, "shot_gain": 1e-3, "blur": 0.0, "downscale": 4, "saturation": 1.0, "out": None,
}
MODEL_DEFAULTS = {
    "width": 16, "n_scales": 3, "n_heads": 2, "pool_k": 2, "n_dense": 4, "n_sceb": 1, "n_hlfdb": 1,
    "alignment": "identity",
}
TRAIN_DEFAULTS = {
    "data": None, "out": None, "variant": "full", "epochs": 1, "max_steps": None, "lr": 2e-4,
    "weight_decay": 1e-2, "batch": 4, "crop": 64, "stride": 32, "seed": 0, "mu": 5000.0,
    "schedule": "cosine", **MODEL_DEFAULTS,
}
EVAL_DEFAULTS = {"data": None, "out": None, "checkpoint": None, "pred": None, "pred_key": "pred", "mu": 5000.0}
INFER_DEFAULTS = {"data": None, "out": None, "checkpoint": None, "mu": 5000.0}
ABLATE_DEFAULTS = {**TRAIN_DEFAULTS, "variants": ",".join(ABLATION_NAMES)}
DECOMPOSE_DEFAULTS = {"input": None, "name": None, "pool_k": 2, "out": None, "verify": False}

_INT_KEYS = {"max_steps"}


def parse_config_file(path) -> dict[str, str]:
    try:
        return read_manifest(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc


def _coerce(key, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int) or key in _INT_KEYS:
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        for k, v in parse_config_file(args.config).items():
            k = k.replace("-", "_")
            if k not in defaults:
                raise UsageError(f"unknown key {k!r} in config file")
            cfg[k] = _coerce(k, v, defaults[k])
    for k, v in vars(args).items():
        if k in defaults and v is not None:
            cfg[k] = v
    for k in ("out",):
        if k in cfg and cfg[k] is None:
            raise UsageError(f"--{k} is required")
    return cfg


def _blob_hash(path: Path) -> str:
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_hash(paths) -> str:
    files = []
    for p in paths:
        p = Path(p)
        files += sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    lines = "".join(f"{_blob_hash(f)} {f.name}\n" for f in files)
    return hashlib.sha1(lines.encode()).hexdigest()


def write_run_manifest(out_dir: Path, command: str, cfg: dict, artifacts, inputs=()) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "artifacts": sorted(str(Path(a).relative_to(out_dir)) for a in artifacts),
        "input_hash": input_hash(inputs),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# -- helpers ---------------------------------------------------------------------------

def _parse_size(s: str) -> tuple[int, int]:
    parts = str(s).lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"bad --size {s!r}; use N or HxW") from exc
    if len(dims) == 1:
        dims *= 2
    if len(dims) != 2 or min(dims) < 1:
        raise UsageError(f"bad --size {s!r}")
    return dims[0], dims[1]


def _parse_floats(s: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in str(s).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad {flag} {s!r}") from exc


def _load_data(path):
    path = Path(path) if path else None
    if path is None or not (path / "manifest.txt").is_file():
        raise UsageError(f"--data must be a dataset directory with manifest.txt, got {path}")
    pairs = read_dataset(path)
    if not pairs:
        raise UsageError(f"dataset {path} lists no scenes")
    return pairs


def _model_config(cfg: dict, pairs) -> HLNetConfig:
    frames = pairs[0].bracket.frames
    c_raw, h = frames[0].data.shape[1], frames[0].data.shape[2]
    upscale = pairs[0].gt.shape[-2] // h
    hl = HLFDBConfig(width=cfg["width"], pool_k=cfg["pool_k"], n_dense_layers=cfg["n_dense"],
                     n_scales=cfg["n_scales"], n_heads=cfg["n_heads"])
    base = HLNetConfig(n_frames=len(frames), c_raw=c_raw, width=cfg["width"], n_sceb=cfg["n_sceb"],
                       n_hlfdb=cfg["n_hlfdb"], hlfdb_cfg=hl, upscale=upscale, alignment_mode=cfg["alignment"])
    return ablation_registry(cfg["variant"], base)


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"], epochs=cfg["epochs"], crop=cfg["crop"],
                       stride=cfg["stride"], batch=cfg["batch"], mu=cfg["mu"], seed=cfg["seed"],
                       schedule=cfg["schedule"], max_steps=cfg["max_steps"])


def _run_training(cfg: dict, pairs, out: Path):
    model_cfg = _model_config(cfg, pairs)
    train_cfg = _train_config(cfg)
    dims = pairs[0].bracket.frames[0].data.shape[-2:]
    if train_cfg.crop > min(dims):
        raise UsageError(f"--crop {train_cfg.crop} exceeds the data frame size {tuple(dims)}")
    if train_cfg.crop % model_cfg.spatial_multiple:
        raise UsageError(f"--crop {train_cfg.crop} must be a multiple of {model_cfg.spatial_multiple}")
    run = train(model_cfg, pairs, train_cfg, out_dir=out)
    final = out / "final.hlt"
    save_checkpoint(final, run.model, run.state, train_cfg, len(run.checkpoints) - 1,
                    run.losses[-1] if run.losses else float("nan"))
    report.plot_loss_curve(run.losses, out / "loss_curve.png", title=ABLATION_NAMES[model_cfg.ablation])
    return run, final


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve(args, GEN_DEFAULTS)
    ratios = _parse_floats(cfg["ratios"], "--ratios")
    if len(ratios) != cfg["frames"]:
        raise UsageError(f"--ratios has {len(ratios)} values but {cfg['frames']} frames were requested")
    h, w = _parse_size(cfg["size"])
    if cfg["scenes"] < 1:
        raise UsageError("--scenes must be >= 1")
    try:
        dcfg = DegradeConfig(exposure_ratios=ratios, read_noise_sigma=cfg["noise"], shot_noise_gain=cfg["shot_gain"],
                             blur_sigma=cfg["blur"], downscale=cfg["downscale"],
                             saturation_level=cfg["saturation"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if min(h, w) * dcfg.downscale < 8:
        raise UsageError("scene size too small: ground truth must be at least 8x8")
    out = Path(cfg["out"])
    pairs = make_dataset(cfg["scenes"], dcfg, (cfg["channels"], h, w))
    paths = write_dataset(pairs, out, dcfg)
    write_run_manifest(out, "gen-data", cfg, [*paths, out / "manifest.txt"])
    print(f"wrote {len(paths)} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_DEFAULTS)
    pairs = _load_data(cfg["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    run, final = _run_training(cfg, pairs, out)
    artifacts = [*run.checkpoints, final, run.log_path, out / "loss_curve.png"]
    write_run_manifest(out, "train", cfg, artifacts, [cfg["data"]])
    print(f"trained {len(run.losses)} steps, final loss {run.losses[-1]:.6f}, checkpoint {final}")
    return EXIT_OK


def _write_metrics(rec: MetricsRecord, out: Path) -> list[Path]:
    tsv = out / "metrics.tsv"
    tsv.write_text(rec.to_tsv())
    fig = out / "metrics.png"
    report.plot_metrics(rec, fig)
    return [tsv, fig]


def cmd_eval(args) -> int:
    cfg = resolve(args, EVAL_DEFAULTS)
    pairs = _load_data(cfg["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if bool(cfg["checkpoint"]) == bool(cfg["pred"]):
        raise UsageError("give exactly one of --checkpoint or --pred")
    inputs = [cfg["data"]]
    if cfg["checkpoint"]:
        model, *_ = load_checkpoint(cfg["checkpoint"])
        rec = evaluate(model, pairs, cfg["mu"])
        inputs.append(cfg["checkpoint"])
    else:
        pred_dir = Path(cfg["pred"])
        rec = MetricsRecord()
        for pair in pairs:
            records = read_container(pred_dir / f"scene_{pair.scene_id}.hlt")
            if cfg["pred_key"] not in records:
                raise UsageError(f"prediction file for {pair.scene_id} has no tensor {cfg['pred_key']!r}")
            pred = torch.from_numpy(np.array(records[cfg["pred_key"]])).reshape(pair.gt.shape)
            rec.add(pair.scene_id, psnr_mu(pred, pair.gt, cfg["mu"]), ssim_mu(pred, pair.gt, cfg["mu"]))
        rec = rec.sorted()
        inputs.append(pred_dir)
    artifacts = _write_metrics(rec, out)
    write_run_manifest(out, "eval", cfg, artifacts, inputs)
    sys.stdout.write(rec.to_tsv())
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = resolve(args, INFER_DEFAULTS)
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    pairs = _load_data(cfg["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model, *_ = load_checkpoint(cfg["checkpoint"])
    artifacts = []
    for pair in pairs:
        pred = predict(model, pair)
        path = out / f"scene_{pair.scene_id}.hlt"
        write_container(path, {"pred": pred.numpy()})
        png = out / f"scene_{pair.scene_id}.png"
        report.write_png(png, report.tonemapped_preview(pred, cfg["mu"]))
        artifacts += [path, png]
        log.info("scene %s: %s -> %s", pair.scene_id, tuple(pair.bracket.frames[0].data.shape[1:]),
                 tuple(pred.shape))
    (out / "manifest.txt").write_text(f"ids={','.join(p.scene_id for p in pairs)}\n")
    write_run_manifest(out, "infer", cfg, [*artifacts, out / "manifest.txt"], [cfg["data"], cfg["checkpoint"]])
    print(f"wrote {len(pairs)} predictions to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve(args, ABLATE_DEFAULTS)
    variants = [v.strip() for v in cfg["variants"].split(",") if v.strip()]
    for v in variants:
        ablation_registry(v)
    pairs = _load_data(cfg["data"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows, artifacts = [], []
    for v in variants:
        sub = out / v
        sub.mkdir(exist_ok=True)
        run, final = _run_training({**cfg, "variant": v}, pairs, sub)
        rec = evaluate(run.model, pairs, cfg["mu"])
        artifacts += [final, sub / "loss_curve.png", run.log_path, *run.checkpoints]
        rows.append({"variant": v, "model": ABLATION_NAMES[v], "params": count_params(run.model),
                     "final_loss": run.losses[-1], "psnr_mu": rec.psnr_mu, "ssim_mu": rec.ssim_mu})
    lines = ["variant\tmodel\tparams\tfinal_loss\tpsnr_mu\tssim_mu"]
    lines += [f"{r['variant']}\t{r['model']}\t{r['params']}\t{r['final_loss']:.6f}\t{r['psnr_mu']:.4f}\t"
              f"{r['ssim_mu']:.6f}" for r in rows]
    table = out / "ablation.tsv"
    table.write_text("\n".join(lines) + "\n")
    report.plot_ablation(rows, out / "ablation.png")
    write_run_manifest(out, "ablate", cfg, [table, out / "ablation.png", *artifacts], [cfg["data"]])
    print("\n".join(lines))
    return EXIT_OK


def cmd_decompose(args) -> int:
    cfg = resolve(args, DECOMPOSE_DEFAULTS)
    if not cfg["input"] or not cfg["name"]:
        raise UsageError("--input and --name are required")
    records = read_container(cfg["input"])
    if cfg["name"] not in records:
        raise UsageError(f"tensor {cfg['name']!r} not found; available: {', '.join(records)}")
    arr = np.array(records[cfg["name"]])
    if not 2 <= arr.ndim <= 4:
        raise UsageError(f"tensor {cfg['name']!r} has {arr.ndim} dims; need 2 to 4")
    f = torch.from_numpy(arr).reshape((1,) * (4 - arr.ndim) + arr.shape)
    try:
        split = split_high_low(f, cfg["pool_k"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    lead = arr.shape[:-2]

    def back(t):
        return t.reshape(lead + t.shape[-2:]).numpy()

    cont = out / "decompose.hlt"
    write_container(cont, {"high": back(split.high), "low": back(split.low), "low_up": back(split.low_up)})
    planes = [t[0].numpy() for t in (f, split.low_up, split.high)]
    report.write_png(out / "high.png", report.signed_preview(planes[2]))
    report.write_png(out / "low.png", report.range_preview(split.low[0].numpy()))
    report.plot_decomposition(*planes, out / "decompose.png")
    write_run_manifest(out, "decompose", cfg,
                       [cont, out / "high.png", out / "low.png", out / "decompose.png"], [cfg["input"]])
    if cfg["verify"]:
        err = (f - (split.high + split.low_up)).abs().max().item()
        print(f"max_abs_recombination_error\t{err:.3e}")
        if err > 1e-6:
            print("recombination check FAILED", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_selftest(args) -> int:
    from hlnet.selftest import run_checks

    results = run_checks(break_dwt=args.break_dwt)
    print("check\tstatus\terror\ttolerance\tseconds")
    for r in results:
        print(f"{r.name}\t{'PASS' if r.passed else 'FAIL'}\t{r.error:.3e}\t{r.tolerance:.0e}\t{r.seconds:.2f}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--schedule", choices=["cosine", "constant"])
    p.add_argument("--width", type=int)
    p.add_argument("--n-scales", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--pool-k", type=int)
    p.add_argument("--n-dense", type=int)
    p.add_argument("--n-sceb", type=int)
    p.add_argument("--n-hlfdb", type=int)
    p.add_argument("--alignment", choices=["identity", "translation"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hlnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic bracket dataset")
    p.add_argument("--config")
    p.add_argument("--scenes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", help="bracket frame size, N or HxW")
    p.add_argument("--channels", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--ratios", help="comma-separated exposure ratios, first must be 1")
    p.add_argument("--noise", type=float, help="read-noise sigma")
    p.add_argument("--shot-gain", type=float)
    p.add_argument("--blur", type=float, help="blur sigma for the two longest frames")
    p.add_argument("--downscale", type=int)
    p.add_argument("--saturation", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--config")
    _add_train_flags(p)
    p.add_argument("--variant")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR-mu / SSIM-mu table for a checkpoint or prediction set")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--pred", help="directory of scene_<id>.hlt prediction files")
    p.add_argument("--pred-key")
    p.add_argument("--mu", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="restore every bracket of a dataset")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--mu", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train and evaluate several ablation variants")
    p.add_argument("--config")
    _add_train_flags(p)
    p.add_argument("--variants", help="comma-separated: " + ",".join(ABLATION_NAMES))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("decompose", help="high/low frequency maps of a stored tensor")
    p.add_argument("--config")
    p.add_argument("--input")
    p.add_argument("--name")
    p.add_argument("--pool-k", type=int)
    p.add_argument("--out")
    p.add_argument("--verify", action="store_true", default=None)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("selftest", help="fast invariant checks")
    p.add_argument("--break-dwt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (UsageError, UnsupportedVariantError) as exc:
        print(f"hlnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"hlnet {args.command}: training diverged: {exc}; last checkpoint: {exc.last_checkpoint}",
              file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ContainerError, ValueError, RuntimeError) as exc:
        print(f"hlnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
