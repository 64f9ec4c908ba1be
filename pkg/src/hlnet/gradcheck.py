"""Central finite-difference checks of autograd gradients.

Error metric: ||g_auto - g_fd|| / max(||g_auto|| + ||g_fd||, tiny), taken over
the checked entries of each tensor; the worst tensor is reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-5


@dataclass
class GradReport:
    name: str
    rel_error: float
    n_checked: int
    auto: torch.Tensor | None = None
    numeric: torch.Tensor | None = None


def _rel(a: torch.Tensor, b: torch.Tensor) -> float:
    den = (a.norm() + b.norm()).item()
    if den < 1e-30:
        return 0.0
    return (a - b).norm().item() / den


def fd_entries(fn, tensor: torch.Tensor, index: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. ``tensor.view(-1)[index]``, perturbing in place."""
    flat = tensor.data.view(-1)
    out = torch.empty(len(index), dtype=torch.float64)
    with torch.no_grad():
        for j, i in enumerate(index.tolist()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            out[j] = (up - down) / (2 * eps)
    return out


def check_gradients(fn, tensors: dict[str, torch.Tensor], max_per_tensor: int | None = None,
                    total_samples: int | None = None, seed: int = 0, eps: float = EPS) -> list[GradReport]:
    """Compare autograd against central differences for a scalar-valued ``fn``.

    ``tensors`` must be float64 leaves with ``requires_grad``. Either every entry is
    checked, at most ``max_per_tensor`` random entries per tensor, or
    ``total_samples`` entries drawn across all tensors.
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise ValueError(f"{name}: gradient checks need float64, got {t.dtype}")
    for t in tensors.values():
        t.grad = None
    fn().backward()
    gen = torch.Generator().manual_seed(seed)
    names = list(tensors)
    picks: dict[str, torch.Tensor] = {}
    if total_samples is not None:
        sizes = torch.tensor([tensors[n].numel() for n in names])
        flat = torch.randperm(int(sizes.sum()), generator=gen)[:total_samples]
        bounds = torch.cumsum(sizes, 0)
        owner = torch.searchsorted(bounds, flat, right=True)
        starts = bounds - sizes
        for k, n in enumerate(names):
            sel = flat[owner == k] - starts[k]
            if len(sel):
                picks[n] = sel
    else:
        for n in names:
            size = tensors[n].numel()
            if max_per_tensor is None or size <= max_per_tensor:
                picks[n] = torch.arange(size)
            else:
                picks[n] = torch.randperm(size, generator=gen)[:max_per_tensor]
    reports = []
    for n, idx in picks.items():
        t = tensors[n]
        auto = (t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1)[idx].double()
        num = fd_entries(fn, t, idx, eps)
        reports.append(GradReport(n, _rel(auto, num), len(idx), auto, num))
    return reports


def module_gradcheck(module: torch.nn.Module, inputs: list[torch.Tensor], loss_fn=None,
                     max_per_tensor: int | None = 64, total_samples: int | None = None,
                     seed: int = 0, eps: float = EPS) -> list[GradReport]:
    """Check gradients of a module's output w.r.t. its inputs and all its parameters.

    The scalar is a fixed random projection of the output unless ``loss_fn`` is given.
    """
    module = module.double()
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    if loss_fn is None:
        with torch.no_grad():
            out_shape = module(*inputs).shape
        weights = torch.randn(out_shape, generator=torch.Generator().manual_seed(seed + 1), dtype=torch.float64)

        def loss_fn(out):
            return (out * weights).sum()

    def fn():
        return loss_fn(module(*inputs))

    tensors = {f"input{i}": x for i, x in enumerate(inputs)}
    tensors.update({name: p for name, p in module.named_parameters()})
    return check_gradients(fn, tensors, max_per_tensor=max_per_tensor,
                           total_samples=total_samples, seed=seed, eps=eps)


def randomize_(module: torch.nn.Module, scale: float = 0.3, seed: int = 0) -> torch.nn.Module:
    """Overwrite every parameter with N(0, scale^2) noise so no path is switched off."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module


def worst(reports: list[GradReport]) -> float:
    return max((r.rel_error for r in reports), default=0.0)


def pooled(reports: list[GradReport]) -> float:
    """Relative error of all checked entries taken together as one vector.

    Better conditioned than ``worst`` when single sampled entries have near-zero
    gradients, where round-off in the differences dominates the per-tensor ratio.
    """
    if not reports:
        return 0.0
    auto = torch.cat([r.auto for r in reports])
    num = torch.cat([r.numeric for r in reports])
    return _rel(auto, num)
