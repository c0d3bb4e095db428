"""Central-difference verification of autograd gradients."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_group: dict = field(default_factory=dict)  # group -> max relative error
    n_coords: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def check_function(loss_fn: Callable[[], torch.Tensor], params: dict, eps: float = 1e-4,
                   coords_per_param: int = 4, seed: int = 0, min_abs_grad: float = 0.0) -> GradCheckResult:
    """Compare ``loss_fn`` gradients with central differences.

    ``params`` maps names to leaf tensors (double precision) that ``loss_fn``
    reads. A handful of coordinates per tensor is sampled.

    The central difference carries roundoff of roughly ``ulp(loss) / eps``,
    about 1e-11 at eps=1e-4, so coordinates whose true gradient is of that
    order cannot meet a relative tolerance. ``min_abs_grad`` restricts
    sampling to coordinates with ``|analytic| >= min_abs_grad``; when a
    tensor has none, its largest-gradient coordinates are used instead.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-5, 1e-3]")
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: p.grad.detach().clone() for name, p in params.items()}
    rng = random.Random(seed)
    result = GradCheckResult(0.0)
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            g = analytic[name].view(-1)
            candidates = range(flat.numel())
            if p.dim() == 2 and "emb" in name:
                # embedding tables: sample among rows the loss actually reads
                rows = analytic[name].abs().sum(1).nonzero().flatten().tolist()
                candidates = [r * p.shape[1] + c for r in rows for c in range(p.shape[1])]
            if min_abs_grad > 0:
                idx = torch.as_tensor(list(candidates), dtype=torch.long)
                mag = g[idx].abs()
                strong = idx[mag >= min_abs_grad]
                if strong.numel() == 0:
                    strong = idx[mag.argsort(descending=True)[:coords_per_param]]
                candidates = strong.tolist()
            picks = rng.sample(candidates, min(coords_per_param, len(candidates)))
            worst = 0.0
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                err = rel_error(g[i].item(), (up - down) / (2 * eps))
                worst = max(worst, err)
                result.n_coords += 1
            group = name.split(".")[0]
            result.per_group[group] = max(result.per_group.get(group, 0.0), worst)
            result.max_rel_error = max(result.max_rel_error, worst)
    return result


def grad_check(model, source, target, eps: float = 1e-4, coords_per_param: int = 4,
               groups: Optional[Iterable[str]] = None, seed: int = 0,
               min_abs_grad: float = 0.0) -> GradCheckResult:
    """Gradient check of the sequence loss on one example.

    The model is switched to double precision and eval mode (no dropout).
    ``groups`` restricts the check to parameters whose top-level module name
    is listed, e.g. ``["gate"]``; the others are frozen.
    """
    model.double().eval()
    wanted = set(groups) if groups is not None else None
    params = {}
    for name, p in model.named_parameters():
        keep = wanted is None or name.split(".")[0] in wanted
        p.requires_grad_(keep)
        if keep:
            params[name] = p
    try:
        return check_function(lambda: model.sequence_nll(source, target), params, eps,
                              coords_per_param, seed, min_abs_grad)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
