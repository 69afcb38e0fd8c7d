"""Finite-difference verification of the bilevel meta-gradient on a tiny model."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .losses import LossWeights
from .metaengine import (
    TaskBatch,
    TrainConfig,
    discriminator_side,
    generator_side,
    meta_gradients,
    meta_objective_value,
)
from .netcore import HeteroSegNet, NetConfig
from .tasks import enumerate_tasks

TINY_NET = NetConfig(
    num_modalities=2,
    channels=(1,),
    bottleneck_channels=1,
    kernel_size=1,
    bias=True,
    disc_hidden_mult=2,
    use_discriminator=True,
)


@dataclass
class GradcheckResult:
    n_params: int
    max_rel_error: float
    max_abs_error: float
    worst: str
    tolerance: float
    seconds: float
    skipped: bool = False
    per_param: dict | None = None

    @property
    def passed(self) -> bool:
        return self.skipped or self.max_rel_error < self.tolerance

    def lines(self) -> list[str]:
        if self.skipped:
            return ["gradcheck: SKIPPED (first-order approximation is not an exact meta-gradient)"]
        status = "PASS" if self.passed else "FAIL"
        return [
            f"gradcheck: {status} params={self.n_params} max_rel_error={self.max_rel_error:.3e} "
            f"max_abs_error={self.max_abs_error:.3e} worst={self.worst} tol={self.tolerance:g} "
            f"time={self.seconds:.1f}s"
        ]


def _tiny_batch(rng: np.random.Generator, mask, dims, n: int) -> TaskBatch:
    m = len(mask)
    vols = [torch.from_numpy(rng.standard_normal((n, 1) + dims)) if bit else None for bit in mask]
    field = rng.standard_normal((n,) + dims)
    wt = field > -0.3
    tc = wt & (field > 0.2)
    et = tc & (field > 0.8)
    labels = torch.from_numpy(np.stack([wt, tc, et], axis=1).astype(np.float64))
    t_real = torch.tensor([list(mask)] * n, dtype=torch.float64)
    return TaskBatch(tuple(mask), vols, labels, t_real)


def tiny_problem(seed: int = 0, dims=(2, 2, 2), net: NetConfig = TINY_NET, alpha: float = 0.3, variant: str = "full"):
    """Model, log-alpha, tasks and full batches for a double-precision check."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    cfg = TrainConfig(alpha_init=alpha, seed=seed, variant=variant, meta_batch_tasks=2, weights=LossWeights())
    net = replace(net, use_discriminator=cfg.adversarial)
    model = HeteroSegNet(net).double()
    # larger-than-default init keeps every gradient component well above round-off
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.from_numpy(rng.uniform(-0.9, 0.9, p.shape)))
    log_alpha = torch.nn.Parameter(torch.tensor(np.log(alpha), dtype=torch.float64)) if cfg.bilevel else None
    masks = enumerate_tasks(net.num_modalities)
    tasks = [_tiny_batch(rng, m, dims, 1) for m in masks]
    fulls = [_tiny_batch(rng, (1,) * net.num_modalities, dims, 1) for _ in masks]
    return model, log_alpha, tasks, fulls, cfg


def finite_difference_meta_gradient(model, log_alpha, tasks, fulls, cfg, h: float = 1e-6) -> dict[str, np.ndarray]:
    """Central differences of the scalar meta-objectives, one component at a time.

    Under the joint objective every component is differenced on the summed
    outer loss. Under the split objective generator-side parameters use the
    outer generator loss and discriminator parameters their own loss.
    """
    gen_names = set(generator_side(model, log_alpha))
    out = {}
    for name, p in {**generator_side(model, log_alpha), **discriminator_side(model)}.items():
        which = 0 if name in gen_names else 1
        g = np.zeros(p.shape)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            plus = meta_objective_value(model, log_alpha, tasks, fulls, cfg)[which]
            flat[i] = orig - h
            minus = meta_objective_value(model, log_alpha, tasks, fulls, cfg)[which]
            flat[i] = orig
            g.reshape(-1)[i] = (plus - minus) / (2 * h)
        out[name] = g
    return out


def run_gradcheck(
    seed: int = 0, tolerance: float = 1e-4, first_order: bool = False, floor: float = 1e-6, objective: str = "joint"
) -> GradcheckResult:
    """Compare analytic meta-gradients with central differences.

    Relative error per component is ``|a - f| / max(|a|, |f|, floor)``.
    """
    if first_order:
        return GradcheckResult(0, float("nan"), float("nan"), "", tolerance, 0.0, skipped=True)
    t0 = time.perf_counter()
    model, log_alpha, tasks, fulls, cfg = tiny_problem(seed)
    cfg = replace(cfg, objective=objective)
    analytic, _ = meta_gradients(model, log_alpha, tasks, fulls, cfg)
    numeric = finite_difference_meta_gradient(model, log_alpha, tasks, fulls, cfg)
    worst_rel, worst_abs, worst = 0.0, 0.0, ""
    per_param = {}
    n = 0
    for name, fd in numeric.items():
        a = analytic[name].detach().numpy().reshape(fd.shape)
        abs_err = np.abs(a - fd)
        rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor)
        per_param[name] = float(rel.max())
        n += fd.size
        if rel.max() > worst_rel:
            worst_rel, worst = float(rel.max()), name
        worst_abs = max(worst_abs, float(abs_err.max()))
    return GradcheckResult(n, worst_rel, worst_abs, worst, tolerance, time.perf_counter() - t0, per_param=per_param)
