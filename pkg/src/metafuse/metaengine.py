"""Bilevel meta-training over partial-modality tasks.

One meta-update samples a batch of modality-subset tasks. For each task the
generator parameters take ``inner_steps`` gradient steps of size ``alpha``
on the generator loss of the partial-modality patients; the adapted
generator is then scored on full-modality patients. Gradients of the summed
outer losses flow back through the inner steps into the generator
initialization, the decoder, the discriminator and ``log(alpha)``.

With ``objective="joint"`` (the default) every meta-parameter descends one
scalar, the summed outer loss ``L_E + disc_scale * L_dis`` on full-modality
data. ``objective="split"`` runs a two-player game instead: generator-side
parameters (encoder, fusion, decoder, ``log(alpha)``) descend the summed
outer generator loss, while the discriminator descends its own loss
collected on both the partial-modality patients of each task and the
full-modality outer batch, so it sees real absence patterns.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .losses import LossWeights, discriminator_loss, generator_loss
from .masks import ModalityMask, is_full, mask_str
from .netcore import HeteroSegNet, NetConfig, decode, discriminate, forward_generator, save_checkpoint
from .synthvol import DatasetSplit, PatientSample
from .tasks import MetaBatch, Task, sample_full_batch, sample_meta_batch

log = logging.getLogger(__name__)

# variant -> (bilevel inner/outer loop, adversarial branch)
VARIANTS = {
    "mDrop": (False, False),
    "+GAN": (False, True),
    "+MetaL": (True, False),
    "full": (True, True),
}

METRICS_COLUMNS = ("step", "task_mask", "L_E", "L_seg", "L_adv", "L_dis", "L_full", "alpha")
OBJECTIVES = ("joint", "split")


@dataclass
class TrainConfig:
    outer_lr: float = 5e-4
    meta_batch_tasks: int = 8
    per_task_batch: int = 1
    inner_steps: int = 1
    epochs: int = 10
    seed: int = 0
    alpha_init: float = 0.01
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    first_order: bool = False
    variant: str = "full"
    objective: str = "joint"
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        for name in ("outer_lr", "meta_batch_tasks", "per_task_batch", "inner_steps", "epochs", "alpha_init"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def bilevel(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def adversarial(self) -> bool:
        return VARIANTS[self.variant][1]


@dataclass
class TaskBatch:
    mask: ModalityMask
    volumes: list  # per modality slot: (N, 1, D, H, W) tensor or None
    labels: torch.Tensor  # (N, 3, D, H, W)
    t_real: torch.Tensor  # (N, M)


def make_batch(samples: Sequence[PatientSample], mask: ModalityMask, dtype=torch.float32) -> TaskBatch:
    if not samples:
        raise ValueError("empty batch")
    vols = []
    for j, bit in enumerate(mask):
        if bit:
            vols.append(torch.from_numpy(np.stack([s.volumes[j] for s in samples]))[:, None].to(dtype))
        else:
            vols.append(None)
    labels = torch.from_numpy(np.stack([s.labels for s in samples])).to(dtype)
    t_real = torch.tensor([list(mask)] * len(samples), dtype=dtype)
    return TaskBatch(tuple(mask), vols, labels, t_real)


@dataclass
class LossTerms:
    L_E: torch.Tensor
    seg: torch.Tensor
    adv: torch.Tensor
    dis: torch.Tensor  # already multiplied by disc_scale
    probs: torch.Tensor


def split_params(model: HeteroSegNet) -> dict[str, dict[str, torch.Tensor]]:
    """Parameter blocks keyed ``generator`` (theta_g), ``decoder`` and ``discriminator`` (phi_d)."""
    return model.param_groups()


def forward_losses(model: HeteroSegNet, params, batch: TaskBatch, weights: LossWeights) -> LossTerms:
    fused = forward_generator(model.generator, batch.volumes, batch.mask, params["generator"])
    probs = decode(model.decoder, fused, params["decoder"])
    d_hat = None
    if model.discriminator is not None:
        d_hat = discriminate(model.discriminator, fused[-1], params["discriminator"])
    gen = generator_loss(probs, batch.labels, d_hat, weights)
    if d_hat is None:
        dis = gen.total.new_zeros(())
    else:
        dis = discriminator_loss(d_hat, batch.t_real, weights.disc_scale)
    return LossTerms(gen.total, gen.seg, gen.adv, dis, probs)


def inner_loss(model: HeteroSegNet, params, batch: TaskBatch, weights: LossWeights):
    """Task loss on partial-modality data: ``(L_E, terms)``; ``L_E`` drives adaptation."""
    terms = forward_losses(model, params, batch, weights)
    return terms.L_E, terms


def _check_finite(grads: dict[str, torch.Tensor], what: str) -> None:
    bad = [name for name, g in grads.items() if g is not None and not torch.isfinite(g).all()]
    if bad:
        norms = {name: float(g.norm()) for name, g in grads.items() if g is not None}
        raise FloatingPointError(f"non-finite {what} in {bad}; gradient norms: {norms}")


def _adapt(model, params, alpha, batch, weights, steps, first_order):
    theta = dict(params["generator"])
    first = None
    for _ in range(steps):
        loss, terms = inner_loss(model, {**params, "generator": theta}, batch, weights)
        if first is None:
            first = terms
        names = list(theta)
        grads = torch.autograd.grad(
            loss,
            [theta[n] for n in names],
            create_graph=not first_order,
            retain_graph=True,
            allow_unused=True,
        )
        grads = {n: (torch.zeros_like(theta[n]) if g is None else g) for n, g in zip(names, grads)}
        _check_finite(grads, "inner gradient")
        if first_order:
            grads = {n: g.detach() for n, g in grads.items()}
        theta = {n: theta[n] - alpha * grads[n] for n in names}
    return theta, first


def inner_adapt(
    model: HeteroSegNet,
    params,
    alpha,
    batch: TaskBatch,
    weights: LossWeights,
    steps: int = 1,
    first_order: bool = False,
) -> dict[str, torch.Tensor]:
    """Adapted generator parameters ``theta_g - alpha * grad L_E`` after ``steps`` steps.

    The graph through each step is kept (unless ``first_order``) so the outer
    loss can be differentiated with respect to the pre-adaptation parameters
    and ``alpha``. Downstream parameters are only read.
    """
    return _adapt(model, params, alpha, batch, weights, steps, first_order)[0]


def outer_loss(model: HeteroSegNet, params, full_batch: TaskBatch, weights: LossWeights) -> LossTerms:
    """Generator and discriminator losses of (adapted) parameters on full-modality data."""
    if not is_full(full_batch.mask):
        raise ValueError(f"outer loss needs full-modality data, got mask {mask_str(full_batch.mask)}")
    return forward_losses(model, params, full_batch, weights)


@dataclass
class TaskObjective:
    """Per-task contribution to the meta-objective(s).

    Under the joint objective ``gen`` and ``dis`` are the same tensor.
    """

    gen: torch.Tensor  # minimized by theta_g, theta_dec, log_alpha
    dis: torch.Tensor  # minimized by theta_dis
    inner: LossTerms
    outer: Optional[LossTerms]

    @property
    def joint(self) -> bool:
        return self.gen is self.dis

    @property
    def value(self) -> torch.Tensor:
        return self.gen if self.joint else self.gen + self.dis


def task_objective(
    model: HeteroSegNet,
    params,
    log_alpha: Optional[torch.Tensor],
    task: TaskBatch,
    full: TaskBatch,
    cfg: TrainConfig,
) -> TaskObjective:
    w = cfg.weights
    if cfg.bilevel:
        alpha = torch.exp(log_alpha)
        theta_star, inner = _adapt(model, params, alpha, task, w, cfg.inner_steps, cfg.first_order)
        outer = outer_loss(model, {**params, "generator": theta_star}, full, w)
        if cfg.objective == "joint":
            total = outer.L_E + outer.dis
            return TaskObjective(total, total, inner, outer)
        return TaskObjective(outer.L_E, inner.dis + outer.dis, inner, outer)
    inner = forward_losses(model, params, task, w)
    outer = forward_losses(model, params, full, w)
    if cfg.objective == "joint":
        total = inner.L_E + inner.dis + outer.L_E + outer.dis
        return TaskObjective(total, total, inner, outer)
    return TaskObjective(inner.L_E + outer.L_E, inner.dis + outer.dis, inner, outer)


def generator_side(model: HeteroSegNet, log_alpha: Optional[torch.Tensor]) -> dict[str, torch.Tensor]:
    named = {f"generator.{k}": v for k, v in model.generator.named_parameters()}
    named.update({f"decoder.{k}": v for k, v in model.decoder.named_parameters()})
    if log_alpha is not None:
        named["meta.log_alpha"] = log_alpha
    return named


def discriminator_side(model: HeteroSegNet) -> dict[str, torch.Tensor]:
    if model.discriminator is None:
        return {}
    return {f"discriminator.{k}": v for k, v in model.discriminator.named_parameters()}


def meta_gradients(
    model: HeteroSegNet,
    log_alpha: Optional[torch.Tensor],
    tasks: Sequence[TaskBatch],
    fulls: Sequence[TaskBatch],
    cfg: TrainConfig,
    on_task: Optional[Callable[[int, TaskBatch, TaskObjective], None]] = None,
) -> tuple[dict[str, torch.Tensor], float]:
    """Accumulate per-task meta-gradients in a fixed task order.

    Returns ``(grads, total)`` where ``grads`` maps every trainable name to its
    gradient and ``total`` is the summed meta-objective value.
    """
    if len(tasks) != len(fulls):
        raise ValueError("need one full-modality batch per task")
    params = split_params(model)
    gen_side = generator_side(model, log_alpha)
    dis_side = discriminator_side(model)
    grads = {n: torch.zeros_like(p) for n, p in {**gen_side, **dis_side}.items()}
    total = 0.0
    for i, (task, full) in enumerate(zip(tasks, fulls)):
        obj = task_objective(model, params, log_alpha, task, full, cfg)
        if obj.joint:
            blocks = [(obj.gen, {**gen_side, **dis_side})]
        else:
            blocks = [(obj.gen, gen_side), (obj.dis, dis_side)]
        blocks = [(loss, named) for loss, named in blocks if named]
        for k, (loss, named) in enumerate(blocks):
            names = list(named)
            g = torch.autograd.grad(loss, [named[n] for n in names], retain_graph=k < len(blocks) - 1, allow_unused=True)
            for n, gi in zip(names, g):
                if gi is not None:
                    grads[n] += gi
        total += float(obj.value.detach())
        if on_task is not None:
            on_task(i, task, obj)
    _check_finite(grads, "meta-gradient")
    return grads, total


def meta_objective_value(model, log_alpha, tasks, fulls, cfg: TrainConfig) -> tuple[float, float]:
    """Values of the (generator-side, discriminator-side) objectives, no gradients."""
    params = split_params(model)
    g_total = d_total = 0.0
    for task, full in zip(tasks, fulls):
        with torch.enable_grad():
            obj = task_objective(model, params, log_alpha, task, full, cfg)
        g_total += float(obj.gen.detach())
        d_total += float(obj.dis.detach())
    return g_total, d_total


class MetaLearner:
    """Owns the model, ``log(alpha)`` and the outer optimizer."""

    def __init__(self, net_cfg: NetConfig, cfg: TrainConfig, dtype=torch.float32):
        net_cfg = NetConfig(**{**net_cfg.to_dict(), "channels": tuple(net_cfg.channels), "use_discriminator": cfg.adversarial})
        self.cfg = cfg
        self.net_cfg = net_cfg
        self.dtype = dtype
        torch.manual_seed(cfg.seed)
        self.model = HeteroSegNet(net_cfg).to(dtype)
        self.log_alpha = None
        if cfg.bilevel:
            self.log_alpha = torch.nn.Parameter(torch.tensor(math.log(cfg.alpha_init), dtype=dtype))
        self.step = 0
        self.optimizer = self._make_optimizer()

    def _make_optimizer(self):
        groups = [{"params": list(self.model.parameters()), "weight_decay": self.cfg.weight_decay}]
        if self.log_alpha is not None:
            groups.append({"params": [self.log_alpha], "weight_decay": 0.0})
        if self.cfg.optimizer == "sgd":
            for g in groups:
                g.pop("weight_decay")
            return torch.optim.SGD(groups, lr=self.cfg.outer_lr)
        return torch.optim.AdamW(groups, lr=self.cfg.outer_lr)

    @property
    def alpha(self) -> Optional[float]:
        return None if self.log_alpha is None else float(torch.exp(self.log_alpha.detach()))

    def named_trainables(self) -> dict[str, torch.Tensor]:
        return {**generator_side(self.model, self.log_alpha), **discriminator_side(self.model)}

    def meta_update(self, meta_batch: MetaBatch, full_batches: Sequence[Sequence[PatientSample]]) -> list[dict]:
        """One outer-optimizer step; returns one metrics row per task."""
        tasks = [make_batch(t.samples, t.mask, self.dtype) for t in meta_batch.tasks]
        fulls = [make_batch(fb, (1,) * self.net_cfg.num_modalities, self.dtype) for fb in full_batches]
        rows: list[dict] = []
        dsc_acc = []

        def record(i, task, obj):
            rows.append(
                {
                    "step": self.step,
                    "task_mask": mask_str(task.mask),
                    "L_E": float(obj.inner.L_E.detach()),
                    "L_seg": float(obj.inner.seg.detach()),
                    "L_adv": float(obj.inner.adv.detach()),
                    "L_dis": float(obj.inner.dis.detach()),
                    "L_full": float(obj.value.detach()),
                    "alpha": self.alpha,
                }
            )
            ref = obj.outer if obj.outer is not None else obj.inner
            batch = fulls[i] if obj.outer is not None else task
            dsc_acc.append(_batch_dsc(ref.probs.detach(), batch.labels))

        grads, _ = meta_gradients(self.model, self.log_alpha, tasks, fulls, self.cfg, on_task=record)
        self.optimizer.zero_grad(set_to_none=True)
        for name, p in self.named_trainables().items():
            p.grad = grads[name]
        self.optimizer.step()
        self.step += 1
        self.last_train_dsc = np.mean(dsc_acc, axis=0)
        return rows

    def state(self) -> dict:
        return self.optimizer.state_dict()

    def load(self, ckpt) -> None:
        model = ckpt.build_model(self.dtype)
        self.model.load_state_dict(model.state_dict())
        la = ckpt.log_alpha(self.dtype)
        if la is not None and self.log_alpha is not None:
            with torch.no_grad():
                self.log_alpha.copy_(la)
        if ckpt.optimizer_state is not None:
            self.optimizer.load_state_dict(ckpt.optimizer_state)
        self.step = ckpt.step


def _batch_dsc(probs: torch.Tensor, labels: torch.Tensor) -> np.ndarray:
    pred = (probs > 0.5).to(labels.dtype)
    inter = (pred * labels).sum(dim=(0, 2, 3, 4))
    denom = pred.sum(dim=(0, 2, 3, 4)) + labels.sum(dim=(0, 2, 3, 4))
    out = torch.where(denom > 0, 2 * inter / denom.clamp_min(1), torch.ones_like(denom))
    return out.cpu().numpy()


def steps_per_epoch(split: DatasetSplit, cfg: TrainConfig) -> int:
    return max(1, math.ceil(len(split.d_miss) / (cfg.meta_batch_tasks * cfg.per_task_batch)))


def draw_step(split: DatasetSplit, cfg: TrainConfig, step: int):
    """Meta-batch and per-task full batches for a given global step (resumable)."""
    rng = np.random.default_rng([cfg.seed, step])
    mb = sample_meta_batch(split, cfg.meta_batch_tasks, cfg.per_task_batch, rng)
    fulls = [sample_full_batch(split, cfg.per_task_batch, rng) for _ in mb.tasks]
    return mb, fulls


@dataclass
class TrainResult:
    learner: MetaLearner
    rows: list[dict]
    checkpoints: list[Path]


def train(
    net_cfg: NetConfig,
    cfg: TrainConfig,
    split: DatasetSplit,
    out_dir=None,
    *,
    config_text: str = "",
    config_hash: str = "",
    resume=None,
    progress: Optional[Callable[[int, list[dict]], None]] = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of meta-updates (or plain updates for non-bilevel variants)."""
    if not split.d_miss or not split.d_full:
        raise ValueError("training needs nonempty d_miss and d_full cohorts")
    learner = MetaLearner(net_cfg, cfg)
    if resume is not None:
        learner.load(resume)
    n_steps = steps_per_epoch(split, cfg) * cfg.epochs
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = dsc_writer = None
    files = []
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        fh = open(out_dir / "metrics.csv", mode, newline="")
        dfh = open(out_dir / "train_dsc.csv", mode, newline="")
        files = [fh, dfh]
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        dsc_writer = csv.writer(dfh)
        if resume is None:
            writer.writeheader()
            dsc_writer.writerow(["step", "WT", "TC", "ET"])

    all_rows: list[dict] = []
    checkpoints: list[Path] = []
    per_epoch = steps_per_epoch(split, cfg)
    try:
        start = learner.step
        for _ in range(start, start + n_steps):
            mb, fulls = draw_step(split, cfg, learner.step)
            rows = learner.meta_update(mb, fulls)
            all_rows.extend(rows)
            if writer is not None:
                for r in rows:
                    writer.writerow({k: ("" if v is None else (f"{v:.9g}" if isinstance(v, float) else v)) for k, v in r.items()})
                dsc_writer.writerow([learner.step - 1] + [f"{x:.6f}" for x in learner.last_train_dsc])
            if progress is not None:
                progress(learner.step, rows)
            if learner.alpha is not None and not learner.alpha > 0:
                raise FloatingPointError(f"alpha left the positive range: {learner.alpha}")
            epoch_done = (learner.step - start) % per_epoch == 0
            epoch_idx = (learner.step - start) // per_epoch
            last = learner.step - start == n_steps
            if out_dir is not None and epoch_done and (
                last or (cfg.checkpoint_every and epoch_idx % cfg.checkpoint_every == 0)
            ):
                path = out_dir / f"ckpt_step{learner.step:06d}.zip"
                save_checkpoint(
                    path,
                    learner.model,
                    log_alpha=learner.log_alpha,
                    step=learner.step,
                    config_text=config_text,
                    config_hash=config_hash,
                    variant=cfg.variant,
                    optimizer_state=learner.state(),
                )
                checkpoints.append(path)
    finally:
        for f in files:
            f.close()
    return TrainResult(learner, all_rows, checkpoints)


def ablate_variant(net_cfg: NetConfig, cfg: TrainConfig, split: DatasetSplit, variant: str, out_dir=None, **kw) -> TrainResult:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    from dataclasses import replace

    return train(net_cfg, replace(cfg, variant=variant), split, out_dir, **kw)
