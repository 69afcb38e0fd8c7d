"""Heterogeneous task distribution over partial-modality subsets."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .masks import ModalityMask, intersect, is_subset, mask_str
from .synthvol import DatasetSplit, PatientSample, apply_modality_drop


@dataclass
class Task:
    mask: ModalityMask  # effective mask applied to every sample
    samples: list[PatientSample]
    requested: ModalityMask  # mask drawn from the task distribution


@dataclass
class MetaBatch:
    tasks: list[Task]

    @property
    def size(self) -> int:
        return len(self.tasks)

    @property
    def masks(self) -> list[ModalityMask]:
        return [t.mask for t in self.tasks]


def enumerate_tasks(num_modalities: int) -> list[ModalityMask]:
    """All nonempty proper subsets (2**M - 2 of them), lexicographic in bit order."""
    if num_modalities < 2:
        raise ValueError(f"need at least 2 modalities, got {num_modalities}")
    return [
        bits
        for bits in itertools.product((0, 1), repeat=num_modalities)
        if any(bits) and not all(bits)
    ]


def all_nonempty_masks(num_modalities: int) -> list[ModalityMask]:
    """The 2**M - 1 evaluation subsets, full mask last."""
    return enumerate_tasks(num_modalities) + [(1,) * num_modalities]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _draw(rng: np.random.Generator, pool: Sequence[PatientSample], n: int) -> list[PatientSample]:
    idx = rng.choice(len(pool), size=n, replace=len(pool) < n)
    return [pool[i] for i in idx]


def sample_task(pool: Sequence[PatientSample], mask: ModalityMask, per_task: int, rng) -> Task:
    """Draw ``per_task`` patients able to serve ``mask`` and drop them to it.

    Patients whose stored availability covers the mask are preferred. When
    none does, one patient with a nonempty overlap is drawn and the task's
    effective mask becomes that overlap.
    """
    rng = _rng(rng)
    covering = [p for p in pool if is_subset(mask, p.availability)]
    effective = mask
    if not covering:
        overlapping = [p for p in pool if any(intersect(mask, p.availability))]
        if not overlapping:
            raise ValueError(f"no patient shares any modality with task {mask_str(mask)}")
        anchor = overlapping[int(rng.integers(len(overlapping)))]
        effective = intersect(mask, anchor.availability)
        covering = [p for p in pool if is_subset(effective, p.availability)]
    chosen = _draw(rng, covering, per_task)
    return Task(
        mask=effective,
        samples=[apply_modality_drop(p, effective) for p in chosen],
        requested=mask,
    )


def sample_meta_batch(split: DatasetSplit, batch_tasks: int = 8, per_task: int = 1, rng_seed=0) -> MetaBatch:
    if not split.d_miss:
        raise ValueError("d_miss is empty; nothing to meta-train on")
    if per_task < 1:
        raise ValueError(f"per_task must be >= 1, got {per_task}")
    masks = enumerate_tasks(split.d_miss[0].num_modalities)
    if not 1 <= batch_tasks <= len(masks):
        raise ValueError(f"batch_tasks={batch_tasks} outside 1..{len(masks)}")
    rng = _rng(rng_seed)
    picked = rng.choice(len(masks), size=batch_tasks, replace=False)
    return MetaBatch([sample_task(split.d_miss, masks[i], per_task, rng) for i in picked])


def sample_full_batch(split: DatasetSplit, per_task: int, rng) -> list[PatientSample]:
    if not split.d_full:
        raise ValueError("d_full is empty; outer loop needs full-modality patients")
    return _draw(_rng(rng), split.d_full, per_task)
