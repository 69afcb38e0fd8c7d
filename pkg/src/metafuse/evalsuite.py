"""Overlap and surface-distance metrics and the all-subsets evaluation table."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .masks import ModalityMask, mask_str, modality_label
from .netcore import Discriminator, HeteroSegNet
from .synthvol import REGIONS, PatientSample, apply_modality_drop
from .tasks import all_nonempty_masks

CSV_COLUMNS = ("mask_bits", "region", "dsc", "hd95", "n_patients")

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity coefficient; 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)


def hd95_sentinel(shape: Sequence[int], spacing=(1.0, 1.0, 1.0)) -> float:
    """Worst case: the diagonal of the volume."""
    return float(np.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(shape, spacing))))


def surface_distances(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distances from each boundary voxel of either mask to the other mask's boundary."""
    sp, sg = surface(pred), surface(gt)
    to_gt = ndimage.distance_transform_edt(~sg, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return np.concatenate([to_gt[sp], to_pred[sg]])


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of the symmetric boundary-distance set.

    When either mask is empty the distance is undefined and the volume
    diagonal is returned instead (see :func:`hd95_sentinel`).
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return hd95_sentinel(pred.shape, spacing)
    return float(np.percentile(surface_distances(pred, gt, spacing), 95))


@dataclass
class CombinationRow:
    mask: ModalityMask
    dsc: dict[str, float]
    hd95: dict[str, Optional[float]]
    n_patients: int
    hd95_flagged: int = 0  # patient/region pairs that hit the empty-mask sentinel

    @property
    def mask_bits(self) -> str:
        return mask_str(self.mask)


@dataclass
class CombinationReport:
    rows: list[CombinationRow]
    metadata: dict = field(default_factory=dict)

    def averages(self, metric: str = "dsc") -> dict[str, Optional[float]]:
        out = {}
        for r in REGIONS:
            vals = [getattr(row, metric)[r] for row in self.rows]
            out[r] = None if any(v is None for v in vals) else float(np.mean(vals))
        return out

    def mean_dsc(self) -> float:
        """Mean over every (subset, region) cell."""
        return float(np.mean([row.dsc[r] for row in self.rows for r in REGIONS]))

    def row(self, mask) -> CombinationRow:
        mask = tuple(mask)
        for r in self.rows:
            if r.mask == mask:
                return r
        raise KeyError(mask_str(mask))

    def csv_rows(self, regions: Optional[Iterable[str]] = None) -> list[dict]:
        keep = list(regions) if regions else list(REGIONS)
        out = []
        for row in self.rows:
            for r in REGIONS:
                if r not in keep:
                    continue
                h = row.hd95[r]
                out.append(
                    {
                        "mask_bits": row.mask_bits,
                        "region": r,
                        "dsc": f"{row.dsc[r]:.6f}",
                        "hd95": "" if h is None else f"{h:.6f}",
                        "n_patients": row.n_patients,
                    }
                )
        return out

    def write_csv(self, path, regions: Optional[Iterable[str]] = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.csv_rows(regions))

    def summary(self) -> dict:
        return {
            "metadata": self.metadata,
            "n_rows": len(self.rows),
            "average_dsc": self.averages("dsc"),
            "average_hd95": self.averages("hd95"),
            "mean_dsc": self.mean_dsc(),
            "hd95_flagged": sum(r.hd95_flagged for r in self.rows),
            "rows": [
                {"mask_bits": r.mask_bits, "modalities": modality_label(r.mask), "dsc": r.dsc, "hd95": r.hd95}
                for r in self.rows
            ],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def dataset_hash(samples: Sequence[PatientSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.patient_id.encode())
        for v in s.volumes:
            if v is not None:
                h.update(np.ascontiguousarray(v).tobytes())
        h.update(s.labels.tobytes())
    return h.hexdigest()[:16]


@torch.no_grad()
def predict(model: HeteroSegNet, samples: Sequence[PatientSample], mask: ModalityMask, threshold: float = 0.5) -> np.ndarray:
    """Binarized (N, 3, D, H, W) predictions for patients dropped to ``mask``."""
    dtype = next(model.parameters()).dtype
    vols = []
    for j, bit in enumerate(mask):
        if bit:
            vols.append(torch.from_numpy(np.stack([s.volumes[j] for s in samples]))[:, None].to(dtype))
        else:
            vols.append(None)
    probs = model(vols, mask)
    return (probs > threshold).cpu().numpy()


def evaluate_combinations(
    model: HeteroSegNet,
    test_set: Sequence[PatientSample],
    threshold: float = 0.5,
    *,
    with_hd95: bool = False,
    spacing=(1.0, 1.0, 1.0),
    metadata: Optional[dict] = None,
) -> CombinationReport:
    """Score every nonempty modality subset on a full-modality test set."""
    if not test_set:
        raise ValueError("empty test set")
    m = test_set[0].num_modalities
    if m != model.cfg.num_modalities:
        raise ValueError(f"model expects {model.cfg.num_modalities} modalities, test set has {m}")
    model.eval()
    calls_before = Discriminator.calls
    rows = []
    for mask in all_nonempty_masks(m):
        dropped = [apply_modality_drop(s, mask) for s in test_set]
        pred = predict(model, dropped, mask, threshold)
        region_dsc, region_hd, flagged = {}, {}, 0
        for ri, region in enumerate(REGIONS):
            scores = [dsc(pred[i, ri], s.labels[ri]) for i, s in enumerate(test_set)]
            region_dsc[region] = float(np.mean(scores))
            if with_hd95:
                dists = []
                for i, s in enumerate(test_set):
                    if not pred[i, ri].any() or not s.labels[ri].any():
                        flagged += 1
                    dists.append(hd95(pred[i, ri], s.labels[ri], spacing))
                region_hd[region] = float(np.mean(dists))
            else:
                region_hd[region] = None
        rows.append(CombinationRow(mask, region_dsc, region_hd, len(test_set), flagged))
    meta = dict(metadata or {})
    meta.setdefault("test_set_hash", dataset_hash(test_set))
    meta["threshold"] = threshold
    meta["discriminator_calls"] = Discriminator.calls - calls_before
    return CombinationReport(rows, meta)
