"""Synthetic multi-modal tumor volumes, modality dropping and cohort splits.

Each patient carries three nested regions (whole tumor WT, tumor core TC,
enhancing tumor ET), drawn as concentric jittered ellipsoids with a smooth
boundary perturbation. Every modality renders the same anatomy through its
own contrast recipe, so no single channel separates all three regions:

    ============  =======  =====  =========  =========
    modality      healthy  edema  necrosis   enhancing
    ============  =======  =====  =========  =========
    0 FLAIR-like  1.00     2.00   1.70       1.60
    1 T1-like     1.00     0.80   0.55       0.85
    2 T1c-like    1.00     0.95   0.60       2.30
    3 T2-like     1.00     1.80   2.20       1.30
    ============  =======  =====  =========  =========

Edema is WT minus TC, necrosis is TC minus ET. Intensities are normalized to
zero mean and unit variance over the brain foreground, per modality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .masks import ModalityMask, as_mask, full_mask, is_full, mask_str, present

REGIONS = ("WT", "TC", "ET")
DEFAULT_DIMS = (24, 24, 24)
MIN_DIM = 8
FORMAT_VERSION = 1

_BASE_RECIPES = np.array(
    [
        [1.00, 2.00, 1.70, 1.60],
        [1.00, 0.80, 0.55, 0.85],
        [1.00, 0.95, 0.60, 2.30],
        [1.00, 1.80, 2.20, 1.30],
    ]
)
NOISE_STD = 0.25


class VolumeFormatError(ValueError):
    """Raised for malformed ``.hmv`` files."""


@dataclass
class PatientSample:
    patient_id: str
    volumes: list[Optional[np.ndarray]]
    availability: ModalityMask
    labels: np.ndarray  # (3, D, H, W) uint8, region order WT, TC, ET

    def __post_init__(self):
        self.availability = as_mask(self.availability)
        if not any(self.availability):
            raise ValueError(f"patient {self.patient_id}: empty availability")
        if len(self.volumes) != len(self.availability):
            raise ValueError("volumes and availability differ in length")
        for j, (v, bit) in enumerate(zip(self.volumes, self.availability)):
            if (v is not None) != bool(bit):
                raise ValueError(f"patient {self.patient_id}: volume slot {j} inconsistent with availability")
            if v is not None and v.shape != self.labels.shape[1:]:
                raise ValueError(f"patient {self.patient_id}: volume {j} shape {v.shape} != label shape")

    @property
    def num_modalities(self) -> int:
        return len(self.availability)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape[1:])


@dataclass
class DatasetSplit:
    d_miss: list[PatientSample] = field(default_factory=list)
    d_full: list[PatientSample] = field(default_factory=list)
    full_fraction: float = 0.5

    @property
    def num_modalities(self) -> int:
        pool = self.d_full or self.d_miss
        return pool[0].num_modalities


def modality_recipes(num_modalities: int) -> np.ndarray:
    """Contrast table of shape (M, 4): healthy, edema, necrosis, enhancing."""
    rows = []
    for j in range(num_modalities):
        base = _BASE_RECIPES[j % 4]
        if j >= 4:
            # extra channels blend two base recipes, still distinct per index
            w = 0.5 + 0.1 * (j // 4)
            base = w * base + (1 - w) * _BASE_RECIPES[(j + 1) % 4]
        rows.append(base)
    return np.array(rows)


def _smooth_field(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _normalize_foreground(vol: np.ndarray, fg: np.ndarray) -> np.ndarray:
    out = np.zeros_like(vol)
    vals = vol[fg]
    out[fg] = (vals - vals.mean()) / (vals.std() + 1e-8)
    return out


def generate_patient(seed: int, dims: Sequence[int] = DEFAULT_DIMS, num_modalities: int = 4) -> PatientSample:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError(f"dims must have 3 entries, got {dims}")
    if num_modalities < 2:
        raise ValueError(f"num_modalities must be >= 2, got {num_modalities}")
    for axis, d in enumerate(dims):
        if d < MIN_DIM:
            raise ValueError(f"dimension {axis} has size {d}; need at least {MIN_DIM}")

    rng = np.random.default_rng(seed)
    dims_arr = np.array(dims, dtype=float)
    wt_axes = dims_arr * rng.uniform(0.2, 0.28, 3)
    tc_axes = wt_axes * rng.uniform(0.55, 0.7, 3)
    et_axes = np.maximum(tc_axes * rng.uniform(0.5, 0.65, 3), 1.0)
    tc_axes = np.maximum(tc_axes, et_axes + 0.5)
    wt_axes = np.maximum(wt_axes, tc_axes + 0.5)
    for axis, d in enumerate(dims):
        if 2 * wt_axes[axis] + 1 > d - 2:
            raise ValueError(
                f"dimension {axis} has size {d}; too small to contain the nested regions "
                f"(whole-tumor semi-axis {wt_axes[axis]:.2f})"
            )

    center = []
    for axis, d in enumerate(dims):
        r = math.ceil(wt_axes[axis])
        lo, hi = r, d - 1 - r
        mid_lo, mid_hi = max(lo, round(0.3 * d)), min(hi, round(0.7 * d) - 1)
        if mid_lo <= mid_hi:
            lo, hi = mid_lo, mid_hi
        center.append(int(rng.integers(lo, hi + 1)))
    center = np.array(center, dtype=float)

    coords = np.indices(dims, dtype=float)
    offsets = coords - center[:, None, None, None]

    def ellipsoid(axes, wobble):
        r2 = sum((offsets[a] / axes[a]) ** 2 for a in range(3))
        return np.sqrt(r2) * (1.0 + 0.15 * wobble) <= 1.0

    wt = ellipsoid(wt_axes, _smooth_field(rng, dims, 3.0))
    tc = ellipsoid(tc_axes, _smooth_field(rng, dims, 3.0)) & wt
    et = ellipsoid(et_axes, _smooth_field(rng, dims, 3.0)) & tc

    brain_center = (dims_arr - 1) / 2
    brain_r2 = sum(((coords[a] - brain_center[a]) / (0.46 * dims_arr[a])) ** 2 for a in range(3))
    brain = (brain_r2 <= 1.0) | wt

    tissue = np.stack(
        [brain & ~wt, wt & ~tc, tc & ~et, et],
    ).astype(float)
    recipes = modality_recipes(num_modalities)
    volumes = []
    for j in range(num_modalities):
        clean = np.tensordot(recipes[j], tissue, axes=1)
        clean = ndimage.gaussian_filter(clean, sigma=0.6)
        bias = 1.0 + 0.08 * _smooth_field(rng, dims, 6.0)
        noisy = clean * bias + NOISE_STD * rng.standard_normal(dims)
        volumes.append(_normalize_foreground(noisy, brain).astype(np.float32))

    labels = np.stack([wt, tc, et]).astype(np.uint8)
    return PatientSample(
        patient_id=f"p{seed}",
        volumes=volumes,
        availability=full_mask(num_modalities),
        labels=labels,
    )


def apply_modality_drop(sample: PatientSample, mask) -> PatientSample:
    mask = as_mask(mask)
    if len(mask) != sample.num_modalities:
        raise ValueError(f"mask {mask_str(mask)} has wrong length for {sample.num_modalities} modalities")
    if not any(mask):
        raise ValueError("cannot drop every modality (all-zero mask)")
    for j, (want, have) in enumerate(zip(mask, sample.availability)):
        if want and not have:
            raise ValueError(f"mask requests modality bit {j}, which patient {sample.patient_id} lacks")
    volumes = [v if bit else None for v, bit in zip(sample.volumes, mask)]
    return replace(sample, volumes=volumes, availability=mask)


def generate_cohort(seed: int, n: int, dims=DEFAULT_DIMS, num_modalities: int = 4) -> list[PatientSample]:
    """``n`` full-modality patients with per-patient seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    out = []
    for i, s in enumerate(seeds):
        p = generate_patient(int(s), dims, num_modalities)
        p.patient_id = f"s{seed}-{i:04d}"
        out.append(p)
    return out


def proper_masks(num_modalities: int) -> list[ModalityMask]:
    from .tasks import enumerate_tasks

    return enumerate_tasks(num_modalities)


def partition_dataset(samples: Sequence[PatientSample], full_fraction: float, seed: int) -> DatasetSplit:
    """Split full-modality patients into a full cohort and a randomly dropped cohort."""
    if not (0.0 < full_fraction <= 1.0):
        raise ValueError(f"full_fraction must be in (0, 1], got {full_fraction}")
    for s in samples:
        if not is_full(s.availability):
            raise ValueError(f"patient {s.patient_id} is not full-modality")
    n = len(samples)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_full = math.ceil(full_fraction * n)
    d_full = [samples[i] for i in order[:n_full]]
    rest = [samples[i] for i in order[n_full:]]
    if not rest:
        return DatasetSplit(d_miss=[], d_full=d_full, full_fraction=full_fraction)

    masks = proper_masks(samples[0].num_modalities)
    k = len(masks)
    if len(rest) >= k:
        assigned = [masks[i] for i in rng.permutation(k)]
        assigned += [masks[i] for i in rng.integers(0, k, len(rest) - k)]
        assigned = [assigned[i] for i in rng.permutation(len(assigned))]
    else:
        assigned = [masks[i] for i in rng.integers(0, k, len(rest))]
    d_miss = [apply_modality_drop(s, m) for s, m in zip(rest, assigned)]
    return DatasetSplit(d_miss=d_miss, d_full=d_full, full_fraction=full_fraction)


# --- on-disk format -------------------------------------------------------


def write_volume(path, sample: PatientSample) -> None:
    """Write one patient as an ``.hmv`` file (text header, blank line, raw payload)."""
    d, h, w = sample.dims
    header = (
        f"version:{FORMAT_VERSION}\n"
        f"dims:{d} {h} {w}\n"
        f"modalities:{sample.num_modalities}\n"
        f"availability:{mask_str(sample.availability)}\n"
        f"dtype:f32le\n"
        f"patient_id:{sample.patient_id}\n"
        "\n"
    )
    chunks = [header.encode("utf-8")]
    for j in present(sample.availability):
        chunks.append(np.ascontiguousarray(sample.volumes[j], dtype="<f4").tobytes(order="C"))
    chunks.append(np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def read_volume(path) -> PatientSample:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise VolumeFormatError(f"{path}: missing header terminator")
    fields = {}
    for line in raw[:sep].decode("utf-8").splitlines():
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    try:
        version = int(fields["version"])
    except (KeyError, ValueError):
        raise VolumeFormatError(f"{path}: missing or bad version field") from None
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported format version {version}")
    if fields.get("dtype") != "f32le":
        raise VolumeFormatError(f"{path}: unsupported dtype {fields.get('dtype')!r}")
    dims = tuple(int(x) for x in fields["dims"].split())
    m = int(fields["modalities"])
    availability = as_mask(fields["availability"])
    if len(availability) != m:
        raise VolumeFormatError(f"{path}: availability length {len(availability)} != modalities {m}")

    payload = raw[sep + 2:]
    n_vox = int(np.prod(dims))
    n_present = sum(availability)
    expected = n_present * n_vox * 4 + 3 * n_vox
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload size mismatch ({len(payload)} bytes, expected {expected})")

    volumes: list[Optional[np.ndarray]] = [None] * m
    offset = 0
    for j in present(availability):
        arr = np.frombuffer(payload, dtype="<f4", count=n_vox, offset=offset)
        volumes[j] = arr.reshape(dims).astype(np.float32)
        offset += n_vox * 4
    labels = np.frombuffer(payload, dtype=np.uint8, count=3 * n_vox, offset=offset).reshape((3,) + dims).copy()
    return PatientSample(
        patient_id=fields.get("patient_id", Path(path).stem),
        volumes=volumes,
        availability=availability,
        labels=labels,
    )
