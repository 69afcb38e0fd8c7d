"""Modality availability masks.

A mask is a tuple of 0/1 ints in canonical modality order
(FLAIR-like, T1-like, T1c-like, T2-like for M=4). Its string form puts
modality 0 first, so ``"1100"`` means the first two modalities are present.
"""

from __future__ import annotations

from typing import Iterable, Sequence, Tuple

ModalityMask = Tuple[int, ...]

MODALITY_NAMES = ("FLAIR", "T1", "T1c", "T2")


def as_mask(bits: str | Iterable[int | bool]) -> ModalityMask:
    """Normalize a bitstring or iterable of truthy values into a mask tuple."""
    if isinstance(bits, str):
        if not bits or any(c not in "01" for c in bits):
            raise ValueError(f"invalid mask string {bits!r}")
        return tuple(int(c) for c in bits)
    return tuple(1 if b else 0 for b in bits)


def mask_str(mask: Sequence[int]) -> str:
    return "".join("1" if b else "0" for b in mask)


def full_mask(num_modalities: int) -> ModalityMask:
    return (1,) * num_modalities


def is_full(mask: Sequence[int]) -> bool:
    return all(mask)


def present(mask: Sequence[int]) -> list[int]:
    """Indices of available modalities."""
    return [j for j, b in enumerate(mask) if b]


def is_subset(inner: Sequence[int], outer: Sequence[int]) -> bool:
    return all(not a or b for a, b in zip(inner, outer))


def intersect(a: Sequence[int], b: Sequence[int]) -> ModalityMask:
    return tuple(1 if (x and y) else 0 for x, y in zip(a, b))


def modality_label(mask: Sequence[int]) -> str:
    """Human-readable list of present modalities, e.g. ``FLAIR+T1c``."""
    names = [
        MODALITY_NAMES[j] if len(mask) == len(MODALITY_NAMES) else f"m{j}"
        for j in present(mask)
    ]
    return "+".join(names) if names else "none"
