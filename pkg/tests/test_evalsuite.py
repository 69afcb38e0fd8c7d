import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from metafuse.evalsuite import (
    CSV_COLUMNS,
    dsc,
    evaluate_combinations,
    hd95,
    hd95_sentinel,
    surface,
)
from metafuse.netcore import Discriminator, HeteroSegNet
from metafuse.synthvol import generate_cohort

from conftest import SMALL_NET


def _surface_loop(mask):
    out = np.zeros_like(mask, dtype=bool)
    shape = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[axis] += step
                if not 0 <= nb[axis] < shape[axis] or not mask[tuple(nb)]:
                    out[idx] = True
    return out


def _percentile_linear(values, q):
    v = sorted(values)
    pos = q / 100 * (len(v) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def _hd95_bruteforce(pred, gt):
    sp = np.argwhere(_surface_loop(pred))
    sg = np.argwhere(_surface_loop(gt))
    dists = []
    for a, b in ((sp, sg), (sg, sp)):
        for p in a:
            dists.append(min(math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(p, q))) for q in b))
    return _percentile_linear(dists, 95)


def test_dsc_cases():
    a = np.zeros((4, 4, 4), bool)
    assert dsc(a, a) == 1.0
    b = a.copy()
    b[0, 0, 0] = True
    assert dsc(b, a) == 0.0
    c = b.copy()
    c[0, 0, 1] = True
    assert dsc(b, c) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        dsc(a, np.zeros((2, 2, 2)))


def test_hd95_offset_single_voxels():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[1, 1, 1] = True
    b[1, 1, 4] = True
    assert hd95(a, b) == pytest.approx(3.0, abs=1e-9)


def test_hd95_identical_is_zero():
    a = np.zeros((6, 6, 6), bool)
    a[1:4, 2:5, 1:3] = True
    assert hd95(a, a) == 0.0


def test_hd95_empty_returns_sentinel():
    a = np.zeros((4, 5, 6), bool)
    b = a.copy()
    b[1, 1, 1] = True
    assert hd95(a, b) == pytest.approx(math.sqrt(9 + 16 + 25))
    assert hd95(b, a) == hd95_sentinel((4, 5, 6))


def test_surface_matches_loop(rng):
    m = rng.uniform(size=(6, 7, 5)) > 0.4
    assert np.array_equal(surface(m), _surface_loop(m))


def test_hd95_matches_bruteforce(rng):
    for _ in range(6):
        a = ndimage.binary_dilation(rng.uniform(size=(9, 9, 9)) > 0.93)
        b = ndimage.binary_dilation(rng.uniform(size=(9, 9, 9)) > 0.93)
        if not a.any() or not b.any():
            continue
        assert abs(hd95(a, b) - _hd95_bruteforce(a, b)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(a=arrays(np.bool_, (5, 5, 5)), b=arrays(np.bool_, (5, 5, 5)))
def test_hd95_symmetric(a, b):
    assert hd95(a, b) == pytest.approx(hd95(b, a), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(a=arrays(np.bool_, (5, 5, 5)), b=arrays(np.bool_, (5, 5, 5)))
def test_dsc_symmetric_and_bounded(a, b):
    v = dsc(a, b)
    assert v == dsc(b, a)
    assert 0.0 <= v <= 1.0


def test_hd95_grows_with_dilation():
    gt = np.zeros((16, 16, 16), bool)
    gt[6:10, 6:10, 6:10] = True
    prev = hd95(gt, gt)
    pred = gt
    for _ in range(3):
        pred = ndimage.binary_dilation(pred)
        cur = hd95(pred, gt)
        assert cur >= prev
        prev = cur
    assert prev > 0


@pytest.fixture(scope="module")
def report():
    import torch

    torch.manual_seed(0)
    model = HeteroSegNet(SMALL_NET)
    test_set = generate_cohort(99, 2, (8, 8, 8))
    return evaluate_combinations(model, test_set, with_hd95=True)


def test_report_has_fifteen_rows(report):
    assert len(report.rows) == 15
    assert len({r.mask for r in report.rows}) == 15
    assert report.rows[-1].mask == (1, 1, 1, 1)
    assert all(r.n_patients == 2 for r in report.rows)


def test_report_averages_consistent(report):
    for region, avg in report.averages().items():
        assert avg == pytest.approx(np.mean([r.dsc[region] for r in report.rows]))
    assert report.mean_dsc() == pytest.approx(np.mean(list(report.averages().values())))
    assert report.metadata["discriminator_calls"] == 0
    assert all(v is not None for v in report.averages("hd95").values())


def test_report_csv(tmp_path, report):
    path = tmp_path / "r.csv"
    report.write_csv(path)
    rows = list(csv.DictReader(open(path)))
    assert tuple(rows[0].keys()) == CSV_COLUMNS
    assert len(rows) == 45
    report.write_csv(path, regions=["ET"])
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 15 and {r["region"] for r in rows} == {"ET"}


def test_eval_does_not_touch_discriminator():
    import torch

    torch.manual_seed(1)
    model = HeteroSegNet(SMALL_NET)
    before = Discriminator.calls
    evaluate_combinations(model, generate_cohort(5, 1, (8, 8, 8)))
    assert Discriminator.calls == before
