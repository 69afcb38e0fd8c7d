"""Acceptance suite: one test per primary criterion.

Each test records a one-line verdict that the terminal summary prints as
``[PASS]`` or ``[FAIL]`` (see ``conftest.py``). The ablation benchmark
(criterion 6) trains six desk-scale models and takes tens of CPU minutes.
"""

import csv
import itertools
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import ndimage

from metafuse.bench import UNTRAINED, run_benchmark
from metafuse.cli import main
from metafuse.config import load as load_config
from metafuse.evalsuite import dsc, hd95
from metafuse.gradcheck import TINY_NET, run_gradcheck
from metafuse.losses import LossWeights, bce, dice_loss, discriminator_loss, generator_loss
from metafuse.metaengine import TrainConfig, inner_adapt, make_batch, split_params, train
from metafuse.netcore import HeteroSegNet, NetConfig, fuse_level, fusion_mlp
from metafuse.synthvol import apply_modality_drop, generate_cohort, partition_dataset
from metafuse.tasks import enumerate_tasks, sample_meta_batch

BENCH_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "bench.ini"
BENCH_SEEDS = (0, 1, 2)
CPU_BUDGET_S = 30 * 60


def _report(record, n, ok, detail):
    record(n, ok, detail)
    assert ok, detail


# 1 ---------------------------------------------------------------------------


def test_criterion_1_meta_gradient(record_criterion):
    n_params = sum(p.numel() for p in HeteroSegNet(TINY_NET).parameters()) + 1
    res = run_gradcheck(seed=0, tolerance=1e-4)
    ok = res.passed and n_params <= 50 and res.seconds < 60 and not res.skipped
    _report(record_criterion, 1, ok,
            f"meta-gradient vs central differences: {n_params} params, max rel err {res.max_rel_error:.2e} "
            f"(< 1e-4), {res.seconds:.1f}s (< 60s)")


# 2 ---------------------------------------------------------------------------


def _brute_fuse(feats, mask, w1, b1, w2, b2):
    c = next(f for f in feats if f is not None).shape[0]
    gamma = []
    for f, bit in zip(feats, mask):
        if bit:
            for ch in range(c):
                vals = f[ch].ravel().tolist()
                gamma.append(sum(vals) / len(vals))
        else:
            gamma.extend([0.0] * c)
    hidden = []
    for i in range(len(b1)):
        z = b1[i] + sum(w1[i][k] * gamma[k] for k in range(len(gamma)))
        hidden.append(z / (1 + math.exp(-z)))
    s = [1 / (1 + math.exp(-(b2[j] + sum(w2[j][k] * hidden[k] for k in range(len(hidden)))))) for j in range(len(b2))]
    out = np.zeros(next(f for f in feats if f is not None).shape)
    for j, bit in enumerate(mask):
        if bit:
            out = out + s[j] * feats[j]
    return out, gamma


def test_criterion_2_fusion_oracle(record_criterion):
    rng = np.random.default_rng(0)
    worst, gamma_ok = 0.0, True
    masks = [m for m in itertools.product((0, 1), repeat=4) if any(m)]
    for idx, mask in enumerate(masks):
        torch.manual_seed(idx)
        c = 4
        mlp = fusion_mlp(4, c).double()
        full = [rng.normal(size=(c, 2, 2, 2)) for _ in range(4)]
        feats = [f if bit else None for f, bit in zip(full, mask)]
        t = [torch.from_numpy(f)[None] if f is not None else None for f in feats]
        fused, gamma, _ = fuse_level(t, mask, mlp, return_weights=True)
        w1, b1 = mlp[0].weight.tolist(), mlp[0].bias.tolist()
        w2, b2 = mlp[2].weight.tolist(), mlp[2].bias.tolist()
        ref, ref_gamma = _brute_fuse(feats, mask, w1, b1, w2, b2)
        worst = max(worst, float(np.abs(fused[0].detach().numpy() - ref).max()))
        g = gamma[0].detach().numpy()
        zero_slots = {j for j in range(4) if np.all(g[j * c:(j + 1) * c] == 0)}
        gamma_ok &= zero_slots == {j for j, bit in enumerate(mask) if not bit}
    ok = worst < 1e-10 and gamma_ok and len(masks) == 15
    _report(record_criterion, 2, ok,
            f"fusion vs brute force on 15 masks: max abs err {worst:.1e} (< 1e-10), gamma zeros at missing slots: {gamma_ok}")


# 3 ---------------------------------------------------------------------------


def test_criterion_3_loss_oracles(record_criterion):
    f64 = torch.float64
    errs = {}
    g = torch.zeros(1, 1, 2, 2, 2, dtype=f64)
    g[..., 0, 0, 0] = 1
    g[..., 1, 1, 1] = 1
    errs["dice perfect = 0"] = abs(dice_loss(g.clone(), g).item() - 0.0)
    errs["dice disjoint = 1"] = abs(dice_loss(1 - g, g).item() - 1.0)
    g2 = torch.tensor([1.0, 1.0], dtype=f64).view(1, 1, 2, 1, 1)
    p2 = torch.tensor([1.0, 0.0], dtype=f64).view(1, 1, 2, 1, 1)
    errs["dice 1/3"] = abs(dice_loss(p2, g2).item() - 1 / 3)

    half = torch.full((1, 4), 0.5, dtype=f64)
    errs["bce ln2"] = abs(bce(half, torch.tensor([[1.0, 0, 1, 0]])).item() - math.log(2))
    p = torch.tensor([[0.9, 0.1, 0.8, 0.2]], dtype=f64)
    v = bce(p, torch.tensor([[1.0, 0, 1, 0]])).item()
    errs["bce 0.1643"] = abs(v - (-(2 * math.log(0.9) + 2 * math.log(0.8)) / 4))
    rounded_ok = abs(v - 0.1643) < 5e-5
    d = discriminator_loss(half, torch.tensor([[1.0, 1, 0, 0]]), 0.5).item()
    errs["disc 0.3466"] = abs(d - 0.5 * math.log(2))
    rounded_ok &= abs(d - 0.3466) < 5e-5

    # dice = 0.5 exactly: G=[1,1,0,0], P=[1,0,1,0]
    gd = torch.tensor([1.0, 1, 0, 0], dtype=f64).view(1, 1, 4, 1, 1)
    pd = torch.tensor([1.0, 0, 1, 0], dtype=f64).view(1, 1, 4, 1, 1)
    gen = generator_loss(pd, gd, half, LossWeights(0.8, 0.2))
    errs["gen 0.5386"] = abs(gen.total.item() - (0.8 * 0.5 + 0.2 * math.log(2)))
    rounded_ok &= abs(gen.total.item() - 0.5386) < 5e-5
    decomp = gen.total.item() == 0.8 * gen.seg.item() + 0.2 * gen.adv.item()

    worst = max(errs.values())
    ok = worst < 1e-6 and rounded_ok and decomp
    _report(record_criterion, 3, ok,
            f"loss hand values: {len(errs)} cases, max err {worst:.1e} (< 1e-6); "
            f"rounded constants agree: {rounded_ok}; exact decomposition: {decomp}")


# 4 ---------------------------------------------------------------------------


def test_criterion_4_algorithm_contract(record_criterion, tmp_path, capsys):
    net = NetConfig(channels=(2, 2), bottleneck_channels=2)
    torch.manual_seed(0)
    model = HeteroSegNet(net)
    cohort = generate_cohort(5, 16, (8, 8, 8))
    split = partition_dataset(cohort, 0.5, 5)
    bit_identical = True
    for mask in enumerate_tasks(4):
        src = apply_modality_drop(split.d_full[0], mask)
        batch = make_batch([src], mask)
        params = split_params(model)
        before = [p.detach().clone() for p in model.discriminator.parameters()]
        inner_adapt(model, params, torch.tensor(0.5), batch, LossWeights())
        bit_identical &= all(torch.equal(a, b.detach()) for a, b in zip(before, model.discriminator.parameters()))

    res = train(net, TrainConfig(epochs=10, meta_batch_tasks=4, outer_lr=1e-3), split)
    alphas = [r["alpha"] for r in res.rows]
    alpha_pos = all(a is not None and a > 0 for a in alphas)

    cfg = tmp_path / "c.ini"
    cfg.write_text("[data]\nn_patients = 8\nn_test = 2\ndims = 8 8 8\n[model]\nchannels = 2 2\n"
                   "bottleneck_channels = 2\n[train]\nepochs = 1\nmeta_batch_tasks = 4\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    ckpt = sorted(run.glob("ckpt_*.zip"))[-1]
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path / "ev")]) == 0
    calls = int(capsys.readouterr().out.split("discriminator_calls=")[1].split()[0])

    ok = bit_identical and alpha_pos and calls == 0
    _report(record_criterion, 4, ok,
            f"discriminator bit-identical across inner_adapt on 14 masks: {bit_identical}; "
            f"alpha > 0 on all {len(alphas)} logged rows (min {min(alphas):.4g}): {alpha_pos}; "
            f"discriminator calls during eval: {calls}")


# 5 ---------------------------------------------------------------------------


def test_criterion_5_task_sampler(record_criterion, split40):
    tasks = enumerate_tasks(4)
    exact = len(tasks) == 14 and (0,) * 4 not in tasks and (1,) * 4 not in tasks and len(set(tasks)) == 14
    counts = {m: 0 for m in tasks}
    for seed in range(1000):
        for t in sample_meta_batch(split40, 8, 1, seed).tasks:
            counts[t.requested] += 1
    p = 8 / 14
    mu, sigma = 1000 * p, math.sqrt(1000 * p * (1 - p))
    z = max(abs(c - mu) / sigma for c in counts.values())
    covered = all(c > 0 for c in counts.values())
    ok = exact and covered and z < 5
    _report(record_criterion, 5, ok,
            f"14 partial masks: {exact}; 1000 meta-batches cover all: {covered}; max |z| = {z:.2f} (< 5)")


# 6 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_directional_ablation(record_criterion, tmp_path):
    cfg = load_config(BENCH_CONFIG)
    assert (cfg["data.n_patients"], cfg["data.n_test"], cfg["data.dims"], cfg["data.full_fraction"]) == (
        40, 10, (24, 24, 24), 0.5)
    res = run_benchmark(cfg, BENCH_SEEDS, ("full", "mDrop"), tmp_path)
    full, mdrop, init = (100 * res.mean(v) for v in ("full", "mDrop", UNTRAINED))
    slowest = max(res.max_seconds("full"), res.max_seconds("mDrop"))
    gap = full - mdrop
    ok = gap >= 2.0 and full - init >= 20 and mdrop - init >= 20 and slowest <= CPU_BUDGET_S
    per_seed = "; ".join(
        f"seed {s}: " + "/".join(f"{100 * r.mean_dsc:.1f}" for r in res.rows if r.seed == s) for s in BENCH_SEEDS
    )
    _report(record_criterion, 6, ok,
            f"mean DSC full {full:.2f} vs mDrop {mdrop:.2f} (gap {gap:+.2f}, need >= 2), untrained {init:.2f} "
            f"(both need +20); slowest run {slowest / 60:.1f} CPU-min (<= 30) [untrained/full/mDrop {per_seed}]")


# 7 ---------------------------------------------------------------------------


def _brute_hd95(a, b):
    def surf(m):
        pts = []
        for idx in zip(*np.nonzero(m)):
            for ax in range(3):
                for step in (-1, 1):
                    nb = list(idx)
                    nb[ax] += step
                    if not 0 <= nb[ax] < m.shape[ax] or not m[tuple(nb)]:
                        pts.append(idx)
                        break
                else:
                    continue
                break
        return pts

    sa, sb = surf(a), surf(b)
    d = [min(math.dist(p, q) for q in sb) for p in sa] + [min(math.dist(p, q) for q in sa) for p in sb]
    d.sort()
    pos = 0.95 * (len(d) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(d) - 1)
    return d[lo] + (pos - lo) * (d[hi] - d[lo])


def test_criterion_7_metrics(record_criterion):
    errs = {}
    z = np.zeros((10, 10, 10), bool)
    errs["dsc empty/empty = 1"] = abs(dsc(z, z) - 1.0)
    a = z.copy()
    a[2:5, 2:5, 2:5] = True
    errs["dsc identical = 1"] = abs(dsc(a, a) - 1.0)
    errs["dsc disjoint = 0"] = abs(dsc(a, np.roll(a, 5, axis=0)) - 0.0)
    b = z.copy()
    b[2:5, 2:5, 3:6] = True  # overlap 18 of 27
    errs["dsc overlap 2/3"] = abs(dsc(a, b) - 2 * 18 / 54)
    s1, s2 = z.copy(), z.copy()
    s1[1, 1, 1] = True
    s2[1, 1, 4] = True
    errs["hd95 single voxels 3"] = abs(hd95(s1, s2) - 3.0)
    errs["hd95 identical 0"] = abs(hd95(a, a))
    n_cubes = 0
    for shift in [(0, 0, 1), (0, 2, 1), (1, 1, 3), (3, 0, 0)]:
        c1 = np.zeros((12, 12, 12), bool)
        c1[2:6, 2:7, 3:6] = True
        c2 = np.zeros_like(c1)
        c2[2 + shift[0]:6 + shift[0], 2 + shift[1]:7 + shift[1], 3 + shift[2]:6 + shift[2]] = True
        errs[f"hd95 offset cube {shift}"] = abs(hd95(c1, c2) - _brute_hd95(c1, c2))
        n_cubes += 1
    rng = np.random.default_rng(7)
    for i in range(3):
        r1 = ndimage.binary_dilation(rng.uniform(size=(9, 9, 9)) > 0.95)
        r2 = ndimage.binary_dilation(rng.uniform(size=(9, 9, 9)) > 0.95)
        if r1.any() and r2.any():
            errs[f"hd95 random blobs {i}"] = abs(hd95(r1, r2) - _brute_hd95(r1, r2))
    worst = max(errs.values())
    ok = worst < 1e-9
    _report(record_criterion, 7, ok,
            f"dsc/hd95 on {len(errs)} cases incl. {n_cubes} offset cubes vs all-pairs oracle: max err {worst:.1e} (< 1e-9)")


# 8 ---------------------------------------------------------------------------


def test_criterion_8_determinism(record_criterion, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[data]\nn_patients = 12\nn_test = 3\ndims = 16 16 16\n[model]\nchannels = 2 4\n"
                   "bottleneck_channels = 4\n[train]\nepochs = 2\n")
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
        ckpt = sorted(out.glob("ckpt_*.zip"))[-1]
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(out / "eval")]) == 0
        runs.append(out)
    a, b = runs
    metrics_same = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    report_same = (a / "eval" / "report.csv").read_bytes() == (b / "eval" / "report.csv").read_bytes()

    def losses(p):
        return [float(r["L_full"]) for r in csv.DictReader(open(p / "metrics.csv"))]

    la, lb = losses(a), losses(b)
    traj = len(la) == len(lb) and max(abs(x - y) for x, y in zip(la, lb)) <= 1e-6
    ok = metrics_same and report_same and traj
    _report(record_criterion, 8, ok,
            f"same config+seed: metrics.csv byte-identical: {metrics_same}; report.csv byte-identical: {report_same}; "
            f"loss trajectory ({len(la)} rows) within 1e-6: {traj}")
