"""Desk-scale ablation benchmark: untrained vs. trained variants over several seeds."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import RunConfig
from .evalsuite import evaluate_combinations
from .metaengine import MetaLearner, train
from .synthvol import REGIONS, DatasetSplit, PatientSample, generate_cohort, partition_dataset

log = logging.getLogger(__name__)

UNTRAINED = "untrained"
BENCH_COLUMNS = ("seed", "variant", "WT", "TC", "ET", "mean_dsc", "seconds")
TEST_SEED_OFFSET = 1_000_003


def build_data(cfg: RunConfig) -> tuple[DatasetSplit, list[PatientSample]]:
    """Deterministic training split and held-out test cohort for a config."""
    seed = cfg.seed
    dims, m = cfg["data.dims"], cfg["data.num_modalities"]
    train_pats = generate_cohort(seed, cfg["data.n_patients"], dims, m)
    test_pats = generate_cohort(seed + TEST_SEED_OFFSET, cfg["data.n_test"], dims, m)
    for p in test_pats:
        p.patient_id = "test-" + p.patient_id
    split = partition_dataset(train_pats, cfg["data.full_fraction"], seed)
    return split, test_pats


@dataclass
class BenchRow:
    seed: int
    variant: str
    dsc: dict[str, float]
    mean_dsc: float
    seconds: float


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)

    def variants(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def mean(self, variant: str) -> float:
        """Seed-averaged 15-combination mean DSC."""
        vals = [r.mean_dsc for r in self.rows if r.variant == variant]
        if not vals:
            raise KeyError(variant)
        return float(np.mean(vals))

    def region_means(self, variant: str) -> dict[str, float]:
        sel = [r for r in self.rows if r.variant == variant]
        return {g: float(np.mean([r.dsc[g] for r in sel])) for g in REGIONS}

    def max_seconds(self, variant: str) -> float:
        return max(r.seconds for r in self.rows if r.variant == variant)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(BENCH_COLUMNS)
            for r in self.rows:
                w.writerow([r.seed, r.variant] + [f"{r.dsc[g]:.6f}" for g in REGIONS] + [f"{r.mean_dsc:.6f}", f"{r.seconds:.1f}"])


def run_benchmark(
    cfg: RunConfig,
    seeds: Iterable[int],
    variants: Sequence[str] = ("full", "mDrop"),
    out_dir=None,
) -> BenchResult:
    """Train every variant once per seed and score it on all modality subsets.

    The untrained reference is the shared initialization each seed starts from.
    """
    result = BenchResult()
    out_dir = Path(out_dir) if out_dir is not None else None
    for seed in seeds:
        scfg = cfg.set("run.seed", seed)
        split, test = build_data(scfg)
        tcfg = scfg.train_config()
        init = MetaLearner(scfg.net_config(), replace(tcfg, variant="full"))
        rep = evaluate_combinations(init.model, test, scfg["eval.threshold"])
        result.rows.append(BenchRow(seed, UNTRAINED, rep.averages(), rep.mean_dsc(), 0.0))
        for variant in variants:
            run_dir = out_dir / f"seed{seed}" / variant if out_dir is not None else None
            t0 = time.process_time()
            res = train(scfg.net_config(), replace(tcfg, variant=variant), split, run_dir,
                        config_text=scfg.dumps(), config_hash=scfg.net_config().digest())
            seconds = time.process_time() - t0
            rep = evaluate_combinations(res.learner.model, test, scfg["eval.threshold"])
            if run_dir is not None:
                rep.write_csv(run_dir / "report.csv")
            log.info("seed %d %s mean DSC %.4f (%.0f s)", seed, variant, rep.mean_dsc(), seconds)
            result.rows.append(BenchRow(seed, variant, rep.averages(), rep.mean_dsc(), seconds))
    return result
