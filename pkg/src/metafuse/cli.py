"""Command-line entry point: ``metafuse {gen-data,train,ablate,eval,bench,gradcheck}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import filelock
import torch

from . import config as config_mod
from .bench import build_data, run_benchmark
from .config import ConfigError, RunConfig
from .evalsuite import evaluate_combinations
from .gradcheck import run_gradcheck
from .masks import mask_str
from .metaengine import VARIANTS, train
from .netcore import load_checkpoint
from .plotting import plot_ablation, plot_report, plot_training
from .synthvol import DatasetSplit, REGIONS, read_volume, write_volume

log = logging.getLogger("metafuse")

MANIFEST = "manifest.json"


def _load_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.set("run.seed", args.seed)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg = cfg.set(key.strip(), value.strip())
    if getattr(args, "out", None):
        cfg = cfg.set("run.output_dir", args.out)
    return cfg


def _locked(out_dir: Path) -> filelock.FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    return filelock.FileLock(str(out_dir / ".metafuse.lock"), timeout=0)


def write_dataset(out_dir: Path, split: DatasetSplit, test: list, cfg: RunConfig) -> dict:
    pdir = out_dir / "patients"
    pdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for cohort, samples in (("full", split.d_full), ("miss", split.d_miss), ("test", test)):
        for s in samples:
            fname = f"patients/{s.patient_id}.hmv"
            write_volume(out_dir / fname, s)
            entries.append({"id": s.patient_id, "file": fname, "cohort": cohort, "mask": mask_str(s.availability)})
    manifest = {
        "seed": cfg.seed,
        "full_fraction": split.full_fraction,
        "dims": list(cfg["data.dims"]),
        "num_modalities": cfg["data.num_modalities"],
        "counts": {"full": len(split.d_full), "miss": len(split.d_miss), "test": len(test)},
        "patients": entries,
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(data_dir) -> tuple[DatasetSplit, list]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / MANIFEST).read_text())
    cohorts = {"full": [], "miss": [], "test": []}
    for e in manifest["patients"]:
        s = read_volume(data_dir / e["file"])
        if mask_str(s.availability) != e["mask"]:
            raise ValueError(f"{e['file']}: availability {mask_str(s.availability)} disagrees with manifest {e['mask']}")
        cohorts[e["cohort"]].append(s)
    split = DatasetSplit(cohorts["miss"], cohorts["full"], manifest["full_fraction"])
    return split, cohorts["test"]


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg["run.output_dir"])
    with _locked(out):
        split, test = build_data(cfg)
        manifest = write_dataset(out, split, test, cfg)
        (out / "resolved.ini").write_text(cfg.dumps())
    digest = hashlib.sha256((out / MANIFEST).read_bytes()).hexdigest()[:16]
    print(f"gen-data: {manifest['counts']} seed={cfg.seed} manifest_sha={digest} -> {out}")
    return 0


def _run_training(args, variant=None) -> int:
    cfg = _load_config(args)
    if variant is not None:
        cfg = cfg.set("train.variant", variant)
    out = Path(cfg["run.output_dir"])
    with _locked(out):
        if args.data:
            split, _ = read_dataset(args.data)
        else:
            split, _ = build_data(cfg)
        resume = load_checkpoint(args.resume) if args.resume else None
        if resume is not None and resume.manifest.get("config_hash") != _arch_hash(cfg):
            raise ConfigError("checkpoint was trained with a different model/variant configuration")
        (out / "resolved.ini").write_text(cfg.dumps())
        torch.manual_seed(cfg.seed)

        def progress(step, rows):
            if step % 10 == 0:
                log.info("step %d L_full=%.4f", step, sum(r["L_full"] for r in rows))

        result = train(
            cfg.net_config(),
            cfg.train_config(),
            split,
            out,
            config_text=cfg.dumps(),
            config_hash=_arch_hash(cfg),
            resume=resume,
            progress=progress,
        )
        with open(out / "metrics.csv", newline="") as fh:
            plot_training(list(csv.DictReader(fh)), out / "training.png")
    alpha = result.learner.alpha
    print(
        f"train: variant={cfg['train.variant']} steps={result.learner.step} seed={cfg.seed} "
        f"alpha={'' if alpha is None else f'{alpha:.6g}'} checkpoint={result.checkpoints[-1] if result.checkpoints else ''}"
    )
    return 0


def _arch_hash(cfg: RunConfig) -> str:
    return cfg.net_config().digest()


def cmd_train(args) -> int:
    return _run_training(args)


def cmd_ablate(args) -> int:
    return _run_training(args, variant=args.variant)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_mod.loads(ckpt.config_text) if ckpt.config_text else RunConfig()
    if ckpt.manifest.get("config_hash") != ckpt.net_config.digest():
        raise ConfigError("checkpoint manifest hash does not match its stored network configuration")
    seed = args.seed if args.seed is not None else cfg.seed
    torch.manual_seed(seed)
    out = Path(args.out or Path(args.checkpoint).parent / "eval")
    threshold = args.threshold if args.threshold is not None else cfg["eval.threshold"]
    with _locked(out):
        if args.data:
            _, test = read_dataset(args.data)
        else:
            _, test = build_data(cfg)
        model = ckpt.build_model()
        regions = [r.strip() for r in args.regions.split(",")] if args.regions else None
        if regions and any(r not in REGIONS for r in regions):
            raise ValueError(f"--regions must be drawn from {REGIONS}")
        report = evaluate_combinations(
            model,
            test,
            threshold,
            with_hd95=args.hd95 or cfg["eval.hd95"],
            metadata={"checkpoint": Path(args.checkpoint).name, "step": ckpt.step, "seed": seed,
                      "variant": ckpt.manifest.get("variant", "")},
        )
        report.write_csv(out / "report.csv", regions)
        report.write_json(out / "report.json")
        plot_report(report, out / "report.png")
    avg = report.averages()
    print(
        "eval: rows={} ".format(len(report.rows))
        + " ".join(f"{r}={100 * avg[r]:.2f}" for r in REGIONS)
        + f" discriminator_calls={report.metadata['discriminator_calls']} -> {out}"
    )
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg["run.output_dir"])
    seeds = [int(x) for x in args.seeds.split(",")]
    variants = [v.strip() for v in args.variants.split(",")]
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; expected one of {sorted(VARIANTS)}")
    with _locked(out):
        (out / "resolved.ini").write_text(cfg.dumps())
        result = run_benchmark(cfg, seeds, variants, out)
        result.write_csv(out / "ablation.csv")
        plot_ablation({v: result.region_means(v) for v in result.variants()}, out / "ablation.png")
    for v in result.variants():
        print(f"bench: {v} mean_dsc={100 * result.mean(v):.2f} over seeds {seeds}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args) if (args.config or args.set) else None
    first_order = args.first_order or (cfg is not None and cfg["train.first_order"])
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    objective = cfg["train.objective"] if cfg is not None else "joint"
    result = run_gradcheck(seed=seed, tolerance=args.tol, first_order=first_order, objective=objective)
    for line in result.lines():
        print(line)
    return 0 if result.passed else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (sections run/data/model/train/eval)")
    common.add_argument("--seed", type=int, help="global seed; overrides run.seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=2")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="metafuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset (.hmv files + manifest)")
    p.add_argument("--out", help="output directory (overrides run.output_dir)")
    p.set_defaults(func=cmd_gen_data)

    for name, helptext in (("train", "meta-train the full method"), ("ablate", "train one ablation variant")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")
        p.add_argument("--out", help="output directory (overrides run.output_dir)")
        p.add_argument("--resume", help="checkpoint to continue from")
        if name == "ablate":
            p.add_argument("--variant", required=True, choices=sorted(VARIANTS))
        p.set_defaults(func=cmd_train if name == "train" else cmd_ablate)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on every modality subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory; its test cohort is used")
    p.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
    p.add_argument("--regions", help="comma-separated subset of WT,TC,ET for the CSV")
    p.add_argument("--threshold", type=float)
    p.add_argument("--hd95", action="store_true", help="also compute HD95")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="ablation benchmark over seeds (untrained + variants)")
    p.add_argument("--out", help="output directory (overrides run.output_dir)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default="full,mDrop")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the meta-gradient")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--first-order", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, FloatingPointError, KeyError, filelock.Timeout) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
