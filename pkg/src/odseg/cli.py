"""Command-line entry point.

Subcommands: gen | train-localizer | train-segmenter | sweep | eval.
Every command is driven by a ``key = value`` config file (see
``odseg keys``) so an experiment is archived as config + seed; all
failures exit nonzero with a single machine-readable
``<class>-error:`` line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluate as E
from . import experiment as X
from . import train as TR
from .config import ExperimentConfig, registry_help
from .errors import FileError, FormatError, OdsegError, UsageError
from .model import build_baseline, build_localizer, load_model, save_model


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    path = Path(args.config)
    if not path.exists():
        raise FileError(f"config file not found: {path}")
    return ExperimentConfig.parse(path)


def _emit(key, value):
    print(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")


def _localization_split(samples, cfg):
    """Deterministic train/val/test split of the localization dataset."""
    n = len(samples)
    n_val = max(1, int(round(cfg["loc.val_fraction"] * n)))
    n_test = max(1, int(round(cfg["loc.test_fraction"] * n)))
    if n_val + n_test >= n:
        raise UsageError(f"dataset of {n} samples is too small for the configured split")
    order = np.random.default_rng(X.derive_seed(cfg["run.base_seed"], 5)).permutation(n)
    test = [samples[i] for i in order[:n_test]]
    val = [samples[i] for i in order[n_test:n_test + n_val]]
    train = [samples[i] for i in order[n_test + n_val:]]
    return train, val, test


def _load_split(cfg, part: str):
    directory = cfg.data_dir / part
    if not directory.exists():
        raise FileError(f"dataset not found: {directory} (run `odseg gen` first)")
    raw = D.load_dataset(directory)
    return D.prepare_samples(raw, cfg.preprocess_config())


# -- subcommands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    spec = cfg.synthetic_spec()
    root = cfg.data_dir
    if root.exists() and any(root.iterdir()) and not args.force:
        raise UsageError(f"{root} exists and is not empty (use --force to overwrite)")
    seed = cfg["synth.seed"]
    jobs = (
        ("localize", cfg["synth.n_localize"], X.derive_seed(seed, 1)),
        ("segment", cfg["synth.n_segment"], X.derive_seed(seed, 2)),
    )
    for part, n, part_seed in jobs:
        samples = D.make_dataset(spec, n, seed=part_seed)
        manifest = {"spec": spec.__dict__, "seed": part_seed, "count": n}
        D.write_dataset(samples, root / part, manifest=manifest)
        _emit(f"{part}_dir", root / part)
        _emit(f"{part}_count", n)
    return 0


def cmd_train_localizer(args) -> int:
    cfg = _load_config(args)
    samples = _load_split(cfg, "localize")
    train, val, test = _localization_split(samples, cfg)

    model = build_localizer(cfg.model_config(),
                            np.random.default_rng(X.derive_seed(cfg["run.base_seed"], 6)))
    train_cfg = cfg.localizer_train_config(seed=X.derive_seed(cfg["run.base_seed"], 7))
    result = TR.train_localizer(train, train_cfg, model, val)

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "localizer.ckpt"
    model.meta = {"trained_on": "localize", "base_seed": cfg["run.base_seed"]}
    save_model(result.model, ckpt)
    TR.write_history_csv(result.history, out / "localizer_history.csv")

    val_report = E.mse_localization_report(result.model, val)
    test_report = E.mse_localization_report(result.model, test)
    _emit("checkpoint", ckpt)
    _emit("epochs_run", len(result.history))
    _emit("val_mse", val_report.mse)
    _emit("val_euclid", val_report.mean_euclidean)
    _emit("test_mse", test_report.mse)
    _emit("test_euclid", test_report.mean_euclidean)
    return 0


def cmd_train_segmenter(args) -> int:
    cfg = _load_config(args)
    if args.pretrained and args.baseline:
        raise UsageError("--pretrained and --baseline are mutually exclusive")
    if not args.pretrained and not args.baseline:
        raise UsageError("pick a scheme: --pretrained <ckpt> or --baseline")
    if args.pretrained and not Path(args.pretrained).exists():
        raise FileError(f"localizer checkpoint not found: {args.pretrained}")
    scheme = X.PRETRAINED if args.pretrained else X.BASELINE

    samples = _load_split(cfg, "segment")
    k = cfg["cv.k"]
    base_seed = cfg["run.base_seed"]
    train_cfg = cfg.segmenter_train_config(
        "segment" if scheme == X.PRETRAINED else "baseline")
    result = X.cross_validate(samples, scheme, cfg.model_config(), train_cfg, k, base_seed,
                              localizer_path=args.pretrained, jobs=args.jobs,
                              return_states=True)

    out = cfg.out_dir / f"seg-{scheme}"
    out.mkdir(parents=True, exist_ok=True)
    plan = X.cv_fold_plan(len(samples), k, base_seed)
    for outcome in result.fold_outcomes:
        model = build_baseline(cfg.model_config(), np.random.default_rng(0))
        if scheme == X.PRETRAINED:
            model.encoder_frozen = True
            for level in model.encoder:
                for _, _, param in level.entries("enc"):
                    if param is not None:
                        param.frozen = True
        model.load_state(outcome.state)
        model.meta = {
            "scheme": scheme,
            "fold": outcome.fold,
            "k": k,
            "n": len(samples),
            "base_seed": base_seed,
        }
        save_model(model, out / f"fold{outcome.fold}.ckpt")
        TR.write_history_csv(outcome.history, out / f"fold{outcome.fold}_history.csv")

    _emit("scheme", scheme)
    _emit("out_dir", out)
    _emit("dice_mean", result.mean)
    _emit("dice_std", result.std)
    for fold in range(plan.k):
        fold_scores = [dice for sid, dice in result.fold_outcomes[fold].scores]
        _emit(f"fold{fold}_dice", float(np.mean(fold_scores)))
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if not args.pretrained:
        raise UsageError("sweep needs --pretrained <localizer checkpoint>")
    if not Path(args.pretrained).exists():
        raise FileError(f"localizer checkpoint not found: {args.pretrained}")

    samples = _load_split(cfg, "segment")
    report = X.efficiency_sweep(
        samples, args.pretrained, cfg.model_config(),
        cfg.segmenter_train_config("segment"), cfg.segmenter_train_config("baseline"),
        fractions=cfg["sweep.fractions"], k=cfg["cv.k"],
        base_seed=cfg["run.base_seed"], jobs=args.jobs)

    out = cfg.out_dir / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    X.write_report_csv(report, out / "report.csv")
    X.write_scores_csv(report, out / "scores.csv")
    X.write_sweep_svg(report, out / "sweep.svg")
    _emit("report_csv", out / "report.csv")
    _emit("scores_csv", out / "scores.csv")
    _emit("svg", out / "sweep.svg")
    for row in report.rows:
        print(f"fraction={row.fraction} mean_pre={row.mean_pre!r} mean_base={row.mean_base!r} "
              f"t={row.t!r} p={row.p!r}")
    return 0


LOC_SPLITS = ("train", "val", "test")
SEG_SPLITS = ("seg-all", "seg-val")


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if not Path(args.ckpt).exists():
        raise FileError(f"checkpoint not found: {args.ckpt}")
    model = load_model(args.ckpt)
    split = args.split

    if model.phase == "localizer":
        if split not in LOC_SPLITS:
            raise FormatError(
                f"kind mismatch: localizer checkpoint cannot be evaluated on split "
                f"{split!r} (expected one of {LOC_SPLITS})")
        samples = _load_split(cfg, "localize")
        train, val, test = _localization_split(samples, cfg)
        chosen = {"train": train, "val": val, "test": test}[split]
        report = E.mse_localization_report(model, chosen)
        _emit("kind", "localizer")
        _emit("split", split)
        _emit("n", report.n)
        _emit("mse", report.mse)
        _emit("euclid", report.mean_euclidean)
        return 0

    if split not in SEG_SPLITS:
        raise FormatError(
            f"kind mismatch: segmenter checkpoint cannot be evaluated on split "
            f"{split!r} (expected one of {SEG_SPLITS})")
    samples = _load_split(cfg, "segment")
    if split == "seg-val":
        meta = model.meta
        for field in ("fold", "k", "n", "base_seed"):
            if field not in meta:
                raise FormatError(f"checkpoint carries no fold metadata ({field} missing)")
        if meta["n"] != len(samples):
            raise FormatError(
                f"checkpoint was trained on {meta['n']} samples, dataset has {len(samples)}")
        plan = X.cv_fold_plan(meta["n"], meta["k"], meta["base_seed"])
        chosen = [samples[i] for i in plan.val_indices(meta["fold"])]
    else:
        chosen = samples
    scores = E.segmentation_dice_scores(model, chosen)
    _emit("kind", "segmenter")
    _emit("split", split)
    _emit("n", len(scores))
    _emit("dice_mean", float(np.mean(scores)))
    _emit("dice_std", float(np.std(scores, ddof=1)))
    return 0


def cmd_keys(_args) -> int:
    print(registry_help())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odseg",
        description="Two-phase U-net training for optic disc segmentation on "
                    "synthetic fundus-like data.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", default=None, help="key = value config file")
        p.set_defaults(fn=fn)
        return p

    p = add("gen", cmd_gen, "materialize the synthetic datasets")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty dataset dir")

    add("train-localizer", cmd_train_localizer, "phase 1: train the centroid regressor")

    p = add("train-segmenter", cmd_train_segmenter,
            "phase 2 (or baseline): k-fold segmentation training")
    p.add_argument("--pretrained", default=None, metavar="CKPT",
                   help="extend this localizer checkpoint (frozen encoder)")
    p.add_argument("--baseline", action="store_true",
                   help="train the full network from random initialization")
    p.add_argument("--jobs", type=int, default=1, help="fold-level worker processes")

    p = add("sweep", cmd_sweep, "sample-efficiency sweep over training fractions")
    p.add_argument("--pretrained", default=None, metavar="CKPT", required=False)
    p.add_argument("--jobs", type=int, default=1, help="cell-level worker processes")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a named split")
    p.add_argument("--ckpt", required=True, help="model checkpoint path")
    p.add_argument("--split", required=True,
                   help=f"localizer: {'|'.join(LOC_SPLITS)}; segmenter: {'|'.join(SEG_SPLITS)}")

    p = sub.add_parser("keys", help="print the configuration key registry")
    p.set_defaults(fn=cmd_keys)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except OdsegError as exc:
        print(f"{exc.code}-error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())
