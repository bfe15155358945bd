"""Cross-validation and the sample-efficiency sweep.

Every (fraction, fold, scheme) training job derives its own seeds from
the experiment base seed, so results are independent of execution order
and of the worker-pool size; jobs are reduced in (fraction, fold) order
to keep reports byte-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluate as E
from . import train as TR
from .errors import ParameterError, StateError
from .model import ModelConfig, extend_to_unet, load_model
from .train import TrainConfig

PRETRAINED = "pretrained"
BASELINE = "baseline"

_SEED_INIT = 0
_SEED_TRAIN = 1
_SEED_SUBSAMPLE = 2
_SCHEME_IDS = {PRETRAINED: 1, BASELINE: 2}


def derive_seed(base_seed: int, *parts: int) -> int:
    """Stable per-job seed from the base seed and job coordinates."""
    return int(np.random.SeedSequence((base_seed, *parts)).generate_state(1)[0])


def cv_fold_plan(n: int, k: int, base_seed: int) -> D.FoldPlan:
    """The fold plan shared by cross_validate, efficiency_sweep, and eval."""
    return D.kfold_split(n, k, seed=derive_seed(base_seed, 9))


@dataclass(frozen=True)
class FoldJob:
    fraction: int
    fold: int
    scheme: str
    train_samples: list
    val_samples: list
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    localizer_path: str | None
    base_seed: int
    return_state: bool = False


@dataclass
class FoldOutcome:
    fraction: int
    fold: int
    scheme: str
    scores: list            # [(sample_id, dice)]
    history: list
    state: dict | None


def run_fold_job(job: FoldJob) -> FoldOutcome:
    """Train one scheme on one (fraction, fold) cell and score its
    validation images."""
    scheme_id = _SCHEME_IDS[job.scheme]
    init_seed = derive_seed(job.base_seed, job.fraction, job.fold, scheme_id, _SEED_INIT)
    train_seed = derive_seed(job.base_seed, job.fraction, job.fold, scheme_id, _SEED_TRAIN)
    cfg = replace(job.train_cfg, seed=train_seed)

    if job.scheme == PRETRAINED:
        model = load_model(job.localizer_path)
        extend_to_unet(model, np.random.default_rng(init_seed))
        result = TR.train_segmenter(job.train_samples, cfg, model, job.val_samples)
    else:
        result = TR.train_baseline(job.train_samples, cfg, job.model_cfg,
                                   np.random.default_rng(init_seed), job.val_samples)

    dices = E.segmentation_dice_scores(result.model, job.val_samples)
    scores = [(s.id, d) for s, d in zip(job.val_samples, dices)]
    state = result.model.state_dict() if job.return_state else None
    return FoldOutcome(fraction=job.fraction, fold=job.fold, scheme=job.scheme,
                       scores=scores, history=result.history, state=state)


def _run_jobs(jobs: list, n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [run_fold_job(job) for job in jobs]
    with get_context("fork").Pool(processes=n_workers) as pool:
        return pool.map(run_fold_job, jobs, chunksize=1)


# -- five-fold cross-validation of one scheme --------------------------------


@dataclass
class CVResult:
    scheme: str
    scores: dict            # sample_id -> dice (each image validated once)
    fold_outcomes: list

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.scores.values())))

    @property
    def std(self) -> float:
        return float(np.std(list(self.scores.values()), ddof=1))


def cross_validate(samples: list, scheme: str, model_cfg: ModelConfig,
                   train_cfg: TrainConfig, k: int, base_seed: int,
                   localizer_path=None, jobs: int = 1,
                   return_states: bool = False) -> CVResult:
    if scheme not in _SCHEME_IDS:
        raise ParameterError(f"scheme must be one of {tuple(_SCHEME_IDS)}, got {scheme!r}")
    if scheme == PRETRAINED and not (localizer_path and Path(localizer_path).exists()):
        raise StateError("pretrained scheme needs an existing localizer checkpoint")
    plan = cv_fold_plan(len(samples), k, base_seed)
    job_list = []
    for fold in range(k):
        train = [samples[i] for i in plan.train_indices(fold)]
        val = [samples[i] for i in plan.val_indices(fold)]
        job_list.append(FoldJob(
            fraction=100, fold=fold, scheme=scheme, train_samples=train, val_samples=val,
            model_cfg=model_cfg, train_cfg=train_cfg,
            localizer_path=str(localizer_path) if localizer_path else None,
            base_seed=base_seed, return_state=return_states))
    outcomes = _run_jobs(job_list, jobs)
    outcomes.sort(key=lambda o: o.fold)
    scores = {}
    for outcome in outcomes:
        for sid, dice in outcome.scores:
            scores[sid] = dice
    return CVResult(scheme=scheme, scores=scores, fold_outcomes=outcomes)


# -- sample-efficiency sweep --------------------------------------------------


@dataclass(frozen=True)
class FractionRow:
    fraction: int
    mean_pre: float
    std_pre: float
    mean_base: float
    std_base: float
    t: float
    df: int
    p: float


@dataclass
class RunReport:
    fractions: tuple
    k: int
    base_seed: int
    rows: list              # [FractionRow], one per fraction
    raw_scores: list        # [(fraction, fold, sample_id, dice_pre, dice_base)]


def efficiency_sweep(samples: list, localizer_path, model_cfg: ModelConfig,
                     train_cfg: TrainConfig, base_cfg: TrainConfig,
                     fractions=D.VALID_FRACTIONS, k: int = 5, base_seed: int = 0,
                     jobs: int = 1) -> RunReport:
    """Train both schemes at every fraction x fold cell on identical data
    and aggregate pooled per-image Dice pairs with a paired t-test."""
    if not (localizer_path and Path(localizer_path).exists()):
        raise StateError("efficiency sweep needs an existing localizer checkpoint")
    for fraction in fractions:
        if fraction not in D.VALID_FRACTIONS:
            raise ParameterError(f"unsupported fraction {fraction}")
    plan = cv_fold_plan(len(samples), k, base_seed)

    job_list = []
    for fraction in fractions:
        for fold in range(k):
            train_ids = plan.train_indices(fold)
            # one subsample stream per fold keeps subsets nested across fractions
            subsample_seed = derive_seed(base_seed, fold, _SEED_SUBSAMPLE)
            chosen = D.subsample_fraction(train_ids, fraction, seed=subsample_seed)
            train = [samples[i] for i in chosen]
            val = [samples[i] for i in plan.val_indices(fold)]
            for scheme, cfg in ((PRETRAINED, train_cfg), (BASELINE, base_cfg)):
                job_list.append(FoldJob(
                    fraction=fraction, fold=fold, scheme=scheme,
                    train_samples=train, val_samples=val, model_cfg=model_cfg,
                    train_cfg=cfg, localizer_path=str(localizer_path),
                    base_seed=base_seed))

    outcomes = _run_jobs(job_list, jobs)
    by_cell = {(o.fraction, o.fold, o.scheme): o for o in outcomes}

    rows = []
    raw = []
    for fraction in fractions:
        pre_scores, base_scores = [], []
        for fold in range(plan.k):
            pre = dict(by_cell[(fraction, fold, PRETRAINED)].scores)
            base = dict(by_cell[(fraction, fold, BASELINE)].scores)
            for sid in sorted(pre):
                pre_scores.append(pre[sid])
                base_scores.append(base[sid])
                raw.append((fraction, fold, sid, pre[sid], base[sid]))
        test = E.paired_t_test(pre_scores, base_scores)
        rows.append(FractionRow(
            fraction=fraction,
            mean_pre=float(np.mean(pre_scores)),
            std_pre=float(np.std(pre_scores, ddof=1)),
            mean_base=float(np.mean(base_scores)),
            std_base=float(np.std(base_scores, ddof=1)),
            t=test.t, df=test.df, p=test.p))
    return RunReport(fractions=tuple(fractions), k=plan.k, base_seed=base_seed,
                     rows=rows, raw_scores=raw)


# -- report serialization ------------------------------------------------------

REPORT_COLUMNS = ("fraction", "mean_pre", "std_pre", "mean_base", "std_base", "t", "df", "p")


def write_report_csv(report: RunReport, path) -> None:
    lines = [",".join(REPORT_COLUMNS)]
    for r in report.rows:
        lines.append(",".join([
            str(r.fraction), repr(r.mean_pre), repr(r.std_pre), repr(r.mean_base),
            repr(r.std_base), repr(r.t), str(r.df), repr(r.p)]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_scores_csv(report: RunReport, path) -> None:
    lines = ["fraction,fold,id,dice_pretrained,dice_baseline"]
    for fraction, fold, sid, pre, base in report.raw_scores:
        lines.append(f"{fraction},{fold},{sid},{pre!r},{base!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_sweep_svg(report: RunReport, path) -> None:
    """Line chart of mean Dice per fraction for both schemes, with
    sample-std whiskers."""
    width, height = 640, 420
    ml, mr, mt, mb = 60, 20, 30, 50
    plot_w, plot_h = width - ml - mr, height - mt - mb

    lo = 0.0
    hi = 1.0
    fr_lo, fr_hi = min(report.fractions), max(report.fractions)

    def sx(fraction):
        if fr_hi == fr_lo:
            return ml + plot_w / 2.0
        return ml + (fraction - fr_lo) / (fr_hi - fr_lo) * plot_w

    def sy(value):
        return mt + (hi - value) / (hi - lo) * plot_h

    def fmt(v):
        return f"{v:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" y2="{mt + plot_h}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black"/>',
    ]
    for tick in np.linspace(lo, hi, 6):
        y = sy(tick)
        parts.append(f'<line x1="{ml - 4}" y1="{fmt(y)}" x2="{ml}" y2="{fmt(y)}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{fmt(y + 4)}" text-anchor="end" font-size="12">{tick:.1f}</text>')
    for fraction in report.fractions:
        x = sx(fraction)
        parts.append(f'<line x1="{fmt(x)}" y1="{mt + plot_h}" x2="{fmt(x)}" y2="{mt + plot_h + 4}" stroke="black"/>')
        parts.append(f'<text x="{fmt(x)}" y="{mt + plot_h + 18}" text-anchor="middle" font-size="12">{fraction}</text>')
    parts.append(f'<text x="{ml + plot_w / 2}" y="{height - 12}" text-anchor="middle" font-size="13">% of training samples</text>')
    parts.append(f'<text x="16" y="{mt + plot_h / 2}" font-size="13" transform="rotate(-90 16 {mt + plot_h / 2})" text-anchor="middle">mean Dice</text>')

    series = (
        ("#d95f02", [(r.fraction, r.mean_pre, r.std_pre) for r in report.rows], "pretrained encoder"),
        ("#1f77b4", [(r.fraction, r.mean_base, r.std_base) for r in report.rows], "random initialization"),
    )
    for color, points, label in series:
        coords = " ".join(f"{fmt(sx(f))},{fmt(sy(m))}" for f, m, _ in points)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for f, m, s in points:
            x = sx(f)
            top, bot = sy(min(m + s, hi)), sy(max(m - s, lo))
            parts.append(f'<line x1="{fmt(x)}" y1="{fmt(top)}" x2="{fmt(x)}" y2="{fmt(bot)}" stroke="{color}" stroke-width="1"/>')
            parts.append(f'<circle cx="{fmt(x)}" cy="{fmt(sy(m))}" r="3" fill="{color}"/>')
    legend_y = mt + 12
    for color, _, label in series:
        parts.append(f'<line x1="{ml + 10}" y1="{legend_y}" x2="{ml + 34}" y2="{legend_y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + 40}" y="{legend_y + 4}" font-size="12">{label}</text>')
        legend_y += 18
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
