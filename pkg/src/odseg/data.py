"""Synthetic fundus-like data, the on-disk dataset format, and splits.

A generated sample is a bright ellipse (the disc) on a textured darker
background, crossed by dark curvilinear strokes (vessels) and Gaussian
noise.  The mask is the exact ellipse interior and the centroid is the
ellipse center, so ground truth is perfect by construction.

On disk a dataset is ``images/NNNN.pgm``, ``masks/NNNN.pgm`` (0/255),
``centroids.csv`` (header ``id,x,y``) and a ``manifest.json`` recording
the generator spec and seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import pnm
from .errors import FormatError, ParameterError
from .preprocess import PreprocessConfig, preprocess_pipeline, resize_nearest


@dataclass(frozen=True)
class SyntheticSpec:
    size: int = 64
    radius_lo: float = 0.10       # disc radius range, fraction of size
    radius_hi: float = 0.22
    disc_lo: int = 170            # disc peak intensity range
    disc_hi: int = 235
    background: int = 70
    texture_amplitude: float = 25.0
    distractor_count: int = 2     # bright disc-like blobs excluded from the mask
    vessel_count: int = 4
    vessel_width: int = 1
    noise_sigma: float = 6.0

    def validate(self):
        if self.size < 8:
            raise ParameterError(f"size must be >= 8, got {self.size}")
        if not 0.0 < self.radius_lo <= self.radius_hi:
            raise ParameterError(
                f"radius range must satisfy 0 < lo <= hi, got ({self.radius_lo}, {self.radius_hi})")
        if self.radius_hi >= 0.5:
            raise ParameterError(f"radius_hi must be < 0.5, got {self.radius_hi}")
        if not 0 <= self.disc_lo <= self.disc_hi <= 255:
            raise ParameterError(f"disc intensity range ({self.disc_lo}, {self.disc_hi}) invalid")
        if self.vessel_count < 0 or self.vessel_width < 0 or self.distractor_count < 0:
            raise ParameterError("vessel_count, vessel_width, distractor_count must be >= 0")
        if self.noise_sigma < 0 or self.texture_amplitude < 0:
            raise ParameterError("noise_sigma and texture_amplitude must be >= 0")


@dataclass
class RawSample:
    """One generated or loaded sample in the raw (camera) frame."""

    id: str
    image: np.ndarray          # uint8 (H, W)
    centroid: tuple            # (x, y) floats, pixel coordinates
    mask: np.ndarray           # uint8 (H, W), values in {0, 1}


@dataclass
class Sample:
    """One preprocessed sample in the model input frame."""

    id: str
    image: np.ndarray          # float64 (S, S) in [0, 1]
    centroid: tuple
    mask: np.ndarray


def generate_sample(spec: SyntheticSpec, rng: np.random.Generator,
                    sample_id: str = "0000") -> RawSample:
    """Draw one fundus-like image with exact mask and centroid.

    Scene recipe: textured background, bright disc-like distractor blobs
    (not in the mask), the true disc, dark vessel strokes radiating from
    the disc center, then pixel noise.  Distractors and occluding
    vessels are what make few-shot segmentation hard; the vessel
    convergence on the disc is a context cue localization pretraining
    can pick up.
    """
    spec.validate()
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    # textured background with a per-image brightness offset
    img = np.full((s, s), float(spec.background) + rng.uniform(-20.0, 20.0))
    for _ in range(2):
        angle = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.5, 2.0) / s
        phase = rng.uniform(0, 2 * np.pi)
        img += (spec.texture_amplitude / 2.0) * np.sin(
            2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)

    # true disc geometry first so distractors can keep their distance
    rx = s * rng.uniform(spec.radius_lo, spec.radius_hi)
    ry = s * rng.uniform(spec.radius_lo, spec.radius_hi)
    cx = rng.uniform(rx + 1.0, s - rx - 2.0)
    cy = rng.uniform(ry + 1.0, s - ry - 2.0)

    # distractor blobs: near-twins of the disc in size and intensity, so
    # appearance alone cannot identify the target
    for _ in range(spec.distractor_count):
        dr = s * rng.uniform(0.7 * spec.radius_lo, 0.9 * spec.radius_hi)
        ex = dr * rng.uniform(0.7, 1.0)
        for _ in range(20):
            dcx = rng.uniform(2.0, s - 3.0)
            dcy = rng.uniform(2.0, s - 3.0)
            if math.hypot(dcx - cx, dcy - cy) > max(rx, ry) + dr + 2.0:
                break
        else:
            continue  # no room: drop this distractor
        tilt = rng.uniform(0, np.pi)
        peak = rng.uniform(spec.disc_lo - 10, spec.disc_hi)
        u = (xx - dcx) * np.cos(tilt) + (yy - dcy) * np.sin(tilt)
        v = -(xx - dcx) * np.sin(tilt) + (yy - dcy) * np.cos(tilt)
        drho2 = (u / dr) ** 2 + (v / ex) ** 2
        img = np.where(drho2 <= 1.0, peak * (1.0 - 0.25 * drho2), img)

    # paint the true disc; the mask is its exact ellipse interior
    rho2 = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    mask = (rho2 <= 1.0).astype(np.uint8)
    peak = rng.uniform(spec.disc_lo, spec.disc_hi)
    img = np.where(mask == 1, peak * (1.0 - 0.25 * rho2), img)

    # dark vessel strokes radiating from the disc center (quadratic Bezier
    # arcs); each stroke darkens a visited pixel once
    offsets = range(-(spec.vessel_width // 2), -(spec.vessel_width // 2) + spec.vessel_width)
    for _ in range(spec.vessel_count):
        p0 = (cx, cy)
        p2 = _edge_point(s, rng)
        mid = ((p0[0] + p2[0]) / 2.0, (p0[1] + p2[1]) / 2.0)
        p1 = (mid[0] + rng.uniform(-0.2 * s, 0.2 * s), mid[1] + rng.uniform(-0.2 * s, 0.2 * s))
        depth = rng.uniform(30.0, 60.0)
        ts = np.linspace(0.0, 1.0, 4 * s)
        bx = (1 - ts) ** 2 * p0[0] + 2 * (1 - ts) * ts * p1[0] + ts ** 2 * p2[0]
        by = (1 - ts) ** 2 * p0[1] + 2 * (1 - ts) * ts * p1[1] + ts ** 2 * p2[1]
        touched = set()
        for px, py in zip(bx, by):
            x0, y0 = int(round(px)), int(round(py))
            for dy in offsets:
                for dx in offsets:
                    x, y = x0 + dx, y0 + dy
                    if 0 <= x < s and 0 <= y < s:
                        touched.add((y, x))
        for y, x in touched:
            img[y, x] -= depth

    img += rng.normal(0.0, spec.noise_sigma, size=(s, s))
    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return RawSample(id=sample_id, image=img, centroid=(cx, cy), mask=mask)


def _edge_point(s: int, rng) -> tuple:
    edge = rng.integers(0, 4)
    t = rng.uniform(0, s - 1)
    if edge == 0:
        return (t, 0.0)
    if edge == 1:
        return (t, float(s - 1))
    if edge == 2:
        return (0.0, t)
    return (float(s - 1), t)


def make_dataset(spec: SyntheticSpec, n: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [generate_sample(spec, rng, sample_id=f"{i:04d}") for i in range(n)]


# -- on-disk format ---------------------------------------------------------


def write_dataset(samples: list, directory, manifest: dict | None = None) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    with open(directory / "centroids.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y"])
        for sample in samples:
            pnm.write_pgm(directory / "images" / f"{sample.id}.pgm", sample.image)
            pnm.write_pgm(directory / "masks" / f"{sample.id}.pgm", sample.mask * 255)
            writer.writerow([sample.id, repr(sample.centroid[0]), repr(sample.centroid[1])])
    if manifest is not None:
        with open(directory / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_dataset(directory) -> list:
    """Load and validate a dataset directory; rejects invariant violations."""
    directory = Path(directory)
    csv_path = directory / "centroids.csv"
    if not csv_path.exists():
        raise FormatError(f"{directory}: missing centroids.csv")
    samples = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "x", "y"]:
            raise FormatError(f"{csv_path}: expected header id,x,y, got {header}")
        for row in reader:
            if len(row) != 3:
                raise FormatError(f"{csv_path}: malformed row {row}")
            sid = row[0]
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise FormatError(f"{csv_path}: non-numeric centroid in row {row}") from None
            img_path = directory / "images" / f"{sid}.pgm"
            mask_path = directory / "masks" / f"{sid}.pgm"
            if not img_path.exists() or not mask_path.exists():
                raise FormatError(f"{directory}: missing files for sample {sid}")
            image = pnm.read_pnm(img_path)
            mask_raw = pnm.read_pnm(mask_path)
            if mask_raw.shape != image.shape:
                raise FormatError(
                    f"{directory}: sample {sid} mask shape {mask_raw.shape} != image {image.shape}")
            levels = np.unique(mask_raw)
            if not np.all(np.isin(levels, [0, 255])):
                raise FormatError(f"{directory}: sample {sid} mask is not 0/255")
            mask = (mask_raw > 0).astype(np.uint8)
            if mask.sum() == 0:
                raise ParameterError(f"{directory}: sample {sid} mask has no foreground")
            h, w = image.shape
            if not (0 <= x < w and 0 <= y < h):
                raise ParameterError(f"{directory}: sample {sid} centroid ({x}, {y}) out of bounds")
            samples.append(RawSample(id=sid, image=image, centroid=(x, y), mask=mask))
    if not samples:
        raise FormatError(f"{directory}: dataset is empty")
    return samples


def prepare_samples(raw: list, cfg: PreprocessConfig) -> list:
    """Preprocess images and map labels into the model input frame."""
    out = []
    t = cfg.target_size
    for sample in raw:
        h, w = sample.image.shape
        image = preprocess_pipeline(sample.image, cfg)
        mask = resize_nearest(sample.mask, t, t)
        cx = sample.centroid[0] * t / w
        cy = sample.centroid[1] * t / h
        out.append(Sample(id=sample.id, image=image, centroid=(cx, cy), mask=mask))
    return out


# -- batching helpers -------------------------------------------------------


def stack_images(samples: list) -> np.ndarray:
    return np.stack([s.image for s in samples])[:, None, :, :]


def stack_centroids(samples: list) -> np.ndarray:
    return np.array([[s.centroid[0], s.centroid[1]] for s in samples], dtype=np.float64)


def stack_masks(samples: list) -> np.ndarray:
    return np.stack([s.mask for s in samples]).astype(np.float64)[:, None, :, :]


# -- splits -----------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: tuple  # sample index -> fold id

    def val_indices(self, fold: int) -> list:
        return [i for i, f in enumerate(self.assignment) if f == fold]

    def train_indices(self, fold: int) -> list:
        return [i for i, f in enumerate(self.assignment) if f != fold]


def kfold_split(n: int, k: int, seed: int) -> FoldPlan:
    """Shuffled round-robin assignment; fold sizes differ by at most 1."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if n < k:
        raise ParameterError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = [0] * n
    for pos, idx in enumerate(perm):
        assignment[idx] = pos % k
    return FoldPlan(k=k, assignment=tuple(assignment))


VALID_FRACTIONS = tuple(range(10, 101, 10))


def subsample_fraction(train_ids, fraction: int, seed: int) -> list:
    """Deterministic nested subsets: one shuffled prefix per seed, so the
    20% subset contains the 10% subset."""
    if fraction not in VALID_FRACTIONS:
        raise ParameterError(f"fraction must be one of {VALID_FRACTIONS}, got {fraction}")
    ids = list(train_ids)
    m = math.ceil(fraction * len(ids) / 100.0)
    order = np.random.default_rng(seed).permutation(len(ids))
    return sorted(ids[i] for i in order[:m])
