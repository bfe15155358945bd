"""Plain-text experiment configuration: ``key = value`` lines.

Files may contain blank lines and ``#`` comments.  Every key lives in
the registry below with a type and default; unknown keys are rejected
so typos fail loudly.  The default output root comes from the
``ODSEG_OUT`` environment variable when set.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .data import SyntheticSpec
from .errors import ParameterError
from .model import ModelConfig
from .preprocess import PreprocessConfig
from .train import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_fractions(text: str) -> tuple:
    return tuple(int(part.strip()) for part in text.split(",") if part.strip())


@dataclass(frozen=True)
class Key:
    name: str
    parse: type | callable
    default: object
    help: str


REGISTRY = [
    Key("data.dir", str, "", "dataset root (default: <run.out_dir>/data)"),
    Key("synth.seed", int, 0, "seed for synthetic dataset generation"),
    Key("synth.size", int, 64, "generated image side length in pixels"),
    Key("synth.radius_lo", float, 0.10, "minimum disc radius as a fraction of size"),
    Key("synth.radius_hi", float, 0.22, "maximum disc radius as a fraction of size"),
    Key("synth.disc_lo", int, 170, "minimum disc peak intensity"),
    Key("synth.disc_hi", int, 235, "maximum disc peak intensity"),
    Key("synth.background", int, 70, "base background intensity"),
    Key("synth.texture", float, 25.0, "background texture amplitude"),
    Key("synth.distractors", int, 2, "bright disc-like blobs outside the mask"),
    Key("synth.vessels", int, 4, "dark strokes radiating from the disc"),
    Key("synth.vessel_width", int, 1, "stroke width in pixels"),
    Key("synth.noise_sigma", float, 6.0, "Gaussian pixel noise sigma"),
    Key("synth.n_localize", int, 1024, "centroid-labeled samples for phase 1"),
    Key("synth.n_segment", int, 92, "mask-labeled samples for phase 2"),
    Key("pre.target_size", int, 64, "preprocessed size; also the model input size"),
    Key("pre.clahe_tiles", int, 8, "CLAHE grid (tiles x tiles)"),
    Key("pre.clahe_clip", float, 2.0, "CLAHE clip limit (multiple of uniform bin height)"),
    Key("pre.gamma", float, 1.2, "gamma correction exponent"),
    Key("model.levels", int, 4, "encoder depth (number of poolings)"),
    Key("model.base_filters", int, 16, "channels at the first encoder level"),
    Key("model.dropout", float, 0.2, "dropout rate after each encoder level"),
    Key("loc.optimizer", str, "rmsprop", "phase-1 optimizer (rmsprop | adam)"),
    Key("loc.lr", float, 1e-3, "phase-1 learning rate"),
    Key("loc.batch_size", int, 8, "phase-1 batch size"),
    Key("loc.epochs", int, 30, "phase-1 epoch budget"),
    Key("loc.patience", int, 20, "phase-1 early-stop patience (0 disables)"),
    Key("loc.val_fraction", float, 0.1, "phase-1 validation share of the dataset"),
    Key("loc.test_fraction", float, 0.1, "phase-1 test share of the dataset"),
    Key("seg.optimizer", str, "adam", "phase-2/baseline optimizer"),
    Key("seg.lr", float, 1e-3, "phase-2/baseline learning rate"),
    Key("seg.batch_size", int, 4, "phase-2/baseline batch size"),
    Key("seg.epochs", int, 30, "phase-2/baseline epoch budget"),
    Key("seg.patience", int, 20, "phase-2/baseline early-stop patience (0 disables)"),
    Key("cv.k", int, 5, "cross-validation fold count"),
    Key("sweep.fractions", _parse_fractions, tuple(range(10, 101, 10)),
        "comma-separated training-sample percentages"),
    Key("run.base_seed", int, 0, "master seed for splits, inits, and training"),
    Key("run.out_dir", str, "", "output directory (default: $ODSEG_OUT or ./odseg-out)"),
]

_BY_NAME = {key.name: key for key in REGISTRY}


class ExperimentConfig:
    """Typed view over a parsed config file plus registry defaults."""

    def __init__(self, values: dict | None = None):
        self._values = {}
        for name, raw in (values or {}).items():
            if name not in _BY_NAME:
                raise ParameterError(f"unknown configuration key {name!r}")
            self._values[name] = raw

    @classmethod
    def parse(cls, path) -> "ExperimentConfig":
        path = Path(path)
        values = {}
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            name, _, raw = stripped.partition("=")
            name = name.strip()
            raw = raw.strip()
            key = _BY_NAME.get(name)
            if key is None:
                raise ParameterError(f"{path}:{lineno}: unknown configuration key {name!r}")
            if name in values:
                raise ParameterError(f"{path}:{lineno}: duplicate key {name!r}")
            try:
                values[name] = key.parse(raw)
            except (TypeError, ValueError) as exc:
                raise ParameterError(f"{path}:{lineno}: bad value for {name}: {exc}") from None
        return cls(values)

    def __getitem__(self, name: str):
        key = _BY_NAME.get(name)
        if key is None:
            raise ParameterError(f"unknown configuration key {name!r}")
        return self._values.get(name, key.default)

    def set(self, name: str, value):
        if name not in _BY_NAME:
            raise ParameterError(f"unknown configuration key {name!r}")
        self._values[name] = value

    # -- derived composite configs ----------------------------------------

    @property
    def out_dir(self) -> Path:
        configured = self["run.out_dir"]
        if configured:
            return Path(configured)
        return Path(os.environ.get("ODSEG_OUT", "odseg-out"))

    @property
    def data_dir(self) -> Path:
        configured = self["data.dir"]
        if configured:
            return Path(configured)
        return self.out_dir / "data"

    def synthetic_spec(self) -> SyntheticSpec:
        spec = SyntheticSpec(
            size=self["synth.size"],
            radius_lo=self["synth.radius_lo"],
            radius_hi=self["synth.radius_hi"],
            disc_lo=self["synth.disc_lo"],
            disc_hi=self["synth.disc_hi"],
            background=self["synth.background"],
            texture_amplitude=self["synth.texture"],
            distractor_count=self["synth.distractors"],
            vessel_count=self["synth.vessels"],
            vessel_width=self["synth.vessel_width"],
            noise_sigma=self["synth.noise_sigma"],
        )
        spec.validate()
        return spec

    def preprocess_config(self) -> PreprocessConfig:
        cfg = PreprocessConfig(
            target_size=self["pre.target_size"],
            clahe_tiles=self["pre.clahe_tiles"],
            clahe_clip=self["pre.clahe_clip"],
            gamma=self["pre.gamma"],
        )
        cfg.validate()
        return cfg

    def model_config(self) -> ModelConfig:
        cfg = ModelConfig(
            input_size=self["pre.target_size"],
            levels=self["model.levels"],
            base_filters=self["model.base_filters"],
            dropout_rate=self["model.dropout"],
        )
        cfg.validate()
        return cfg

    def localizer_train_config(self, seed: int) -> TrainConfig:
        cfg = TrainConfig(
            phase="localize",
            optimizer=self["loc.optimizer"],
            learning_rate=self["loc.lr"],
            batch_size=self["loc.batch_size"],
            epochs=self["loc.epochs"],
            seed=seed,
            patience=self["loc.patience"],
        )
        cfg.validate()
        return cfg

    def segmenter_train_config(self, phase: str, seed: int = 0) -> TrainConfig:
        cfg = TrainConfig(
            phase=phase,
            optimizer=self["seg.optimizer"],
            learning_rate=self["seg.lr"],
            batch_size=self["seg.batch_size"],
            epochs=self["seg.epochs"],
            seed=seed,
            patience=self["seg.patience"],
        )
        cfg.validate()
        return cfg


def registry_help() -> str:
    lines = ["configuration keys (key = value per line, # comments):"]
    for key in REGISTRY:
        lines.append(f"  {key.name:<22} default {key.default!r:<24} {key.help}")
    return "\n".join(lines)
