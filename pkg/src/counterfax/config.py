"""Run configuration: a sectioned YAML tree with strict keys and seed substreams."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from counterfax.classifier import ClassifierTrainConfig
from counterfax.data import AugmentConfig
from counterfax.errors import ConfigError
from counterfax.evaluation import GridConfig, VAEConfig
from counterfax.explainers import TrainSchedule
from counterfax.losses import LossWeights, Method
from counterfax.nets import DiscriminatorSpec, GeneratorSpec

OUTPUT_DIR_ENV = "COUNTERFAX_OUTPUT_DIR"
DATASET_SOURCES = ("mnist", "patches", "folder")


def derive_seed(seed: int, stream: str) -> int:
    """Independent 31-bit seed for a named substream of the top-level seed."""
    digest = hashlib.sha256(f"{seed}/{stream}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key(s) in '{section}': {', '.join(unknown)}")


def _build(cls, section: str, data: dict | None, **overrides):
    data = dict(data or {})
    _check_keys(section, data, [f.name for f in fields(cls)])
    data.update(overrides)
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad value in '{section}': {exc}") from exc


@dataclass
class DatasetConfig:
    source: str = "mnist"
    paths: dict = field(default_factory=dict)
    keep_digits: list = field(default_factory=lambda: [3, 8])
    test_limit: int | None = 5000
    split: list = field(default_factory=lambda: [0.8, 0.2, 0.0])
    synthetic: dict = field(default_factory=dict)
    image_size: int = 28
    class_names: list | None = None

    def __post_init__(self):
        if self.source not in DATASET_SOURCES:
            raise ConfigError(f"dataset.source must be one of {DATASET_SOURCES}, got {self.source!r}")
        _check_keys("dataset.synthetic", self.synthetic, ("n_per_class", "image_size", "patch_size", "noise_level"))
        needed = {"mnist": ("train_images", "train_labels", "test_images", "test_labels"),
                  "folder": ("root",), "patches": ()}[self.source]
        _check_keys("dataset.paths", self.paths, needed)
        missing = [k for k in needed if k not in self.paths]
        if missing:
            raise ConfigError(f"dataset.paths is missing {', '.join(missing)}")


@dataclass
class ClassifierSection:
    train: ClassifierTrainConfig
    threshold: float = 0.5


@dataclass
class ExplainerSection:
    method: Method
    generator: GeneratorSpec
    discriminator: DiscriminatorSpec
    weights: LossWeights
    schedule: TrainSchedule
    images_per_domain: int | None = 2000


@dataclass
class EvaluationSection:
    vae: VAEConfig
    grid: GridConfig
    percentiles: list = field(default_factory=lambda: [90.0, 95.0])
    domain_translation: bool = True
    max_points: int | None = None
    ig_steps: int = 64

    def __post_init__(self):
        if any(not 0.0 < float(p) < 100.0 for p in self.percentiles):
            raise ConfigError(f"evaluation.percentiles must lie in (0, 100): {self.percentiles}")


@dataclass
class RunConfig:
    dataset: DatasetConfig
    classifier: ClassifierSection
    explainer: ExplainerSection
    evaluation: EvaluationSection
    seed: int = 0
    output_dir: Path = Path("runs")
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def seed_for(self, stream: str) -> int:
        return derive_seed(self.seed, stream)

    def section_hash(self, *names: str) -> str:
        """Digest of the given raw sections plus the seed; stages use it for idempotency."""
        payload = {n: self.raw.get(n) for n in names}
        payload["seed"] = self.seed
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()

    def snapshot(self) -> dict:
        return json.loads(json.dumps(dict(self.raw, seed=self.seed, output_dir=str(self.output_dir)), default=str))


TOP_KEYS = ("dataset", "classifier", "explainer", "evaluation", "seed", "output_dir")


def parse_config(raw: dict, base_dir: Path = Path("."), seed: int | None = None, method: str | None = None,
                 output_dir: str | None = None) -> RunConfig:
    """Validate a raw config tree. Explicit arguments win over file values; the
    ``COUNTERFAX_OUTPUT_DIR`` environment variable wins over the file's output_dir."""
    raw = dict(raw or {})
    _check_keys("top level", raw, TOP_KEYS)
    if seed is not None:
        raw["seed"] = seed
    seed = int(raw.get("seed", 0))
    out = output_dir or os.environ.get(OUTPUT_DIR_ENV) or raw.get("output_dir", "runs")

    dataset = _build(DatasetConfig, "dataset", raw.get("dataset"))

    clf_raw = dict(raw.get("classifier") or {})
    _check_keys("classifier", clf_raw, ("train", "threshold"))
    train_raw = dict(clf_raw.get("train") or {})
    if "augment" in train_raw:
        train_raw["augment"] = _build(AugmentConfig, "classifier.train.augment", train_raw["augment"])
    classifier = ClassifierSection(
        _build(ClassifierTrainConfig, "classifier.train", train_raw, seed=derive_seed(seed, "classifier")),
        float(clf_raw.get("threshold", 0.5)))
    if not 0.0 < classifier.threshold < 1.0:
        raise ConfigError(f"classifier.threshold {classifier.threshold} outside (0, 1)")

    ex_raw = dict(raw.get("explainer") or {})
    _check_keys("explainer", ex_raw, ("method", "generator", "discriminator", "weights", "schedule",
                                      "images_per_domain"))
    if method is not None:
        ex_raw["method"] = method
        raw["explainer"] = ex_raw
    m = Method.parse(ex_raw.get("method", "SyCE"))
    weights = LossWeights.digits(m)
    w_raw = dict(ex_raw.get("weights") or {})
    _check_keys("explainer.weights", w_raw, [f.name for f in fields(LossWeights)])
    weights = LossWeights(**dict(asdict(weights), **w_raw))
    sched_raw = dict(ex_raw.get("schedule") or {})
    if "augment" in sched_raw:
        sched_raw["augment"] = _build(AugmentConfig, "explainer.schedule.augment", sched_raw["augment"])
    gen_raw = dict(ex_raw.get("generator") or {})
    if m is Method.SSyE:
        gen_raw.setdefault("tail_convs", 2)
    explainer = ExplainerSection(
        m,
        _build(GeneratorSpec, "explainer.generator", gen_raw),
        _build(DiscriminatorSpec, "explainer.discriminator", ex_raw.get("discriminator")),
        weights,
        _build(TrainSchedule, "explainer.schedule", sched_raw, seed=derive_seed(seed, "explainer")),
        ex_raw.get("images_per_domain", 2000),
    )

    ev_raw = dict(raw.get("evaluation") or {})
    _check_keys("evaluation", ev_raw, ("vae", "grid", "percentiles", "domain_translation", "max_points", "ig_steps"))
    evaluation = EvaluationSection(
        _build(VAEConfig, "evaluation.vae", ev_raw.get("vae"), seed=derive_seed(seed, "eval")),
        _build(GridConfig, "evaluation.grid", ev_raw.get("grid")),
        [float(p) for p in ev_raw.get("percentiles", [90.0, 95.0])],
        bool(ev_raw.get("domain_translation", True)),
        ev_raw.get("max_points"),
        int(ev_raw.get("ig_steps", 64)),
    )
    return RunConfig(dataset, classifier, explainer, evaluation, seed, Path(out), Path(base_dir), raw)


def load_config(path, **overrides: Any) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = parse_config(raw, path.parent, **overrides)
    if not cfg.output_dir.is_absolute():
        cfg.output_dir = path.parent / cfg.output_dir
    return cfg
