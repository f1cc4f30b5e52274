"""Run configuration, the training loop for both models, evaluation and run directories."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import metrics
from .data import CATEGORIES, Dataset, load_dataset, stratified_split
from .diffcore import AdamState
from .model import LossWeights, Model, ModelConfig, load_checkpoint, predict, save_checkpoint, train_step
from .model import latent_means
from .resampler import (
    ResampleSchedule,
    distribution_entropy,
    draw_batch,
    fit_histograms,
    sample_weights,
    uniform,
)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.dbvw"
CONFIG_NAME = "config.txt"
METRICS_NAME = "metrics.csv"
LOG_NAME = "log.txt"
METRICS_HEADER = ("run_id", "model", "category", "n_train", "n_val", "correct", "total", "accuracy")


class NumericDivergence(RuntimeError):
    pass


@dataclass
class RunConfig:
    mode: str = "dbvae"
    seed: int = 0
    epochs: int = 20
    batch_size: int = 32
    validation_fraction: float = 0.1
    # architecture
    latent_dim: int = 32
    filters: tuple[int, ...] = (32, 64, 128, 256)
    dense_width: int = 512
    # loss weights
    classification_weight: float = 1.0
    vae_weight: float = 1.0
    kl_weight: float = 5e-4
    reconstruction_weight: float = 1.0
    # resampler
    bins: int = 10
    alpha: float = 1e-3
    resample_mode: str = "max"
    resample_every: int = 1
    resample: bool = True
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    data: str = ""
    out: str = ""

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        if self.mode not in ("cnn", "dbvae"):
            raise ValueError(f"mode must be cnn or dbvae, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            latent_dim=self.latent_dim, filters=self.filters, dense_width=self.dense_width,
            mode=self.mode,
            loss_weights=LossWeights(self.classification_weight, self.vae_weight,
                                     self.kl_weight, self.reconstruction_weight),
        )

    @property
    def schedule(self) -> ResampleSchedule:
        return ResampleSchedule(self.resample_every, self.resample and self.mode == "dbvae")

    # flat "key = value" text form
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_value(cls, key: str, raw: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        t = types[key]
        raw = raw.strip()
        if t == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{key}: expected a boolean, got {raw!r}")
            return raw.lower() in ("true", "1", "yes")
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t.startswith("tuple"):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw

    @classmethod
    def parse_text(cls, text: str) -> dict:
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key] = cls.parse_value(key, raw)
        return values

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls(**cls.parse_text(text))


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent stream per purpose so toggling one consumer never shifts another."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))


def atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def split_digest(val: Dataset) -> str:
    return hashlib.sha256(np.asarray(val.source_index, dtype="<i8").tobytes()).hexdigest()[:16]


@dataclass
class Evaluation:
    confusion: np.ndarray
    n_train: np.ndarray

    @property
    def per_category(self) -> np.ndarray:
        return metrics.per_category_accuracy(self.confusion)

    @property
    def balanced(self) -> float:
        return metrics.balanced_accuracy(self.confusion)

    @property
    def standard(self) -> float:
        return metrics.standard_accuracy(self.confusion)

    def csv_rows(self, run_id: str, model: str) -> list[tuple]:
        rows = []
        n_val = self.confusion.sum(axis=1)
        for k, name in enumerate(CATEGORIES[: len(n_val)]):
            correct, total = int(self.confusion[k, k]), int(n_val[k])
            rows.append((run_id, model, name, int(self.n_train[k]), total, correct, total,
                         f"{correct / total:.10f}"))
        return rows

    def to_dict(self) -> dict:
        return {
            "confusion_matrix": self.confusion.tolist(),
            "categories": list(CATEGORIES[: len(self.confusion)]),
            "per_category_accuracy": [float(a) for a in self.per_category],
            "standard_accuracy": self.standard,
            "balanced_accuracy": self.balanced,
            "n_train": [int(n) for n in self.n_train],
            "n_eval": [int(n) for n in self.confusion.sum(axis=1)],
        }


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(str(v) for v in row) + "\n")
    return buf.getvalue()


def evaluate(model: Model, params, dataset: Dataset, n_train: np.ndarray) -> Evaluation:
    preds = predict(model, params, dataset.images)
    cm = metrics.confusion_matrix(preds, dataset.labels, model.config.num_categories)
    return Evaluation(cm, np.asarray(n_train))


@dataclass
class RunResult:
    config: RunConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    train: Dataset
    val: Dataset
    log_lines: list[str] = field(default_factory=list)
    evaluation: Evaluation | None = None


def train_run(cfg: RunConfig, dataset: Dataset | None = None,
              on_epoch: Callable[[str], None] | None = None) -> RunResult:
    """Split, initialize, train for ``cfg.epochs`` and evaluate on the held-out split."""
    if dataset is None:
        dataset = load_dataset(cfg.data)
    train, val = stratified_split(dataset, cfg.validation_fraction, derive_rng(cfg.seed, "split"))
    model = Model(cfg.model_config())
    params = model.init_params(derive_rng(cfg.seed, "init"))
    adam = AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    batch_rng = derive_rng(cfg.seed, "batch")
    eps_rng = derive_rng(cfg.seed, "epsilon")
    lines = [f"split seed={cfg.seed} n_train={len(train)} n_val={len(val)} val_digest={split_digest(val)}"]
    if on_epoch:
        on_epoch(lines[0])

    steps = math.ceil(len(train) / cfg.batch_size)
    dist = uniform(len(train))
    schedule = cfg.schedule
    for epoch in range(cfg.epochs):
        if schedule(epoch):
            mu = latent_means(model, params, train.images)
            hists = fit_histograms(mu, cfg.bins)
            dist = sample_weights(hists, mu, cfg.alpha, cfg.resample_mode)
        sums: dict[str, float] = {}
        for _ in range(steps):
            idx = draw_batch(dist, cfg.batch_size, batch_rng)
            params, adam, br = train_step(model, params, adam, train.images[idx], train.labels[idx], eps_rng)
            if not all(math.isfinite(v) for v in br.values()):
                raise NumericDivergence(f"non-finite loss at epoch {epoch}, step {adam.step}: {br}")
            for k, v in br.items():
                sums[k] = sums.get(k, 0.0) + v
        parts = [f"epoch={epoch}"] + [f"{k}={v / steps:.6f}" for k, v in sums.items()]
        if cfg.mode == "dbvae":
            parts.append(f"entropy={distribution_entropy(dist):.6f}")
        lines.append(" ".join(parts))
        if on_epoch:
            on_epoch(lines[-1])

    result = RunResult(cfg, params, adam, train, val, lines)
    result.evaluation = evaluate(model, params, val, train.counts())
    return result


def write_run_directory(result: RunResult, run_dir, run_id: str = "0") -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    atomic_write(run_dir / CONFIG_NAME, cfg.to_text())
    save_checkpoint(result.params, cfg.model_config(), result.adam, run_dir / CHECKPOINT_NAME, cfg.seed)
    atomic_write(run_dir / LOG_NAME, "\n".join(result.log_lines) + "\n")
    atomic_write(run_dir / METRICS_NAME, csv_text(METRICS_HEADER, result.evaluation.csv_rows(run_id, cfg.mode)))
    return run_dir


def read_run_config(run_dir) -> RunConfig:
    return RunConfig.from_text((Path(run_dir) / CONFIG_NAME).read_text())


def evaluate_run(run_dir, dataset: Dataset, split: str = "val") -> Evaluation:
    """Reload a run's checkpoint, reproduce its split and evaluate one side of it."""
    run_dir = Path(run_dir)
    cfg = read_run_config(run_dir)
    state = load_checkpoint(run_dir / CHECKPOINT_NAME)
    train, val = stratified_split(dataset, cfg.validation_fraction, derive_rng(cfg.seed, "split"))
    target = {"train": train, "val": val}[split]
    return evaluate(Model(state.config), state.params, target, train.counts())


def dump_json(obj: Mapping) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
