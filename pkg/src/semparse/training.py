"""Mini-batch RMSProp training with clipping, dropout and early stopping."""
from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import nn
from .evaluation import evaluate
from .model import Batch, Dropout, ModelParameters, batch_nll, init_model
from .pipeline import EncodedExample, Pipeline

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 20
    smoothing: float = 0.95
    clip_threshold: float = 5.0
    init_range: float = 0.08
    dropout_rate: float = 0.3
    hidden_dim: int = 200
    embed_dim: int = 200
    num_layers: int = 1
    max_epochs: int = 100
    patience: int = 10
    seed: int = 1
    dev_fraction: float = 0.1
    eval_every: int = 1
    stop_accuracy: float | None = None
    mode: str = "seq2seq"
    attention: bool = True
    use_arguments: bool = True
    stem: bool = False
    input_min_count: int = 2
    lf_format: str = "auto"
    max_decode_len: int = 100
    bucket_batches: int = 4

    def errors(self) -> list[str]:
        errs = []
        for name in ("learning_rate", "batch_size", "clip_threshold", "init_range", "hidden_dim",
                     "embed_dim", "num_layers", "max_epochs", "eval_every", "input_min_count",
                     "max_decode_len", "bucket_batches"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be positive (got {getattr(self, name)})")
        if not 0 < self.smoothing < 1:
            errs.append(f"smoothing must lie in (0, 1) (got {self.smoothing})")
        if not 0 <= self.dropout_rate < 1:
            errs.append(f"dropout_rate must lie in [0, 1) (got {self.dropout_rate})")
        if not 0 <= self.dev_fraction <= 0.5:
            errs.append(f"dev_fraction must lie in [0, 0.5] (got {self.dev_fraction})")
        if self.patience < 0:
            errs.append(f"patience must be >= 0 (got {self.patience})")
        if self.mode not in ("seq2seq", "seq2tree"):
            errs.append(f"mode must be seq2seq or seq2tree (got {self.mode!r})")
        if self.lf_format not in ("auto", "sexpr", "prolog"):
            errs.append(f"lf_format must be auto, sexpr or prolog (got {self.lf_format!r})")
        return errs

    def validate(self) -> "TrainConfig":
        errs = self.errors()
        if errs:
            raise nn.ConfigurationError("; ".join(errs))
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise nn.ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def ablation(self) -> str:
        tags = [t for t, off in (("-attention", not self.attention), ("-argument", not self.use_arguments)) if off]
        return " ".join(tags) or "full"


def make_pipeline(config: TrainConfig, lexicon=None) -> Pipeline:
    return Pipeline(
        mode=config.mode,
        lexicon=lexicon,
        use_arguments=config.use_arguments,
        stem=config.stem,
        lf_format=config.lf_format,
        input_min_count=config.input_min_count,
    )


def make_model(config: TrainConfig, pipeline: Pipeline) -> ModelParameters:
    params = ModelParameters(
        len(pipeline.src_vocab), len(pipeline.tgt_vocab), config.hidden_dim, config.embed_dim,
        config.num_layers, config.mode, config.attention,
    )
    return init_model(params, config.seed, config.init_range)


# --------------------------------------------------------------------------
# batching


def make_batches(
    data: Sequence[EncodedExample], batch_size: int, rng: np.random.Generator, bucket_batches: int = 4
) -> list[Batch]:
    """Shuffle, then sort each bucket of ``bucket_batches * batch_size`` examples
    by input length and cut it into batches."""
    if not data:
        raise nn.ConfigurationError("cannot batch an empty dataset")
    order = rng.permutation(len(data))
    bucket = batch_size * bucket_batches
    batches = []
    for start in range(0, len(order), bucket):
        chunk = sorted(order[start : start + bucket], key=lambda i: (len(data[i].src), i))
        for b in range(0, len(chunk), batch_size):
            exs = [data[i] for i in chunk[b : b + batch_size]]
            batches.append(Batch.from_lists([e.src for e in exs], [e.tgt for e in exs], exs))
    return batches


def split_dev(items: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic (train, dev) split by seeded shuffle."""
    n_dev = int(round(len(items) * fraction))
    if fraction > 0 and len(items) >= 2:
        n_dev = min(max(n_dev, 1), len(items) - 1)
    order = nn.make_rng(seed, "split").permutation(len(items))
    dev = sorted(order[:n_dev])
    train = sorted(order[n_dev:])
    return [items[i] for i in train], [items[i] for i in dev]


def kfold(items: Sequence, k: int, seed: int) -> list[tuple[list, list]]:
    order = nn.make_rng(seed, "split").permutation(len(items))
    folds = np.array_split(order, k)
    out = []
    for i in range(k):
        dev = set(folds[i].tolist())
        out.append(([items[j] for j in range(len(items)) if j not in dev], [items[j] for j in sorted(dev)]))
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_accuracy: float | None
    max_grad_norm: float  # largest pre-clip norm seen this epoch
    max_clipped_norm: float  # largest post-clip norm
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_accuracy: float = -1.0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def train_epoch(
    params: ModelParameters,
    batches: Sequence[Batch],
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    training: bool = True,
) -> tuple[float, float, float]:
    """One pass over ``batches``; returns (mean NLL per example, max pre-clip norm, max post-clip norm).

    The optimizer consumes the gradient summed over each batch.
    """
    drop = Dropout(config.dropout_rate, rng, training)
    plist = params.parameters()
    total, count = 0.0, 0
    max_norm = max_clipped = 0.0
    for k, batch in enumerate(batches):
        params.zero_grad()
        loss = batch_nll(params, batch, drop, backward=True)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} in batch {k}")
        norm = nn.clip_gradients(plist, config.clip_threshold)
        max_norm = max(max_norm, norm)
        max_clipped = max(max_clipped, nn.global_grad_norm(plist))
        nn.rmsprop_step(plist, config.learning_rate, config.smoothing)
        total += loss
        count += batch.size
    return total / count, max_norm, max_clipped


def dataset_nll(params: ModelParameters, data: Sequence[EncodedExample], batch_size: int = 20) -> float:
    """Mean NLL per example without dropout or updates."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        exs = data[start : start + batch_size]
        total += batch_nll(params, Batch.from_lists([e.src for e in exs], [e.tgt for e in exs]))
    return total / len(data)


def train(
    params: ModelParameters,
    pipeline: Pipeline,
    train_data: Sequence[EncodedExample],
    config: TrainConfig,
    dev_data: Sequence[EncodedExample] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[ModelParameters, TrainReport]:
    """Train with early stopping on dev exact-match accuracy.

    Without ``dev_data``, a ``dev_fraction`` slice of ``train_data`` is held
    out; with ``dev_fraction`` 0 the training set itself is monitored.
    Returns the best parameters seen and the report.
    """
    config.validate()
    train_data = list(train_data)
    if dev_data is None:
        if config.dev_fraction > 0:
            if len(train_data) < 2:
                raise nn.ConfigurationError("need at least 2 examples to split off a dev set")
            train_data, dev_data = split_dev(train_data, config.dev_fraction, config.seed)
        else:
            dev_data = train_data
    shuffle_rng = nn.make_rng(config.seed, "shuffle")
    drop_rng = nn.make_rng(config.seed, "dropout")
    report = TrainReport()
    best = params.copy()
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        batches = make_batches(train_data, config.batch_size, shuffle_rng, config.bucket_batches)
        loss, norm, clipped = train_epoch(params, batches, config, drop_rng)
        acc = None
        if epoch % config.eval_every == 0 or epoch == config.max_epochs:
            acc = evaluate(params, [e.pair for e in dev_data], pipeline, max_len=config.max_decode_len).accuracy
        rec = EpochRecord(epoch, loss, acc, norm, clipped, time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info(
            "epoch %d loss %.4f dev_acc %s grad_norm %.3f time %.1fs",
            epoch, loss, "-" if acc is None else f"{acc:.4f}", norm, rec.seconds,
        )
        if on_epoch:
            on_epoch(rec)
        if acc is None:
            continue
        if acc > report.best_dev_accuracy:
            report.best_dev_accuracy = acc
            report.best_epoch = epoch
            best = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                report.stopped_early = True
                break
        if config.stop_accuracy is not None and acc >= config.stop_accuracy:
            report.stopped_early = True
            break
    return best, report


# --------------------------------------------------------------------------
# hyper-parameter search

GRID_KEYS = ("dropout_rate", "hidden_dim", "learning_rate")


@dataclass
class SweepRow:
    settings: dict
    dev_accuracy: float
    best_epoch: int


def grid_points(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise nn.ConfigurationError("sweep grid is empty")
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def apply_settings(config: TrainConfig, settings: dict) -> TrainConfig:
    d = config.to_dict()
    d.update(settings)
    if "hidden_dim" in settings and "embed_dim" not in settings:
        d["embed_dim"] = settings["hidden_dim"]
    return TrainConfig.from_dict(d)


def model_size(settings: dict, config: TrainConfig) -> tuple:
    return (settings.get("hidden_dim", config.hidden_dim), settings.get("embed_dim", config.embed_dim),
            settings.get("num_layers", config.num_layers))


def select_best(rows: Sequence[SweepRow], config: TrainConfig) -> SweepRow:
    """Highest dev accuracy; ties go to the smaller model, then grid order."""
    return min(rows, key=lambda r: (-r.dev_accuracy, model_size(r.settings, config)))
