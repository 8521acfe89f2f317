"""One-shot pseudo-label caching and feature-mimicking fine-tuning.

The cache stores the teacher's final-block feature map for each fine-tuning
sample, generated exactly once.  Fine-tuning then minimizes the mean squared
error between those stored labels and the student's final-block features
with plain SGD; the classifier stays frozen throughout.  A live mode that
re-queries the teacher every mini-batch exists as the expensive reference:
with equal seeds it follows a bitwise-identical parameter trajectory, it is
just slower.

Learning-rate schedule: the rate starts at 0.02 and is multiplied by 0.1
each time another 40% of the total steps has elapsed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .formats import load_cache_file, network_fingerprint, save_cache_file
from .network import (
    ResidualNetwork,
    backprop_from_outputs,
    feature_mse,
    forward,
    forward_trace,
    normalize_skip,
    sgd_step,
)

SOURCE_FINAL_BLOCK = "final_block"
SOURCE_POOLED = "pooled"


@dataclass
class PseudoLabelCache:
    inputs: np.ndarray   # (N, input_dim)
    labels: np.ndarray   # (N, pixels_per_label)
    teacher_fingerprint: int
    feature_source: str = SOURCE_FINAL_BLOCK

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def pixels_per_label(self) -> int:
        return self.labels.shape[1]

    def save(self, path) -> None:
        save_cache_file(path, self.inputs, self.labels, self.teacher_fingerprint)

    @classmethod
    def load(cls, path) -> "PseudoLabelCache":
        inputs, labels, fingerprint = load_cache_file(path)
        source = SOURCE_POOLED if labels.shape[1] == 1 else SOURCE_FINAL_BLOCK
        return cls(inputs, labels, fingerprint, source)


@dataclass
class DistillConfig:
    steps: int = 500
    batch_size: int = 64
    lr0: float = 0.02
    decay_factor: float = 0.1
    decay_every_fraction: float = 0.4
    freeze_classifier: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class DistillReport:
    loss_trace: list[float]
    wall_time: float
    teacher_query_count: int
    final_loss: float


def lr_at(step: int, config: DistillConfig) -> float:
    """Learning rate for ``step``; one decay per elapsed 40% of the run.

    Decays are applied by sequential multiplication so the canonical
    schedule hits 0.02, 0.002, 0.0002 exactly in float64.
    """
    if step < 0 or step >= max(config.steps, 1):
        raise ConfigError(f"step {step} outside 0..{config.steps - 1}")
    span = config.decay_every_fraction * config.steps
    decays = int(step / span) if span > 0 else 0
    lr = config.lr0
    for _ in range(decays):
        lr *= config.decay_factor
    return lr


def required_dataset_size(student_param_count: int, pixels_per_label: int, kappa: float = 1.0) -> int:
    """Fine-tuning set size below which overfitting is likely: the student's
    parameter count divided by the per-label pixel count, scaled by kappa."""
    if pixels_per_label < 1:
        raise ConfigError(f"pixels_per_label must be >= 1, got {pixels_per_label}")
    if kappa <= 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    return max(1, math.ceil(kappa * student_param_count / pixels_per_label))


def _teacher_labels(teacher, inputs, feature_source):
    """Pseudo-labels for a stack of inputs.  The forward path is bitwise
    batch-composition invariant, so a label computed here equals the label
    the same teacher would produce for that sample in any other batch."""
    _, feats = forward(teacher, inputs)
    if feature_source == SOURCE_POOLED:
        return feats.mean(axis=1, keepdims=True)
    return feats


def build_cache(teacher, samples, feature_source=SOURCE_FINAL_BLOCK) -> PseudoLabelCache:
    """Generate pseudo-labels once for ``samples`` and store them: a single
    pass over the set, each sample queried exactly once.

    Labels are the teacher's final-block features, or their per-sample mean
    for the pooled ablation source (one pixel per label).
    """
    if feature_source not in (SOURCE_FINAL_BLOCK, SOURCE_POOLED):
        raise ConfigError(f"unknown feature source {feature_source!r}")
    inputs = np.ascontiguousarray(samples, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ConfigError(f"samples must be a non-empty 2-D array, got shape {inputs.shape}")
    labels = _teacher_labels(teacher, inputs, feature_source)
    return PseudoLabelCache(inputs, labels, network_fingerprint(teacher), feature_source)


def _batch_indices(size: int, batch_size: int, seed: int):
    """Endless index stream: per-epoch shuffles (epoch e reseeded from
    (seed, e)) concatenated and sliced into fixed-size batches."""
    epoch = 0
    buffer: list[int] = []
    while True:
        while len(buffer) < batch_size:
            rng = np.random.default_rng([seed, epoch])
            buffer.extend(rng.permutation(size).tolist())
            epoch += 1
        yield np.array(buffer[:batch_size], dtype=np.intp)
        del buffer[:batch_size]


def _feature_loss_parts(student, skip, x, targets, feature_source):
    """Forward trace, loss, and dL/d(features) for one mini-batch."""
    trace = forward_trace(student, x, skip)
    feats = trace.features
    if feature_source == SOURCE_POOLED:
        pooled = feats.mean(axis=1, keepdims=True)
        if targets.shape != pooled.shape:
            raise DimensionError(f"pooled labels {targets.shape} != {pooled.shape}")
        loss = feature_mse(pooled, targets)
        # d(pooled)/d(feature pixel) = 1/width, broadcast back over pixels
        grad_feats = (2.0 / pooled.size) * (pooled - targets) / feats.shape[1]
        grad_feats = np.broadcast_to(grad_feats, feats.shape).copy()
    else:
        if targets.shape != feats.shape:
            raise DimensionError(f"labels {targets.shape} != student features {feats.shape}")
        loss = feature_mse(feats, targets)
        grad_feats = (2.0 / feats.size) * (feats - targets)
    return trace, loss, grad_feats


def _feature_loss_and_grads(student, skip, x, targets, feature_source):
    trace, loss, grad_feats = _feature_loss_parts(student, skip, x, targets, feature_source)
    return loss, backprop_from_outputs(student, trace, grad_features=grad_feats)


class DistillRun:
    """Stepwise distillation driver.

    Owns the mini-batch stream and the SGD schedule; callers advance it one
    step at a time (the serving loop interleaves these steps with
    inference).  ``live_teacher`` switches labels from the stored cache to
    fresh per-batch teacher queries.
    """

    def __init__(self, student, skip, cache: PseudoLabelCache, config: DistillConfig,
                 live_teacher: ResidualNetwork | None = None):
        if cache.size == 0:
            raise ConfigError("pseudo-label cache is empty")
        self.student = student
        self.skip = normalize_skip(student, skip)
        self.cache = cache
        self.config = config
        self.live_teacher = live_teacher
        self.batch_size = min(config.batch_size, cache.size)
        self.steps_done = 0
        self.teacher_query_count = 0
        self.loss_trace: list[float] = []
        self._indices = _batch_indices(cache.size, self.batch_size, config.seed)

    def step(self) -> float:
        if self.steps_done >= self.config.steps:
            raise ConfigError("distillation already ran its configured steps")
        idx = next(self._indices)
        x = self.cache.inputs[idx]
        if self.live_teacher is not None:
            targets = _teacher_labels(self.live_teacher, x, self.cache.feature_source)
            self.teacher_query_count += len(idx)
        else:
            targets = self.cache.labels[idx]
        trace, loss, grad_feats = _feature_loss_parts(
            self.student, self.skip, x, targets, self.cache.feature_source
        )
        if not np.isfinite(loss):
            raise NumericError(f"non-finite distillation loss at step {self.steps_done}")
        grads = backprop_from_outputs(self.student, trace, grad_features=grad_feats)
        sgd_step(self.student, grads, lr_at(self.steps_done, self.config))
        self.steps_done += 1
        self.loss_trace.append(loss)
        return loss

    @property
    def done(self) -> bool:
        return self.steps_done >= self.config.steps

    def full_cache_loss(self) -> float:
        """Feature loss over the entire cache at the current parameters."""
        loss, _ = _full_loss(self.student, self.skip, self.cache)
        return loss


def _full_loss(student, skip, cache):
    trace = forward_trace(student, cache.inputs, skip)
    feats = trace.features
    if cache.feature_source == SOURCE_POOLED:
        feats = feats.mean(axis=1, keepdims=True)
    return feature_mse(feats, cache.labels), trace


def distill(student, skip, cache: PseudoLabelCache, config: DistillConfig):
    """Fine-tune ``student`` against the stored cache.  The teacher is never
    evaluated.  Returns the (mutated) student and a report whose final_loss
    is the whole-cache loss at the final parameters."""
    start = time.perf_counter()
    run = DistillRun(student, skip, cache, config)
    while not run.done:
        run.step()
    final_loss = run.full_cache_loss()
    report = DistillReport(run.loss_trace, time.perf_counter() - start, 0, final_loss)
    return student, report


def distill_live(student, skip, teacher, samples, config: DistillConfig,
                 feature_source=SOURCE_FINAL_BLOCK):
    """Reference fine-tuning that queries the teacher for every mini-batch.

    Identical optimization to :func:`distill` (bitwise, given equal seeds);
    it differs only in where labels come from and what that costs.  The
    teacher is queried exactly steps * batch_size times, so the report's
    final_loss is the last step's mini-batch loss rather than a fresh
    whole-set evaluation.
    """
    start = time.perf_counter()
    inputs = np.ascontiguousarray(samples, dtype=np.float64)
    # Same index stream as cached mode; labels are recomputed, never stored.
    shell = PseudoLabelCache(
        inputs,
        np.zeros((inputs.shape[0], 1 if feature_source == SOURCE_POOLED else student.width)),
        network_fingerprint(teacher),
        feature_source,
    )
    run = DistillRun(student, skip, shell, config, live_teacher=teacher)
    while not run.done:
        run.step()
    final_loss = run.loss_trace[-1] if run.loss_trace else float("nan")
    report = DistillReport(
        run.loss_trace, time.perf_counter() - start, run.teacher_query_count, final_loss
    )
    return student, report
