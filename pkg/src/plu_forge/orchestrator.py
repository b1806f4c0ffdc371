"""
One synthesis-assisted semi-supervised training round over abstract backends.

A round weak-augments an unlabeled batch, has the teacher predict and
threshold pseudo-labels, unmixes merged masks, synthesises images from the
corrected labels' contours, trains the student on three streams (real +
ground truth, real + pseudo, synthetic + pseudo) and folds the student
into the teacher by EMA.

Randomness is derived from ``(seed, iteration, sample key)`` so a sample
sees the same weak and strong augmentation in every stream of a round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, Iterator, Optional, Protocol, Sequence

import numpy as np

from .augment import sample_weak, strong_augment, weak_image, weak_scene
from .losses import LossWeights, total_sassl_loss, total_sl_loss
from .masks import Scene
from .pseudo_labels import MAX_INSTANCES, apply_plu, n_corrections, threshold_pseudo_labels
from .simulator import key_seed
from .synthesis import (AugmentationPolicy, augment_instances, categorize,
                        fit_category_thresholds, measure_appearances,
                        render_contour_image, synthesize)
from .weights import WeightVector, ema_update

logger = logging.getLogger(__name__)

STREAMS = ("real", "pseudo", "synthetic")
PROBE_TOKEN = 2**31 - 1


class SegmentorBackend(Protocol):
    def predict(self, image, key: str, view=None, token: int = 0): ...
    def judge(self, mask, context) -> float: ...
    def decompose(self, mask, context): ...
    def train_step(self, streams: dict) -> dict: ...
    def weights(self) -> WeightVector: ...
    def set_weights(self, w: WeightVector) -> None: ...


@dataclass(frozen=True)
class TrainingSchedule:
    total_iterations: int = 180_000
    warmup_iterations: int = 1_000
    base_lr: float = 0.001
    decay_factor: float = 0.1
    milestones: tuple[float, float] = (0.8, 0.9)
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 2
    ema_decay: float = 0.999
    ema_period: int = 1
    lambda_ssl: float = 1.0

    def __post_init__(self):
        if any(not 0.0 < m < 1.0 for m in self.milestones):
            raise ValueError("milestones must lie in (0, 1)")
        if min(self.total_iterations, self.warmup_iterations,
               self.labeled_per_batch, self.unlabeled_per_batch) < 0:
            raise ValueError("counts must be non-negative")
        if self.ema_period < 1:
            raise ValueError("ema_period must be >= 1")
        if self.lambda_ssl < 0:
            raise ValueError("lambda_ssl must be non-negative")


def lr_at(iteration: int, sched: TrainingSchedule = TrainingSchedule()) -> float:
    """Linear warm-up from 0, then step decay at each milestone fraction."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if iteration < sched.warmup_iterations:
        return sched.base_lr * iteration / sched.warmup_iterations
    lr = sched.base_lr
    for m in sorted(sched.milestones):
        if iteration >= m * sched.total_iterations:
            lr *= sched.decay_factor
    return lr


@dataclass(frozen=True)
class Sample:
    key: str
    image: np.ndarray
    scene: Optional[Scene] = None


def _draw(pool_size: int, quota: int, rng: np.random.Generator, name: str) -> list[int]:
    if pool_size == 0:
        raise ValueError(f"{name} pool is empty")
    if pool_size < quota:
        logger.warning("%s pool has %d images for a quota of %d; sampling with replacement",
                       name, pool_size, quota)
        return sorted(rng.choice(pool_size, quota, replace=True).tolist())
    return sorted(rng.choice(pool_size, quota, replace=False).tolist())


def compose_batch(labeled: Sequence, unlabeled: Sequence, sched: TrainingSchedule,
                  rng: np.random.Generator) -> tuple[list, list]:
    """Uniform draw without replacement inside a batch, in pool order."""
    li = _draw(len(labeled), sched.labeled_per_batch, rng, "labeled")
    ui = _draw(len(unlabeled), sched.unlabeled_per_batch, rng, "unlabeled")
    return [labeled[i] for i in li], [unlabeled[i] for i in ui]


@dataclass(frozen=True)
class SSLConfig:
    """Round settings. The stream trade-off comes from ``schedule.lambda_ssl``;
    ``loss_weights.lambda_ssl`` is ignored here."""

    schedule: TrainingSchedule = TrainingSchedule()
    loss_weights: LossWeights = LossWeights()
    policy: AugmentationPolicy = AugmentationPolicy(scale=True)
    category_thresholds: Optional[tuple[float, float]] = None
    theta_box: float = 0.7
    theta_p: float = 0.5
    judge_threshold: float = 0.5
    exist_threshold: float = 0.5
    stroke_width: int = 2
    K: int = MAX_INSTANCES
    weak_scale_range: tuple[float, float] = (0.9, 1.1)
    cache_pseudo_labels: bool = False  # TrainLoop reuses corrected pseudo-labels within an epoch


@dataclass
class RoundReport:
    iteration: int
    lr: float
    losses: dict
    stream_totals: dict
    total: float
    corrections: int
    correction_log_size: int
    n_pseudo_masks: int
    n_synthesized: int
    ema_updated: bool

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "lr": self.lr,
            "losses": {s: self.losses[s].as_dict() for s in STREAMS},
            "stream_totals": dict(self.stream_totals),
            "total": self.total,
            "corrections": self.corrections,
            "correction_log_size": self.correction_log_size,
            "n_pseudo_masks": self.n_pseudo_masks,
            "n_synthesized": self.n_synthesized,
            "ema_updated": self.ema_updated,
        }


class RoundError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"round failed at stage '{stage}': {cause}")
        self.stage = stage


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, RoundError):
            raise RoundError(self.name, exc) from exc
        return False


def _sample_rng(seed: int, iteration: int, key: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, key_seed(key), stream])


def run_round(iteration: int, teacher, student, generator: Callable, labeled: Sequence[Sample],
              unlabeled: Sequence[Sample], cfg: SSLConfig, seed: int,
              thresholds: Optional[tuple[float, float]] = None,
              cache: Optional[dict] = None) -> RoundReport:
    """One training round. With ``cache`` (a dict owned by the caller), an
    unlabeled sample seen before reuses its weak view and corrected
    pseudo-labels instead of querying the teacher again."""
    sched = cfg.schedule
    rng = np.random.default_rng([seed, iteration])
    with _Stage("batch"):
        lab_batch, unl_batch = compose_batch(labeled, unlabeled, sched, rng)
    thresholds = thresholds or cfg.category_thresholds
    if thresholds is None:
        with _Stage("category-thresholds"):
            thresholds = fit_category_thresholds([(s.image, s.scene) for s in labeled])

    real_stream = []
    with _Stage("real-stream"):
        for s in lab_batch:
            params = sample_weak(_sample_rng(seed, iteration, s.key, 0), scale_range=cfg.weak_scale_range)
            img = weak_image(s.image, params)
            gt = weak_scene(s.scene, params)
            real_stream.append((strong_augment(img, _sample_rng(seed, iteration, s.key, 2)), gt))

    pseudo_stream, synth_stream = [], []
    corrections = log_size = n_masks = 0
    for s in unl_batch:
        hit = cache.get(s.key) if cache is not None else None
        with _Stage("weak-augment"):
            params = hit[0] if hit else sample_weak(_sample_rng(seed, iteration, s.key, 0),
                                                    scale_range=cfg.weak_scale_range)
            img = weak_image(s.image, params)
        if hit:
            labels = hit[1]
        else:
            with _Stage("teacher-predict"):
                raw, ctx = teacher.predict(img, s.key, view=params, token=iteration)
                pseudo = threshold_pseudo_labels(raw, cfg.theta_box, cfg.theta_p)
            with _Stage("plu"):
                corrected = apply_plu(pseudo, partial(teacher.judge, context=ctx),
                                      partial(teacher.decompose, context=ctx),
                                      cfg.judge_threshold, cfg.exist_threshold)
                corrections += n_corrections(corrected)
                log_size += len(corrected.correction_log)
                labels = corrected.to_scene(s.key)
            if cache is not None:
                cache[s.key] = (params, labels)
        n_masks += len(labels)
        with _Stage("synthesis"):
            cats = categorize(measure_appearances(img, labels), thresholds)
            labels = labels.replace(categories=tuple(cats))
            aug = augment_instances(labels, cfg.policy, _sample_rng(seed, iteration, s.key, 1))
            contours = render_contour_image(aug, aug.categories or (), cfg.stroke_width)
            synthetic = synthesize(contours, generator, seed=key_seed(s.key) ^ iteration)
        with _Stage("strong-augment"):
            pseudo_stream.append((strong_augment(img, _sample_rng(seed, iteration, s.key, 2)), labels))
            synth_stream.append((strong_augment(synthetic, _sample_rng(seed, iteration, s.key, 3)), aug))

    with _Stage("student-train"):
        losses = student.train_step({"real": real_stream, "pseudo": pseudo_stream,
                                     "synthetic": synth_stream})
        weights = replace(cfg.loss_weights, lambda_ssl=sched.lambda_ssl)
        totals = {name: total_sl_loss(losses[name], weights) for name in STREAMS}
        total = total_sassl_loss(totals["real"], totals["pseudo"], totals["synthetic"], weights)

    updated = (iteration + 1) % sched.ema_period == 0
    if updated:
        with _Stage("ema"):
            teacher.set_weights(ema_update(teacher.weights(), student.weights(), sched.ema_decay))

    return RoundReport(iteration, lr_at(iteration, sched), losses, totals, total, corrections,
                       log_size, n_masks, len(synth_stream), updated)


class TrainLoop:
    """Runs consecutive rounds, checking the teacher before the first one."""

    def __init__(self, teacher, student, generator: Callable, labeled: Sequence[Sample],
                 unlabeled: Sequence[Sample], cfg: SSLConfig = SSLConfig(), seed: int = 0):
        self.teacher = teacher
        self.student = student
        self.generator = generator
        self.labeled = list(labeled)
        self.unlabeled = list(unlabeled)
        self.cfg = cfg
        self.seed = seed
        self.iteration = 0
        self.thresholds = cfg.category_thresholds
        self.cache: Optional[dict] = {} if cfg.cache_pseudo_labels else None
        per_batch = max(cfg.schedule.unlabeled_per_batch, 1)
        self.epoch_rounds = max(-(-len(self.unlabeled) // per_batch), 1)

    def probe_teacher(self) -> None:
        probe = self.unlabeled[0]
        with _Stage("teacher-probe"):
            raw, _ = self.teacher.predict(probe.image, probe.key, view=None, token=PROBE_TOKEN)
        if not raw.proposals:
            raise RoundError("teacher-probe", RuntimeError("teacher produced no predictions on probe image"))

    def rounds(self, n: int) -> Iterator[RoundReport]:
        if self.iteration == 0:
            self.probe_teacher()
            if self.thresholds is None:
                self.thresholds = fit_category_thresholds([(s.image, s.scene) for s in self.labeled])
        for _ in range(n):
            if self.cache is not None and self.iteration % self.epoch_rounds == 0:
                self.cache.clear()
            report = run_round(self.iteration, self.teacher, self.student, self.generator,
                               self.labeled, self.unlabeled, self.cfg, self.seed, self.thresholds,
                               self.cache)
            self.iteration += 1
            yield report


def sweep_lambda(report: RoundReport, lambdas: Sequence[float]) -> list[tuple[float, float]]:
    """Re-total a round's stream losses for several pseudo/synthetic trade-offs."""
    t = report.stream_totals
    return [(lam, total_sassl_loss(t["real"], t["pseudo"], t["synthetic"],
                                   LossWeights(lambda_ssl=lam)))
            for lam in lambdas]
