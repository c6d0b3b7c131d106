"""Desk-scale training experiments on synthetic phantoms.

Shared by the acceptance suite and the runners in ``scripts/``. All
experiments work at 48 px, where one Adam step on a batch of 20 costs about
a second on a desktop CPU.
"""
from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from . import data, metrics
from . import network as net

log = logging.getLogger(__name__)

SIZE = 48
FOREGROUND = (1, 2, 3)


@dataclass
class ExperimentConfig:
    n_subjects: int = 10
    n_train: int = 10
    iterations: int = 1000
    learning_rate: float = 0.001
    batch_size: int = 20
    cohort_seed: int = 1
    train_seed: int = 0
    log_every: int = 50
    # the default 10 px shift would be a fifth of a 48 px field of view
    augment: data.AugmentParams = field(default_factory=lambda: data.AugmentParams(max_translation=2.5))

    def train_config(self, iterations=None) -> net.TrainConfig:
        return net.TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                               iterations=self.iterations if iterations is None else iterations,
                               seed=self.train_seed, log_every=self.log_every,
                               augment_params=self.augment)


@dataclass
class ExperimentResult:
    dice: dict  # class -> mean per-volume Dice
    loss: float | None = None  # mean cross-entropy over the evaluated slices
    final_batch_loss: float | None = None
    seconds: float = 0.0
    trace: list = field(default_factory=list)


def volume_dice(model: net.ModelState, ds: data.SliceDataset, classes=FOREGROUND) -> dict:
    """Dice per class, computed per (subject, frame) volume and averaged."""
    pred = net.segment(model, ds.images)
    groups = defaultdict(list)
    for row, (sid, frame, _) in enumerate(ds.keys):
        groups[(sid, frame)].append(row)
    out = {}
    for c in classes:
        out[c] = float(np.mean([metrics.dice(pred[rows] == c, ds.labels[rows] == c)
                                for rows in groups.values()]))
    return out


def _log(rec):
    log.info("iter %d loss %.4f (%.0f s)", rec.iteration, rec.loss, rec.seconds)


def train_on(specs, cfg: ExperimentConfig, model: net.ModelState | None = None, iterations=None):
    ds = data.phantom_dataset(specs, SIZE)
    if model is None:
        model = net.build_network(net.NetworkConfig(k=4, input_size=SIZE), seed=cfg.train_seed)
    t0 = time.perf_counter()
    model, trace = net.train(model, ds, cfg.train_config(iterations), on_log=_log)
    return model, trace, time.perf_counter() - t0


def overfit(cfg: ExperimentConfig | None = None) -> tuple[net.ModelState, ExperimentResult]:
    """Train on a small cohort and score the same cohort."""
    cfg = cfg or ExperimentConfig()
    t0 = time.perf_counter()
    specs = data.synth_cohort(cfg.n_subjects, seed=cfg.cohort_seed)
    model, trace, _ = train_on(specs, cfg)
    ds = data.phantom_dataset(specs, SIZE)
    res = ExperimentResult(volume_dice(model, ds), net.evaluate_loss(model, ds), trace[-1].loss,
                           time.perf_counter() - t0, trace)
    return model, res


def generalise(cfg: ExperimentConfig | None = None) -> tuple[net.ModelState, ExperimentResult]:
    """Train on the first ``n_train`` subjects and score the rest."""
    cfg = cfg or ExperimentConfig(n_subjects=60, n_train=40, iterations=2000, cohort_seed=2)
    t0 = time.perf_counter()
    specs = data.synth_cohort(cfg.n_subjects, seed=cfg.cohort_seed)
    model, trace, _ = train_on(specs[:cfg.n_train], cfg)
    test = data.phantom_dataset(specs[cfg.n_train:], SIZE)
    res = ExperimentResult(volume_dice(model, test), net.evaluate_loss(model, test), trace[-1].loss,
                           time.perf_counter() - t0, trace)
    return model, res


@dataclass
class ShiftResult:
    before: dict
    after: dict
    seconds: float

    @property
    def improvement(self) -> float:
        return mean_dice(self.after) - mean_dice(self.before)


def mean_dice(per_class: dict) -> float:
    return float(np.mean(list(per_class.values())))


def finetune_shift(model: net.ModelState, iterations=500, n_tune=20, n_test=20, cohort_seed=3,
                   cfg: ExperimentConfig | None = None) -> tuple[net.ModelState, ShiftResult]:
    """Score a trained model on intensity-shifted phantoms, fine-tune on others, score again."""
    cfg = cfg or ExperimentConfig()
    t0 = time.perf_counter()
    specs = data.synth_cohort(n_tune + n_test, seed=cohort_seed, intensity=data.SHIFTED_INTENSITY)
    test = data.phantom_dataset(specs[n_tune:], SIZE)
    before = volume_dice(model, test)
    tuned, _ = net.fine_tune(model, data.phantom_dataset(specs[:n_tune], SIZE),
                             replace(cfg.train_config(), seed=cfg.train_seed + 1),
                             iterations=iterations, on_log=_log)
    after = volume_dice(tuned, test)
    return tuned, ShiftResult(before, after, time.perf_counter() - t0)
