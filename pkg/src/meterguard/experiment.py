"""End-to-end pipeline: windows in, trained models, perturbed signals, metric rows out.

All arrays here are full-length aligned signals in watts; windows are
addressed by their start index.  Attack windows never overlap (stride = w)
so each sample is perturbed at most once.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from meterguard.attack import (
    AttackConfig,
    Perturbation,
    apply_perturbation,
    attack_fgsm,
    attack_go,
    attack_laplace,
    attack_pgd,
    billing_drift,
    jaco_adam,
    jaco_adam_practical,
)
from meterguard.data import House
from meterguard.errors import ConfigError, EmptyInputError
from meterguard.metrics import MetricsRow
from meterguard.model import NilmModel, TrainConfig, jacobian, train
from meterguard.signal import Unit, Window, window_starts

log = logging.getLogger(__name__)

ATTACKS = ("jaco_adam", "jaco_adam_practical", "fgsm", "pgd", "go_plus", "go_minus", "laplace")


def segment_starts(segments: Sequence[tuple[int, int]], w: int, stride: int) -> list[int]:
    """Window starts that stay inside one gap-free segment."""
    starts = []
    for a, b in segments:
        starts.extend(a + s for s in window_starts(b - a, w, stride))
    return starts


def gather(values: np.ndarray, starts: Sequence[int], w: int) -> np.ndarray:
    if len(starts) == 0:
        return np.zeros((0, w))
    idx = np.asarray(starts)[:, None] + np.arange(w)
    return values[idx]


def training_arrays(house: House, appliance: str, w: int, stride: int, split: str = "train"):
    """Normalized (inputs, targets) windows plus the aggregate mean/std used."""
    segs = house.split_segments(split)
    starts = segment_starts(segs, w, stride)
    if not starts:
        raise EmptyInputError(f"no complete training windows of length {w}")
    agg = house.scene.aggregate.power
    pooled = np.concatenate([agg[a:b] for a, b in segs])
    mean, std = float(pooled.mean()), float(pooled.std())
    if not std > 0:
        raise EmptyInputError("training aggregate is constant")
    x = (gather(agg, starts, w) - mean) / std
    y = (gather(house.scene.appliances[appliance].power, starts, w) - mean) / std
    return x, y, mean, std


def fit_appliance_model(
    house: House,
    appliance: str,
    window_len: int,
    stride: int = 1,
    train_cfg: TrainConfig = TrainConfig(),
    conv: Sequence[tuple[int, int]] = ((9, 8), (5, 8)),
    model_seed: int | None = None,
    on_epoch=None,
) -> NilmModel:
    if appliance not in house.scene.appliances:
        raise ConfigError(f"unknown appliance {appliance!r}; have {sorted(house.scene.appliances)}")
    x, y, mean, std = training_arrays(house, appliance, window_len, stride)
    seed = train_cfg.seed if model_seed is None else model_seed
    model = NilmModel.build(window_len, conv, appliance_id=appliance, seed=seed, norm_mean=mean, norm_std=std)
    return train(model, x, y, train_cfg, on_epoch=on_epoch)


def eval_starts(house: House, w: int, split: str = "test") -> list[int]:
    starts = segment_starts(house.split_segments(split), w, w)
    if not starts:
        raise EmptyInputError(f"no complete evaluation windows of length {w} in the {split} split")
    return starts


def predict(model: NilmModel, aggregate: np.ndarray, starts: Sequence[int]) -> np.ndarray:
    """Concatenated predictions in watts for the windows at ``starts``."""
    w = model.window_len
    xn = (gather(aggregate, starts, w) - model.norm_mean) / model.norm_std
    out = np.concatenate([model.forward_batch(xn[s:s + 256]) for s in range(0, xn.shape[0], 256)])
    return (out * model.norm_std + model.norm_mean).ravel()


def evaluate(
    model: NilmModel,
    aggregate: np.ndarray,
    truth: np.ndarray,
    starts: Sequence[int],
    condition_tag: str,
) -> MetricsRow:
    pred = predict(model, aggregate, starts)
    return MetricsRow.evaluate(model.appliance_id, condition_tag, pred, gather(truth, starts, model.window_len).ravel())


@dataclass
class AttackSpec:
    """Which attack to run and its knobs; ``config`` carries the shared settings."""

    name: str = "jaco_adam"
    config: AttackConfig = field(default_factory=AttackConfig)
    pgd_steps: int = 10
    pgd_step_size: float | None = None
    epsilon_privacy: float = 0.01
    sensitivity: float | None = None

    def __post_init__(self):
        if self.name not in ATTACKS:
            raise ConfigError(f"unknown attack {self.name!r}; choose from {', '.join(ATTACKS)}")
        if self.name == "jaco_adam_practical" and not self.config.zero_sum:
            self.config = replace(self.config, zero_sum=True)
        if self.name == "jaco_adam" and self.config.zero_sum:
            self.name = "jaco_adam_practical"

    @property
    def zero_sum(self) -> bool:
        return self.config.zero_sum and self.name.startswith("jaco")

    @property
    def bounded(self) -> bool:
        return self.name != "laplace"


@dataclass
class WindowReport:
    start: int
    achieved_ratio: float
    linf: float
    drift: float
    drift_after_clamp: float | None = None


@dataclass
class AttackResult:
    perturbed: np.ndarray
    perturbations: list[Perturbation]
    reports: list[WindowReport]


def _window_seed(seed: int, start: int) -> int:
    return int(np.random.SeedSequence([seed, start]).generate_state(1)[0])


def run_attack(
    model: NilmModel,
    aggregate: np.ndarray,
    truth: np.ndarray | None,
    starts: Sequence[int],
    spec: AttackSpec,
    delta: float | None = None,
) -> AttackResult:
    """Perturb every window at ``starts`` against ``model``.

    ``delta`` overrides ``spec.config.delta`` and may be 0 (returns a copy of
    the clean signal).  ``truth`` is needed by the MSE-based baselines.
    """
    cfg = spec.config
    delta = cfg.delta if delta is None else float(delta)
    if delta < 0:
        raise ConfigError(f"delta must be non-negative, got {delta}")
    w = model.window_len
    mean, std = model.norm_mean, model.norm_std
    perturbed = np.array(aggregate, dtype=np.float64, copy=True)
    perturbations, reports = [], []
    if delta == 0:
        return AttackResult(perturbed, perturbations, reports)
    if spec.name in ("fgsm", "pgd") and truth is None:
        raise ConfigError(f"{spec.name} needs ground truth")
    sensitivity = spec.sensitivity
    for start in starts:
        xw = aggregate[start:start + w]
        xn = Window((xw - mean) / std, start, Unit.NORMALIZED)
        yn = None if truth is None else (truth[start:start + w] - mean) / std
        ratio = math.nan
        if spec.name.startswith("jaco"):
            J = jacobian(model, xn)
            wcfg = replace(cfg, seed=_window_seed(cfg.seed, start), delta=delta)
            p = jaco_adam_practical(J, wcfg) if spec.zero_sum else jaco_adam(J, wcfg)
            p = replace(p, start=start)
            ratio = p.achieved_ratio
            # clamping happens below, in watts, after the billing check
            step = apply_perturbation(xn, p, delta).values - xn.values
        elif spec.name == "fgsm":
            step = attack_fgsm(model, xn.values, yn, delta) - xn.values
        elif spec.name == "pgd":
            step = attack_pgd(model, xn.values, yn, delta, spec.pgd_steps, spec.pgd_step_size) - xn.values
        elif spec.name in ("go_plus", "go_minus"):
            step = attack_go(model, xn.values, delta, "+" if spec.name == "go_plus" else "-") - xn.values
        else:
            if sensitivity is None:
                raise ConfigError("laplace attack needs a sensitivity")
            noisy = attack_laplace(xn.values, spec.epsilon_privacy, sensitivity, _window_seed(cfg.seed, start))
            step = noisy - xn.values
        if not spec.name.startswith("jaco"):
            peak = float(np.max(np.abs(step)))
            direction = step / peak if peak > 0 else np.zeros(w)
            p = Perturbation(direction, math.nan, False, start=start)
        new = xw + std * step
        drift = billing_drift(xw, new)
        report = WindowReport(start, ratio, float(np.max(np.abs(step))), drift)
        if cfg.clamp_nonnegative:
            new = np.maximum(new, 0.0)
            report.drift_after_clamp = billing_drift(xw, new)
            if report.drift_after_clamp > drift:
                log.warning("window %d: clamping raised billing drift to %.3g", start, report.drift_after_clamp)
        perturbed[start:start + w] = new
        perturbations.append(p)
        reports.append(report)
    return AttackResult(perturbed, perturbations, reports)


def laplace_sensitivity(house: House) -> float:
    """Range of the training aggregate in normalized units, i.e. (max - min) / std."""
    segs = house.split_segments("train")
    pooled = np.concatenate([house.scene.aggregate.power[a:b] for a, b in segs])
    return float((pooled.max() - pooled.min()) / pooled.std())


def clean_and_perturbed_rows(
    model: NilmModel,
    house: House,
    spec: AttackSpec,
    starts: Sequence[int],
    delta: float | None = None,
    tag: str = "perturbed",
    clean_tag: str = "clean",
) -> tuple[MetricsRow, MetricsRow, AttackResult]:
    appliance = model.appliance_id
    agg = house.scene.aggregate.power
    truth = house.scene.appliances[appliance].power
    result = run_attack(model, agg, truth, starts, spec, delta)
    clean = evaluate(model, agg, truth, starts, clean_tag)
    pert = evaluate(model, result.perturbed, truth, starts, tag)
    return clean, pert, result
