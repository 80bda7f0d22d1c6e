"""Perturbation search against a disaggregation model.

The main attack linearizes the model around a window, ``f(x + e) ~ f(x) + J e``,
and looks for the direction ``e`` in the unit infinity-ball that moves the
output furthest in L1, i.e. it approximates the induced (inf, 1) norm of the
Jacobian.  The search ascends the scale-free ratio ``||J e||_1 / ||e||_inf``
with Adam and keeps the best vector seen.  A billing-neutral variant keeps
the perturbation summing to zero.  Gradient baselines (FGSM, PGD, gradient
ascent/descent on the predicted total) and Laplace noise are provided for
comparison.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from meterguard.errors import (
    ConfigError,
    DegenerateInputError,
    NumericError,
    ParseError,
    ShapeError,
    SizeLimitError,
)
from meterguard.model import JacobianMatrix, NilmModel, input_gradient
from meterguard.signal import Unit, Window

EXACT_NORM_MAX_W = 20


@dataclass(frozen=True)
class AttackConfig:
    delta: float = 0.1
    num_iters: int = 5
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    zero_sum: bool = False
    seed: int = 0
    clamp_nonnegative: bool = False

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.num_iters < 1:
            raise ConfigError(f"num_iters must be >= 1, got {self.num_iters}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True, eq=False)
class Perturbation:
    """A unit infinity-norm direction and the ratio it achieved."""

    direction: np.ndarray
    achieved_ratio: float
    zero_sum: bool = False
    ratio_history: tuple = field(default=())
    start: int = 0

    def __post_init__(self):
        d = np.array(self.direction, dtype=np.float64)
        d.setflags(write=False)
        object.__setattr__(self, "direction", d)

    def __len__(self) -> int:
        return int(self.direction.size)


def _matrix(J) -> np.ndarray:
    a = J.entries if isinstance(J, JacobianMatrix) else np.asarray(J, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {a.shape}")
    return a


def objective_ratio(J, e) -> float:
    """``sum_r |J_r . e| / max_i |e_i|``."""
    a = _matrix(J)
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (a.shape[1],):
        raise ShapeError(f"vector of shape {e.shape} does not fit a {a.shape} matrix")
    m = float(np.max(np.abs(e)))
    if m == 0.0:
        raise DegenerateInputError("objective ratio is undefined for the zero vector")
    return float(np.sum(np.abs(a @ e))) / m


def exact_norm(J, chunk: int = 1 << 14) -> tuple[float, np.ndarray]:
    """Exact ``max ||J e||_1`` over the unit infinity-ball, by vertex enumeration.

    The objective is convex, so the maximum sits on a sign vector.  ``s`` and
    ``-s`` score the same, so only patterns with a leading ``+1`` are scanned.
    Patterns are visited in lexicographic order with ``+1`` before ``-1`` and
    the first maximizer wins.
    """
    a = _matrix(J)
    w = a.shape[1]
    if w > EXACT_NORM_MAX_W:
        raise SizeLimitError(f"exact enumeration is limited to w <= {EXACT_NORM_MAX_W}, got {w}")
    if w == 0:
        raise ShapeError("empty matrix")
    total = 1 << (w - 1)
    shifts = np.arange(w - 1, -1, -1, dtype=np.int64)
    best_val = -math.inf
    best_code = 0
    for lo in range(0, total, chunk):
        codes = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        signs = 1.0 - 2.0 * ((codes[:, None] >> shifts) & 1)
        vals = np.abs(signs @ a.T).sum(axis=1)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val = float(vals[k])
            best_code = int(codes[k])
    best = 1.0 - 2.0 * ((best_code >> shifts) & 1)
    return best_val, best.astype(np.float64)


def _ratio_and_grad(a: np.ndarray, e: np.ndarray) -> tuple[float, np.ndarray]:
    prod = a @ e
    s = float(np.sum(np.abs(prod)))
    k = int(np.argmax(np.abs(e)))  # lowest index on ties
    m = abs(float(e[k]))
    if m == 0.0:
        raise DegenerateInputError("iterate collapsed to the zero vector")
    grad = (a.T @ np.sign(prod)) / m
    grad[k] -= s / (m * m) * math.copysign(1.0, e[k])
    return s / m, grad


def _jaco_adam(J, cfg: AttackConfig, practical: bool) -> Perturbation:
    a = _matrix(J)
    w = a.shape[1]
    rng = np.random.default_rng(cfg.seed)
    e = rng.uniform(-1.0, 1.0, size=w)
    if practical:
        e -= e.mean()
    m1 = np.zeros(w)
    v = np.zeros(w)
    best_r = -math.inf
    best = e.copy()
    history = []

    def consider(vec):
        nonlocal best_r, best
        r, g = _ratio_and_grad(a, vec)
        history.append(r)
        if r > best_r:
            best_r, best = r, vec.copy()
        return g

    for i in range(1, cfg.num_iters + 1):
        grad = consider(e)
        if practical:
            grad = grad - 1.0  # derivative of the -sum(e) loss term
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient at iteration {i}")
        m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m1 / (1.0 - cfg.beta1 ** i)
        v_hat = v / (1.0 - cfg.beta2 ** i)
        e = e + cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        if practical:
            e = e - e.mean()
    consider(e)

    direction = best / np.max(np.abs(best))
    if practical:
        # rescaling keeps the sum at zero up to rounding; clear that residue too
        direction = direction - direction.mean()
        direction = direction / np.max(np.abs(direction))
    return Perturbation(direction, best_r, practical, tuple(history))


def jaco_adam(J, cfg: AttackConfig) -> Perturbation:
    """Adam ascent on ``||J e||_1 / ||e||_inf`` from a seeded uniform start.

    ``cfg.num_iters`` Adam steps are taken; the start point and every
    updated iterate are scored and the best one is returned, rescaled to unit
    infinity norm (the ratio is scale-free, so nothing is lost).
    """
    if cfg.zero_sum:
        raise ConfigError("jaco_adam handles the unconstrained problem; use jaco_adam_practical")
    return _jaco_adam(J, cfg, practical=False)


def jaco_adam_practical(J, cfg: AttackConfig) -> Perturbation:
    """Billing-neutral search: loss ``r - sum(e)``, iterates re-centred to zero mean."""
    if not cfg.zero_sum:
        raise ConfigError("jaco_adam_practical requires zero_sum=True")
    return _jaco_adam(J, cfg, practical=True)


def apply_perturbation(
    x: Window,
    p: Perturbation,
    delta: float,
    clamp_nonnegative: bool = False,
    zero_level: float = 0.0,
) -> Window:
    """Return ``x + delta * direction``, optionally floored at ``zero_level``.

    ``zero_level`` is the normalized value of 0 W, ``-mean / std``.
    """
    x.expect(Unit.NORMALIZED)
    if len(x) != len(p):
        raise ShapeError(f"window length {len(x)} != perturbation length {len(p)}")
    if delta < 0:
        raise ConfigError(f"delta must be non-negative, got {delta}")
    out = x.values + delta * p.direction
    if clamp_nonnegative:
        out = np.maximum(out, zero_level)
    return x.replace(out)


def billing_drift(clean, perturbed) -> float:
    """Relative change of the window total, ``|sum(x~) - sum(x)| / |sum(x)|``."""
    clean = np.asarray(clean, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    base = abs(float(np.sum(clean)))
    diff = abs(float(np.sum(perturbed)) - float(np.sum(clean)))
    if base == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / base


# baselines


def _vec(x) -> np.ndarray:
    if isinstance(x, Window):
        x.expect(Unit.NORMALIZED)
        return x.values
    return np.asarray(x, dtype=np.float64)


def _wrap(like, values):
    return like.replace(values) if isinstance(like, Window) else values


def _mse_gradient(model: NilmModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape or x.shape != (model.input_len,):
        raise ShapeError(f"input {x.shape} and target {y.shape} must both have length {model.input_len}")
    pred = model.forward_batch(x[None, :])
    return input_gradient(model, x[None, :], 2.0 * (pred - y) / y.size)[0]


def attack_fgsm(model: NilmModel, x, y, delta: float):
    """One signed-gradient ascent step of size ``delta`` on the prediction MSE."""
    xv, yv = _vec(x), _vec(y)
    if delta < 0:
        raise ConfigError(f"delta must be non-negative, got {delta}")
    return _wrap(x, xv + delta * np.sign(_mse_gradient(model, xv, yv)))


def attack_pgd(model: NilmModel, x, y, delta: float, steps: int = 10, step_size: float | None = None):
    """Projected signed-gradient ascent on the MSE inside the ``delta`` box around ``x``."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if delta < 0:
        raise ConfigError(f"delta must be non-negative, got {delta}")
    step_size = delta / 4 if step_size is None else step_size
    xv, yv = _vec(x), _vec(y)
    lo, hi = xv - delta, xv + delta
    adv = xv.copy()
    for _ in range(steps):
        adv = np.clip(adv + step_size * np.sign(_mse_gradient(model, adv, yv)), lo, hi)
    return _wrap(x, adv)


def attack_go(model: NilmModel, x, delta: float, sign: str = "+"):
    """Push the predicted total up (``+``) or down (``-``) along its gradient.

    The gradient of ``sum_r f(x)_r`` is scaled to infinity norm ``delta``.
    """
    if sign not in ("+", "-"):
        raise ConfigError(f"sign must be '+' or '-', got {sign!r}")
    xv = _vec(x)
    if xv.shape != (model.input_len,):
        raise ShapeError(f"expected input of length {model.input_len}, got {xv.shape}")
    g = input_gradient(model, xv[None, :], np.ones((1, model.window_len)))[0]
    peak = float(np.max(np.abs(g)))
    step = np.zeros_like(g) if peak == 0.0 else delta * g / peak
    return _wrap(x, xv + step if sign == "+" else xv - step)


def attack_laplace(x, epsilon_privacy: float, sensitivity: float, seed: int = 0):
    """Add i.i.d. Laplace(0, sensitivity / epsilon_privacy) noise."""
    if not epsilon_privacy > 0:
        raise ConfigError(f"epsilon_privacy must be positive, got {epsilon_privacy}")
    if not sensitivity > 0:
        raise ConfigError(f"sensitivity must be positive, got {sensitivity}")
    xv = _vec(x)
    rng = np.random.default_rng(seed)
    return _wrap(x, xv + rng.laplace(0.0, sensitivity / epsilon_privacy, size=xv.shape))


# perturbation dump


def write_perturbation_dump(path, perturbations: Iterable[Perturbation]) -> None:
    """One comma-separated line per window: start, ratio, zero_sum flag, direction."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in perturbations:
            head = [str(int(p.start)), repr(float(p.achieved_ratio)), "1" if p.zero_sum else "0"]
            fh.write(",".join(itertools.chain(head, (repr(float(v)) for v in p.direction))) + "\n")


def read_perturbation_dump(path) -> list[Perturbation]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            start, ratio, flag = int(parts[0]), float(parts[1]), parts[2]
            direction = [float(v) for v in parts[3:]]
        except (ValueError, IndexError) as exc:
            raise ParseError(str(exc), line=lineno, path=str(path)) from exc
        if flag not in ("0", "1") or not direction:
            raise ParseError("malformed perturbation record", line=lineno, path=str(path))
        out.append(Perturbation(direction, ratio, flag == "1", start=start))
    return out
