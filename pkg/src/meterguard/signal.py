"""Power series, household scenes and sliding-window segmentation."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from meterguard.errors import AlignmentError, ConfigError, DataError, EmptyInputError, ShapeError


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PowerSeries:
    """Timestamped watt readings for one channel.

    Timestamps are integer unix seconds and must be strictly increasing.
    The series is *regular* when every gap equals ``sample_period``; raw
    channel files may be irregular until they are aligned.
    """

    timestamps: np.ndarray
    power: np.ndarray
    sample_period: int

    def __post_init__(self):
        ts = _frozen(self.timestamps, np.int64)
        pw = _frozen(self.power, np.float64)
        if ts.ndim != 1 or pw.ndim != 1 or ts.shape != pw.shape:
            raise ShapeError(f"timestamps {ts.shape} and power {pw.shape} must be equal-length vectors")
        if int(self.sample_period) < 1:
            raise ConfigError(f"sample_period must be >= 1, got {self.sample_period}")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            bad = int(np.argmax(np.diff(ts) <= 0)) + 1
            raise DataError(f"timestamps not strictly increasing at sample {bad}")
        if not np.all(np.isfinite(pw)):
            raise DataError("power values must be finite")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "power", pw)
        object.__setattr__(self, "sample_period", int(self.sample_period))

    @classmethod
    def regular(cls, power, sample_period: int = 1, start: int = 0) -> PowerSeries:
        """Build a gap-free series starting at ``start``."""
        power = np.asarray(power, dtype=np.float64)
        ts = start + sample_period * np.arange(power.size, dtype=np.int64)
        return cls(ts, power, sample_period)

    def __len__(self) -> int:
        return int(self.power.size)

    @property
    def is_regular(self) -> bool:
        return bool(np.all(np.diff(self.timestamps) == self.sample_period))

    def with_power(self, power) -> PowerSeries:
        return PowerSeries(self.timestamps, power, self.sample_period)

    def slice(self, start: int, stop: int) -> PowerSeries:
        return PowerSeries(self.timestamps[start:stop], self.power[start:stop], self.sample_period)

    def same_grid(self, other: PowerSeries) -> bool:
        return self.sample_period == other.sample_period and np.array_equal(self.timestamps, other.timestamps)

    def __eq__(self, other):
        if not isinstance(other, PowerSeries):
            return NotImplemented
        return self.same_grid(other) and np.array_equal(self.power, other.power)


@dataclass(frozen=True, eq=False)
class Scene:
    """An aggregate signal together with its per-appliance decomposition.

    ``baseline`` and ``noise`` are only known for synthetic scenes; for
    measured data they are ``None`` and the additive identity is not checked.
    """

    aggregate: PowerSeries
    appliances: Mapping[str, PowerSeries]
    baseline: PowerSeries | None = None
    noise: PowerSeries | None = None
    appliance_count: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "appliances", dict(self.appliances))
        object.__setattr__(self, "appliance_count", len(self.appliances))
        members = [s for s in (self.baseline, self.noise) if s is not None]
        members += list(self.appliances.values())
        for s in members:
            if not s.same_grid(self.aggregate):
                raise AlignmentError("all scene members must share timestamps and sample_period")

    def __len__(self) -> int:
        return len(self.aggregate)

    @property
    def sample_period(self) -> int:
        return self.aggregate.sample_period

    def residual(self) -> np.ndarray:
        """Pointwise aggregate minus the sum of its known components."""
        if self.baseline is None or self.noise is None:
            raise DataError("scene has no baseline/noise decomposition")
        total = self.baseline.power + self.noise.power
        for s in self.appliances.values():
            total = total + s.power
        return self.aggregate.power - total

    def slice(self, start: int, stop: int) -> Scene:
        return Scene(
            self.aggregate.slice(start, stop),
            {k: v.slice(start, stop) for k, v in self.appliances.items()},
            None if self.baseline is None else self.baseline.slice(start, stop),
            None if self.noise is None else self.noise.slice(start, stop),
        )


def compose_scene(
    appliances: Mapping[str, PowerSeries], baseline: PowerSeries, noise: PowerSeries
) -> Scene:
    """Build a scene whose aggregate is the exact pointwise sum of its parts.

    Summation order is baseline, each appliance in mapping order, then noise;
    :meth:`Scene.residual` uses the same order so the identity holds bitwise.
    """
    for label, s in appliances.items():
        if len(s) != len(baseline) or not s.same_grid(baseline):
            raise AlignmentError(f"appliance {label!r} is not aligned with the baseline")
    if not noise.same_grid(baseline):
        raise AlignmentError("noise is not aligned with the baseline")
    total = baseline.power + noise.power
    for s in appliances.values():
        total = total + s.power
    aggregate = baseline.with_power(total)
    return Scene(aggregate, appliances, baseline, noise)


class Unit(str, Enum):
    WATTS = "watts"
    NORMALIZED = "normalized"


@dataclass(frozen=True, eq=False)
class Window:
    """A length-``w`` slice of a signal in a tagged unit system.

    ``start`` is the offset of the first sample in the source series and
    ``center_index`` the sample the window is nominally centred on.
    """

    values: np.ndarray
    start: int = 0
    unit: Unit = Unit.WATTS

    def __post_init__(self):
        v = _frozen(self.values, np.float64)
        if v.ndim != 1:
            raise ShapeError(f"window values must be 1-D, got shape {v.shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "unit", Unit(self.unit))

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def center_index(self) -> int:
        return self.start + len(self) // 2

    def expect(self, unit: Unit) -> Window:
        if self.unit is not Unit(unit):
            raise ShapeError(f"expected a {Unit(unit).value} window, got {self.unit.value}")
        return self

    def replace(self, values) -> Window:
        return Window(values, self.start, self.unit)


def make_windows(series: PowerSeries | np.ndarray, w: int, stride: int) -> list[Window]:
    """Cut ``series`` into length-``w`` windows starting every ``stride`` samples.

    Incomplete tail windows are dropped.
    """
    if w < 2:
        raise ConfigError(f"window length must be >= 2, got {w}")
    if not 1 <= stride <= w:
        raise ConfigError(f"stride must lie in [1, {w}], got {stride}")
    values = series.power if isinstance(series, PowerSeries) else np.asarray(series, dtype=np.float64)
    if values.size < w:
        raise EmptyInputError(f"series of length {values.size} is shorter than the window ({w})")
    return [Window(values[s:s + w], s, Unit.WATTS) for s in window_starts(values.size, w, stride)]


def window_starts(n: int, w: int, stride: int) -> range:
    if n < w:
        return range(0)
    return range(0, n - w + 1, stride)


def normalize(window: Window, mean: float, std: float) -> Window:
    if not std > 0:
        raise ConfigError(f"std must be positive, got {std}")
    window.expect(Unit.WATTS)
    return Window((window.values - mean) / std, window.start, Unit.NORMALIZED)


def denormalize(window: Window, mean: float, std: float) -> Window:
    if not std > 0:
        raise ConfigError(f"std must be positive, got {std}")
    window.expect(Unit.NORMALIZED)
    return Window(window.values * std + mean, window.start, Unit.WATTS)
