"""Channel files, manifests, resampling and synthetic households."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from meterguard.errors import AlignmentError, ConfigError, DataError, EmptyInputError, ParseError
from meterguard.metrics import CSV_COLUMNS, MetricsRow
from meterguard.signal import PowerSeries, Scene, compose_scene

GAP_FACTOR = 3


# channel files


@dataclass(frozen=True)
class ChannelFileRef:
    path: str
    appliance_label: str
    native_period: int | None = None

    def __post_init__(self):
        if self.native_period is not None and self.native_period < 1:
            raise ConfigError(f"native_period must be >= 1, got {self.native_period}")


def load_channel(ref: ChannelFileRef | str | os.PathLike) -> PowerSeries:
    """Parse a ``<unix seconds> <watts>`` channel file.

    Without an explicit native period the median timestamp gap is used.
    """
    if not isinstance(ref, ChannelFileRef):
        ref = ChannelFileRef(str(ref), Path(ref).stem)
    path = Path(ref.path)
    if not path.is_file():
        raise DataError(f"channel file not found: {path}")
    stamps, watts = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ParseError(f"expected '<timestamp> <watts>', got {line!r}", lineno, str(path))
            try:
                ts = int(parts[0])
                pw = float(parts[1])
            except ValueError:
                raise ParseError(f"expected '<timestamp> <watts>', got {line!r}", lineno, str(path)) from None
            if not math.isfinite(pw):
                raise ParseError(f"non-finite power value {parts[1]!r}", lineno, str(path))
            if stamps and ts <= stamps[-1]:
                raise ParseError(f"timestamp {ts} does not increase", lineno, str(path))
            stamps.append(ts)
            watts.append(pw)
    if not stamps:
        raise EmptyInputError(f"channel file {path} has no samples")
    period = ref.native_period
    if period is None:
        period = int(np.median(np.diff(stamps))) if len(stamps) > 1 else 1
    return PowerSeries(np.array(stamps, dtype=np.int64), np.array(watts), max(period, 1))


def write_channel(series: PowerSeries, path) -> None:
    """Inverse of :func:`load_channel`; values are written at full precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ts, pw in zip(series.timestamps.tolist(), series.power.tolist()):
            fh.write(f"{ts} {pw!r}\n")


# alignment


def align(series_list: Sequence[PowerSeries], target_period: int) -> list[PowerSeries]:
    """Forward-fill every series onto one grid over the common time range."""
    if not series_list:
        raise EmptyInputError("nothing to align")
    if target_period < max(s.sample_period for s in series_list):
        raise ConfigError(f"target period {target_period} is finer than a native period")
    start = max(int(s.timestamps[0]) for s in series_list)
    end = min(int(s.timestamps[-1]) for s in series_list)
    if start > end:
        raise AlignmentError("series have no overlapping time range")
    grid = np.arange(start, end + 1, target_period, dtype=np.int64)
    out = []
    for s in series_list:
        idx = np.searchsorted(s.timestamps, grid, side="right") - 1
        out.append(PowerSeries(grid, s.power[idx], target_period))
    return out


def valid_mask(series: PowerSeries, grid: np.ndarray, max_gap: int) -> np.ndarray:
    """Grid points not inside a recording gap longer than ``max_gap`` seconds."""
    ts = series.timestamps
    idx = np.searchsorted(ts, grid, side="right") - 1
    ok = idx >= 0
    nxt = np.minimum(idx + 1, ts.size - 1)
    gap = ts[nxt] - ts[np.maximum(idx, 0)]
    on_sample = ts[np.maximum(idx, 0)] == grid
    inside_gap = (idx < ts.size - 1) & (gap > max_gap) & ~on_sample
    return ok & ~inside_gap


def segments_from_mask(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of ``True`` as half-open (start, stop) index pairs."""
    padded = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def split_segments(series: PowerSeries, max_gap: int | None = None) -> list[tuple[int, int]]:
    """Index ranges of ``series`` separated by gaps above ``max_gap`` seconds."""
    max_gap = GAP_FACTOR * series.sample_period if max_gap is None else max_gap
    if len(series) == 0:
        return []
    breaks = np.flatnonzero(np.diff(series.timestamps) > max_gap) + 1
    bounds = [0, *breaks.tolist(), len(series)]
    return list(zip(bounds[:-1], bounds[1:]))


# synthetic households


@dataclass(frozen=True)
class ApplianceSpec:
    label: str
    on_power: float
    period: int
    duty: float
    jitter: float = 0.0

    def __post_init__(self):
        if not 0 < self.duty < 1:
            raise ConfigError(f"{self.label}: duty must lie in (0, 1), got {self.duty}")
        if self.on_power < 0:
            raise ConfigError(f"{self.label}: on_power must be >= 0, got {self.on_power}")
        if self.period < 2:
            raise ConfigError(f"{self.label}: period must be >= 2 samples, got {self.period}")
        if not 0 <= self.jitter <= 1:
            raise ConfigError(f"{self.label}: jitter must lie in [0, 1], got {self.jitter}")


@dataclass(frozen=True)
class SynthConfig:
    appliances: tuple[ApplianceSpec, ...]
    baseline_power: float = 50.0
    noise_std: float = 0.0
    length: int = 1000
    seed: int = 0
    sample_period: int = 6
    start_time: int = 1303132929

    def __post_init__(self):
        object.__setattr__(self, "appliances", tuple(self.appliances))
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.length < 1:
            raise ConfigError(f"length must be >= 1, got {self.length}")
        if self.sample_period < 1:
            raise ConfigError(f"sample_period must be >= 1, got {self.sample_period}")
        labels = [a.label for a in self.appliances]
        if len(set(labels)) != len(labels):
            raise ConfigError("appliance labels must be unique")


def _square_wave(spec: ApplianceSpec, length: int, rng: np.random.Generator) -> np.ndarray:
    on_len = min(spec.period - 1, max(1, round(spec.duty * spec.period)))
    slack = spec.period - on_len
    max_shift = int(math.floor(spec.jitter * slack))
    n_cycles = -(-length // spec.period)
    shifts = rng.integers(0, max_shift + 1, size=n_cycles) if max_shift > 0 else np.zeros(n_cycles, dtype=int)
    out = np.zeros(n_cycles * spec.period)
    for c, shift in enumerate(shifts):
        s = c * spec.period + int(shift)
        out[s:s + on_len] = spec.on_power
    return out[:length]


def synth_scene(cfg: SynthConfig) -> Scene:
    """Square-wave appliances with per-cycle phase jitter, constant baseline, Gaussian noise.

    Each cycle is ``period`` samples long and holds one on-block of
    ``round(duty * period)`` samples, shifted by a random offset of up to
    ``jitter`` times the off-time.
    """
    rng = np.random.default_rng(cfg.seed)
    ts = cfg.start_time + cfg.sample_period * np.arange(cfg.length, dtype=np.int64)
    appliances = {
        spec.label: PowerSeries(ts, _square_wave(spec, cfg.length, rng), cfg.sample_period)
        for spec in cfg.appliances
    }
    baseline = PowerSeries(ts, np.full(cfg.length, float(cfg.baseline_power)), cfg.sample_period)
    noise_vals = rng.normal(0.0, cfg.noise_std, size=cfg.length) if cfg.noise_std > 0 else np.zeros(cfg.length)
    noise = PowerSeries(ts, noise_vals, cfg.sample_period)
    return compose_scene(appliances, baseline, noise)


DEFAULT_APPLIANCES = (
    ApplianceSpec("fridge", 150.0, 90, 0.4, 0.5),
    ApplianceSpec("washer", 500.0, 400, 0.25, 0.8),
    ApplianceSpec("kettle", 2000.0, 700, 0.05, 0.9),
)


# key-value files


def parse_kv(text: str, source: str = "<string>") -> list[tuple[str, str]]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", lineno, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno, source)
        pairs.append((key, value))
    return pairs


def read_kv(path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    return parse_kv(path.read_text(encoding="utf-8"), str(path))


def _number(value: str, kind, key: str):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def read_synth_config(path) -> SynthConfig:
    """Read a synthetic-house description.

    Scalar keys mirror :class:`SynthConfig` fields.  Appliances are given as
    ``appliance.<label> = on_power, period, duty[, jitter]``.  Without any
    appliance lines the three default appliances are used.
    """
    kwargs = {}
    appliances = []
    scalar = {
        "baseline_power": float,
        "noise_std": float,
        "length": int,
        "seed": int,
        "sample_period": int,
        "start_time": int,
    }
    for key, value in read_kv(path):
        if key.startswith("appliance."):
            fields = [v.strip() for v in value.split(",")]
            if len(fields) not in (3, 4):
                raise ConfigError(f"{key}: expected 'on_power, period, duty[, jitter]'")
            appliances.append(
                ApplianceSpec(
                    key[len("appliance."):],
                    _number(fields[0], float, key),
                    _number(fields[1], int, key),
                    _number(fields[2], float, key),
                    _number(fields[3], float, key) if len(fields) == 4 else 0.0,
                )
            )
        elif key in scalar:
            kwargs[key] = _number(value, scalar[key], key)
        else:
            raise ConfigError(f"unknown synth config key {key!r}")
    return SynthConfig(tuple(appliances) or DEFAULT_APPLIANCES, **kwargs)


# manifests


@dataclass(frozen=True)
class Manifest:
    """Channel layout of one house.

    Text format (paths relative to the manifest file)::

        name = house1
        sample_period = 6          # alignment grid, seconds
        train_fraction = 0.8       # leading share of samples used for training
        aggregate = aggregate.dat
        aggregate.period = 1       # optional native period
        appliance.fridge = fridge.dat
        appliance.fridge.period = 3
    """

    aggregate: ChannelFileRef
    appliances: tuple[ChannelFileRef, ...]
    sample_period: int | None = None
    train_fraction: float = 0.8
    name: str = "house"
    path: str | None = None

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")

    @property
    def labels(self) -> list[str]:
        return [a.appliance_label for a in self.appliances]


def read_manifest(path) -> Manifest:
    path = Path(path)
    base = path.parent
    pairs = read_kv(path)
    values: dict[str, str] = {}
    for key, value in pairs:
        if key in values:
            raise ConfigError(f"duplicate manifest key {key!r}")
        values[key] = value
    if "aggregate" not in values:
        raise ConfigError(f"manifest {path} has no 'aggregate' entry")

    def period(key):
        return _number(values[key], int, key) if key in values else None

    aggregate = ChannelFileRef(str(base / values["aggregate"]), "aggregate", period("aggregate.period"))
    appliances = []
    for key, value in pairs:
        if key.startswith("appliance.") and not key.endswith(".period"):
            label = key[len("appliance."):]
            appliances.append(ChannelFileRef(str(base / value), label, period(f"{key}.period")))
    known = {"name", "sample_period", "train_fraction", "aggregate", "aggregate.period"}
    for key in values:
        if key not in known and not key.startswith("appliance."):
            raise ConfigError(f"unknown manifest key {key!r}")
    return Manifest(
        aggregate,
        tuple(appliances),
        period("sample_period"),
        _number(values.get("train_fraction", "0.8"), float, "train_fraction"),
        values.get("name", path.stem),
        str(path),
    )


def write_manifest(manifest: Manifest, path) -> None:
    base = Path(path).parent
    lines = [f"name = {manifest.name}"]
    if manifest.sample_period is not None:
        lines.append(f"sample_period = {manifest.sample_period}")
    lines.append(f"train_fraction = {manifest.train_fraction!r}")

    def rel(p):
        return os.path.relpath(p, base)

    lines.append(f"aggregate = {rel(manifest.aggregate.path)}")
    if manifest.aggregate.native_period is not None:
        lines.append(f"aggregate.period = {manifest.aggregate.native_period}")
    for ref in manifest.appliances:
        lines.append(f"appliance.{ref.appliance_label} = {rel(ref.path)}")
        if ref.native_period is not None:
            lines.append(f"appliance.{ref.appliance_label}.period = {ref.native_period}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class House:
    """An aligned measured scene plus the gap-free index ranges of its grid."""

    scene: Scene
    segments: list[tuple[int, int]] = field(default_factory=list)
    train_fraction: float = 0.8

    @property
    def split_index(self) -> int:
        return int(math.floor(len(self.scene) * self.train_fraction))

    def split_segments(self, split: str) -> list[tuple[int, int]]:
        """Segments clipped to the ``train``, ``test`` or ``all`` part of the series."""
        if split == "all":
            lo, hi = 0, len(self.scene)
        elif split == "train":
            lo, hi = 0, self.split_index
        elif split == "test":
            lo, hi = self.split_index, len(self.scene)
        else:
            raise ConfigError(f"split must be train, test or all, got {split!r}")
        out = []
        for a, b in self.segments:
            a, b = max(a, lo), min(b, hi)
            if b > a:
                out.append((a, b))
        return out


def load_house(manifest: Manifest | str | os.PathLike, appliances: Iterable[str] | None = None) -> House:
    """Load, align and segment every channel named in a manifest."""
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    refs = list(manifest.appliances)
    if appliances is not None:
        wanted = list(appliances)
        missing = [a for a in wanted if a not in manifest.labels]
        if missing:
            raise ConfigError(f"appliance(s) {missing} not in manifest {manifest.path}")
        refs = [r for r in refs if r.appliance_label in wanted]
    raw = [load_channel(manifest.aggregate)] + [load_channel(r) for r in refs]
    period = manifest.sample_period or max(s.sample_period for s in raw)
    aligned = align(raw, period)
    grid = aligned[0].timestamps
    mask = np.ones(grid.size, dtype=bool)
    for s in raw:
        mask &= valid_mask(s, grid, GAP_FACTOR * s.sample_period)
    scene = Scene(aligned[0], {r.appliance_label: s for r, s in zip(refs, aligned[1:])})
    return House(scene, segments_from_mask(mask), manifest.train_fraction)


# metrics CSV


def export_csv(rows: Iterable[MetricsRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.as_record())


def read_csv(path) -> list[MetricsRow]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"metrics file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise DataError(f"{path}: unexpected header {header}")
        return [MetricsRow.from_record(rec) for rec in reader]
