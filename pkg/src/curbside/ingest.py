"""Measurement CSV loading, passenger-volume features, regression matrices and
untreated-congestion scenario extraction."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import (
    AS_CRIT,
    BIN_MINUTES,
    DS_CRIT,
    ControlInput,
    DataError,
    Facility,
    InsufficientDataError,
    InvalidParameterError,
    Scenario,
    SchemaError,
    TimeSeries,
    TrafficState,
    VolumeScale,
)

CSV_COLUMNS = ("timestamp_utc", "df", "ds", "af", "as", "td", "ta", "pax_arriving", "pax_departing")
MIN_TRANSITIONS = 100


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class GapWarning(UserWarning):
    """Missing bins between two consecutive records."""


@dataclass(frozen=True)
class RawRecord:
    timestamp: int
    df: int
    ds: float
    af: int
    as_: float
    td: int = 0
    ta: int = 0
    pax_arriving: int = 0
    pax_departing: int = 0

    @property
    def state(self) -> TrafficState:
        return TrafficState(self.df, self.ds, self.af, self.as_)


# --------------------------------------------------------------------------- CSV


def parse_timestamp(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    stamp = datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return int(stamp.timestamp())


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _count(value: str, name: str, line: int) -> int:
    try:
        out = int(value)
    except ValueError:
        raise ParseError(f"{name}={value!r} is not an integer", line) from None
    if out < 0:
        raise ParseError(f"{name}={value!r} is negative", line)
    return out


def _speed(value: str, name: str, line: int) -> float:
    try:
        out = float(value)
    except ValueError:
        raise ParseError(f"{name}={value!r} is not a number", line) from None
    if not math.isfinite(out) or out < 0:
        raise ParseError(f"{name}={value!r} must be a finite non-negative speed", line)
    return out


def _flag(value: str, name: str, line: int) -> int:
    if value.strip() not in ("0", "1"):
        raise ParseError(f"{name}={value!r} must be 0 or 1", line)
    return int(value)


def load_csv(path: str | Path, bin_minutes: int = BIN_MINUTES) -> list[RawRecord]:
    """Read a measurement file into records.

    Rows must be in strictly increasing timestamp order on the bin grid. Each
    hole in the timeline raises a ``GapWarning`` naming how many bins are
    missing; the records on either side are kept.
    """
    records: list[RawRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise SchemaError(f"expected header {','.join(CSV_COLUMNS)}, got {header!r}")
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(CSV_COLUMNS):
                raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", line)
            try:
                ts = parse_timestamp(row[0])
            except ValueError:
                raise ParseError(f"bad timestamp {row[0]!r}", line) from None
            records.append(
                RawRecord(
                    timestamp=ts,
                    df=_count(row[1], "df", line),
                    ds=_speed(row[2], "ds", line),
                    af=_count(row[3], "af", line),
                    as_=_speed(row[4], "as", line),
                    td=_flag(row[5], "td", line),
                    ta=_flag(row[6], "ta", line),
                    pax_arriving=_count(row[7], "pax_arriving", line),
                    pax_departing=_count(row[8], "pax_departing", line),
                )
            )
    check_timeline(records, bin_minutes)
    return records


def check_timeline(records: Sequence[RawRecord], bin_minutes: int = BIN_MINUTES) -> list[tuple[int, int]]:
    """Validate ordering and return ``(index, missing_bins)`` for every gap."""
    step = bin_minutes * 60
    gaps = []
    for i in range(1, len(records)):
        delta = records[i].timestamp - records[i - 1].timestamp
        if delta == 0:
            raise SchemaError(f"duplicate timestamp {format_timestamp(records[i].timestamp)}")
        if delta < 0:
            raise SchemaError(f"timestamps go backwards at {format_timestamp(records[i].timestamp)}")
        if delta % step:
            raise SchemaError(f"timestamp {format_timestamp(records[i].timestamp)} is off the {bin_minutes}-minute grid")
        if delta > step:
            missing = delta // step - 1
            gaps.append((i, missing))
            warnings.warn(
                f"{missing} missing bin(s) before {format_timestamp(records[i].timestamp)}",
                GapWarning,
                stacklevel=2,
            )
    return gaps


def write_csv(path: str | Path, records: Iterable[RawRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [format_timestamp(r.timestamp), r.df, f"{r.ds:.2f}", r.af, f"{r.as_:.2f}", r.td, r.ta, r.pax_arriving, r.pax_departing]
            )


def contiguous_runs(records: Sequence[RawRecord], bin_minutes: int = BIN_MINUTES) -> list[range]:
    """Index ranges of gap-free stretches."""
    step = bin_minutes * 60
    runs = []
    start = 0
    for i in range(1, len(records) + 1):
        if i == len(records) or records[i].timestamp - records[i - 1].timestamp != step:
            runs.append(range(start, i))
            start = i
    return [r for r in runs if len(r)]


# ---------------------------------------------------------------------- features


@dataclass(frozen=True)
class VolumeFeatures:
    """Raw windowed passenger sums for the records that have full windows.

    ``index`` holds positions into the source record sequence; ``dropped``
    lists the positions that lacked a full window on either side.
    """

    index: np.ndarray
    dv: np.ndarray
    av: np.ndarray
    dropped: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.index)

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.dv, self.av])


def build_volume_features(
    records: Sequence[RawRecord], window_bins: int = 8, bin_minutes: int = BIN_MINUTES
) -> VolumeFeatures:
    """Arriving volume over the preceding window, departing volume over the next.

    For bin k: ``av = sum(pax_arriving[k-w : k])`` and
    ``dv = sum(pax_departing[k+1 : k+w+1])``. Bins without a complete window on
    the relevant side are dropped.
    """
    w = int(window_bins)
    if w < 1:
        raise InvalidParameterError("window_bins must be positive")
    n = len(records)
    if n < 2 * w + 1:
        raise InsufficientDataError(f"need at least {2 * w + 1} contiguous bins for {w}-bin volume windows, got {n}")
    if len(contiguous_runs(records, bin_minutes)) > 1:
        raise DataError("volume features need a contiguous series; split it at gaps first")
    arriving = np.array([r.pax_arriving for r in records], dtype=float)
    departing = np.array([r.pax_departing for r in records], dtype=float)
    arr_cum = np.concatenate([[0.0], np.cumsum(arriving)])
    dep_cum = np.concatenate([[0.0], np.cumsum(departing)])
    index = np.arange(w, n - w)
    av = arr_cum[index] - arr_cum[index - w]
    dv = dep_cum[index + w + 1] - dep_cum[index + 1]
    dropped = tuple(range(w)) + tuple(range(n - w, n))
    return VolumeFeatures(index=index, dv=dv, av=av, dropped=dropped)


def build_segment_features(
    records: Sequence[RawRecord], window_bins: int = 8, bin_minutes: int = BIN_MINUTES
) -> VolumeFeatures:
    """``build_volume_features`` applied to each gap-free stretch separately.

    Stretches too short for a full window are dropped with a warning.
    """
    index, dv, av, dropped = [], [], [], []
    for run in contiguous_runs(records, bin_minutes):
        if len(run) < 2 * window_bins + 1:
            warnings.warn(f"dropping {len(run)}-bin stretch: too short for volume windows", GapWarning, stacklevel=2)
            dropped.extend(run)
            continue
        part = build_volume_features([records[i] for i in run], window_bins, bin_minutes)
        index.append(part.index + run.start)
        dv.append(part.dv)
        av.append(part.av)
        dropped.extend(i + run.start for i in part.dropped)
    if not index:
        raise InsufficientDataError("no stretch of the series is long enough for volume windows")
    return VolumeFeatures(
        index=np.concatenate(index), dv=np.concatenate(dv), av=np.concatenate(av), dropped=tuple(sorted(dropped))
    )


class VolumeScaler(TransformerMixin, BaseEstimator):
    """Min-max scaling of the (dv, av) columns onto [0, 1].

    Values outside the fitted range are clipped so the result is always a
    valid ``ControlInput``. A constant column maps to 0.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        if X.shape[1] != 2:
            raise InvalidParameterError("VolumeScaler expects two columns (dv, av)")
        self.data_min_ = X.min(axis=0)
        self.data_max_ = X.max(axis=0)
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=float)
        return apply_volume_scale(self.scale_, X[:, 0], X[:, 1])

    @property
    def scale_(self) -> VolumeScale:
        check_is_fitted(self)
        return VolumeScale(float(self.data_min_[0]), float(self.data_max_[0]), float(self.data_min_[1]), float(self.data_max_[1]))


def apply_volume_scale(scale: VolumeScale, dv: np.ndarray, av: np.ndarray) -> np.ndarray:
    def one(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if hi <= lo:
            return np.zeros_like(values)
        return np.clip((values - lo) / (hi - lo), 0.0, 1.0)

    return np.column_stack([one(dv, scale.dv_min, scale.dv_max), one(av, scale.av_min, scale.av_max)])


# -------------------------------------------------------------------- regression


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    """Transition columns: ``x_prime`` is 8 x N ([x_k; u_k]), ``y`` is 4 x N (x_{k+1}).

    ``source_index`` holds the record position of each column's x_k.
    """

    x_prime: np.ndarray
    y: np.ndarray
    split_seed: int | None = None
    train_fraction: float = 0.8
    volume_scale: VolumeScale = field(default_factory=VolumeScale)
    source_index: np.ndarray | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.x_prime, dtype=float).reshape(8, -1)
        y = np.asarray(self.y, dtype=float).reshape(4, -1)
        if x.shape[1] != y.shape[1]:
            raise InvalidParameterError("x_prime and y need the same number of columns")
        object.__setattr__(self, "x_prime", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x_prime.shape[1]


def transition_index(records: Sequence[RawRecord], features: VolumeFeatures, bin_minutes: int = BIN_MINUTES) -> np.ndarray:
    """Positions into ``features`` whose bin and the next bin both carry features and are adjacent in time."""
    step = bin_minutes * 60
    idx = features.index
    if len(idx) < 2:
        return np.zeros(0, dtype=int)
    stamps = np.array([records[i].timestamp for i in idx])
    ok = (idx[1:] == idx[:-1] + 1) & (stamps[1:] - stamps[:-1] == step)
    return np.flatnonzero(ok)


def make_regression_dataset(
    records: Sequence[RawRecord],
    features: VolumeFeatures,
    train_fraction: float = 0.8,
    seed: int = 0,
    bin_minutes: int = BIN_MINUTES,
) -> tuple[RegressionDataset, RegressionDataset]:
    """Random train/validation split of one-step transitions.

    Each column is a whole (x_k, u_k, x_{k+1}) tuple, so a split never breaks a
    transition. Volume scaling is fitted on the training columns only.
    """
    if not 0.0 < train_fraction <= 1.0:
        raise InvalidParameterError("train_fraction must lie in (0, 1]")
    pos = transition_index(records, features, bin_minutes)
    n = len(pos)
    if n < MIN_TRANSITIONS:
        raise InsufficientDataError(f"need at least {MIN_TRANSITIONS} transitions, got {n}")

    rng = np.random.default_rng(seed)
    n_train = int(round(train_fraction * n))
    perm = rng.permutation(n)
    train_cols = np.sort(perm[:n_train])
    val_cols = np.sort(perm[n_train:])
    if len(val_cols) == 0:
        warnings.warn("train_fraction leaves no validation columns", UserWarning, stacklevel=2)

    raw = features.as_array()
    scaler = VolumeScaler().fit(raw[pos[train_cols]])
    volumes = scaler.transform(raw)

    def build(cols: np.ndarray) -> RegressionDataset:
        here = pos[cols]
        src = features.index[here]
        nxt = features.index[here + 1]
        states = np.array([[records[i].df, records[i].ds, records[i].af, records[i].as_] for i in src]).reshape(-1, 4)
        flags = np.array([[records[i].td, records[i].ta] for i in src], dtype=float).reshape(-1, 2)
        following = np.array([[records[i].df, records[i].ds, records[i].af, records[i].as_] for i in nxt]).reshape(-1, 4)
        x_prime = np.hstack([states, flags, volumes[here]]).T
        return RegressionDataset(x_prime, following.T, seed, train_fraction, scaler.scale_, src)

    return build(train_cols), build(val_cols)


def to_time_series(
    records: Sequence[RawRecord],
    features: VolumeFeatures,
    scale: VolumeScale,
    bin_minutes: int = BIN_MINUTES,
) -> list[TimeSeries]:
    """Normalized, gap-free series over the bins that carry volume features."""
    volumes = apply_volume_scale(scale, features.dv, features.av)
    out = []
    step = bin_minutes * 60
    start = 0
    idx = features.index
    for i in range(1, len(idx) + 1):
        if i == len(idx) or idx[i] != idx[i - 1] + 1 or records[idx[i]].timestamp - records[idx[i - 1]].timestamp != step:
            chunk = range(start, i)
            recs = [records[idx[j]] for j in chunk]
            out.append(
                TimeSeries(
                    start=recs[0].timestamp,
                    states=tuple(r.state for r in recs),
                    inputs=tuple(ControlInput(r.td, r.ta, volumes[j, 0], volumes[j, 1]) for r, j in zip(recs, chunk)),
                    bin_minutes=bin_minutes,
                )
            )
            start = i
    return out


# --------------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class ScenarioConfig:
    congested_threshold: float = 0.7
    normal_threshold: float = 0.9
    min_duration_bins: int = 4
    ds_crit: float = DS_CRIT
    as_crit: float = AS_CRIT
    lookahead_bins: int = 16

    def __post_init__(self) -> None:
        if not 0 < self.congested_threshold <= self.normal_threshold:
            raise InvalidParameterError("need 0 < congested_threshold <= normal_threshold")
        if self.min_duration_bins < 1 or self.lookahead_bins < 0:
            raise InvalidParameterError("min_duration_bins must be >= 1 and lookahead_bins >= 0")
        if not (self.ds_crit > 0 and self.as_crit > 0):
            raise InvalidParameterError("critical speeds must be positive")

    def ratios(self, series: TimeSeries) -> dict[Facility, np.ndarray]:
        states = series.state_array()
        return {
            Facility.DEPARTURES: states[:, 1] / self.ds_crit,
            Facility.ARRIVALS: states[:, 3] / self.as_crit,
        }


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def extract_scenarios(series: TimeSeries, config: ScenarioConfig | None = None) -> list[Scenario]:
    """Maximal untreated congestion runs on one facility while the other is normal.

    A run qualifies when the facility's critical ratio stays below
    ``congested_threshold`` for at least ``min_duration_bins`` bins, the other
    facility's ratio is at least ``normal_threshold`` on the first bin, and no
    message is shown anywhere in the run. Overlapping candidates keep the
    earliest.
    """
    config = config or ScenarioConfig()
    if len(series) == 0:
        return []
    ratios = config.ratios(series)
    messages = np.array([u.td + u.ta for u in series.inputs]) > 0
    candidates = []
    for facility in (Facility.DEPARTURES, Facility.ARRIVALS):
        for s, e in _runs(ratios[facility] < config.congested_threshold):
            if e - s < config.min_duration_bins:
                continue
            if ratios[facility.other][s] < config.normal_threshold:
                continue
            if messages[s:e].any():
                continue
            candidates.append((int(s), int(e), facility))
    candidates.sort(key=lambda c: (c[0], c[2] is Facility.ARRIVALS))

    scenarios: list[Scenario] = []
    taken_until = -1
    for s, e, facility in candidates:
        if s < taken_until:
            continue
        scenarios.append(
            Scenario(
                window=series.slice(s, e),
                congested_facility=facility,
                onset_index=s,
                label=f"{facility.value} congested from {_label_time(series.timestamp(s))}",
                lookahead=series.slice(e, e + config.lookahead_bins),
            )
        )
        taken_until = e
    return scenarios


def _label_time(epoch: int) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%d %H:%M UTC")


def scenario_holds(series: TimeSeries, scenario: Scenario, config: ScenarioConfig | None = None) -> bool:
    """Re-check an extracted scenario's defining predicate against its source series."""
    config = config or ScenarioConfig()
    s = scenario.onset_index
    e = s + len(scenario.window)
    if e > len(series) or series.timestamp(s) != scenario.window.start:
        return False
    ratios = config.ratios(series)
    own = ratios[scenario.congested_facility]
    other = ratios[scenario.congested_facility.other]
    inside = bool((own[s:e] < config.congested_threshold).all())
    maximal = (s == 0 or own[s - 1] >= config.congested_threshold) and (
        e == len(series) or own[e] >= config.congested_threshold
    )
    untreated = all(u.td == 0 and u.ta == 0 for u in series.inputs[s:e])
    return (
        inside
        and maximal
        and untreated
        and e - s >= config.min_duration_bins
        and other[s] >= config.normal_threshold
    )
