"""Domain types shared by every stage of the pipeline.

State and input vectors use a fixed index order so that numpy code in the
other modules can address them positionally:

    state  = (DF, DS, AF, AS)   flows in vehicles per bin, speeds in km/h
    input  = (TD, TA, DV, AV)   binary messages, normalized passenger volumes
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1

BIN_MINUTES = 15
DS_CRIT = 35.0
AS_CRIT = 45.0

DF, DS, AF, AS = range(4)
TD, TA, DV, AV = range(4)
STATE_NAMES = ("df", "ds", "af", "as")
INPUT_NAMES = ("td", "ta", "dv", "av")
N_STATES = 4
N_INPUTS = 4


class CurbsideError(Exception):
    """Base class for errors raised by this package."""


class InvalidParameterError(CurbsideError, ValueError):
    pass


class DataError(CurbsideError, ValueError):
    pass


class InsufficientDataError(DataError):
    pass


class SchemaError(DataError):
    pass


class ConvergenceError(CurbsideError, RuntimeError):
    def __init__(self, message: str, primal_residual: float, dual_residual: float, iterations: int):
        super().__init__(message)
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual
        self.iterations = iterations


class Facility(str, enum.Enum):
    DEPARTURES = "Departures"
    ARRIVALS = "Arrivals"

    @property
    def speed_index(self) -> int:
        return DS if self is Facility.DEPARTURES else AS

    @property
    def flow_index(self) -> int:
        return DF if self is Facility.DEPARTURES else AF

    @property
    def other(self) -> "Facility":
        return Facility.ARRIVALS if self is Facility.DEPARTURES else Facility.DEPARTURES


def critical_ratio(speed: float, critical_speed: float) -> float:
    """Average speed divided by the roadway's critical speed."""
    if not critical_speed > 0:
        raise InvalidParameterError(f"critical speed must be positive, got {critical_speed!r}")
    if speed < 0:
        raise InvalidParameterError(f"speed must be non-negative, got {speed!r}")
    return speed / critical_speed


@dataclass(frozen=True)
class TrafficState:
    """Flows and speeds of both roadways for one bin.

    Negative components are clamped to zero; NaN or infinite values raise.
    """

    df: float
    ds: float
    af: float
    as_: float

    def __post_init__(self) -> None:
        for name in ("df", "ds", "af", "as_"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InvalidParameterError(f"TrafficState.{name} must be finite, got {value!r}")
            # `value + 0.0` folds -0.0 into 0.0
            object.__setattr__(self, name, max(value, 0.0) + 0.0)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "TrafficState":
        if len(values) != N_STATES:
            raise InvalidParameterError(f"expected {N_STATES} state components, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_array(self) -> np.ndarray:
        return np.array([self.df, self.ds, self.af, self.as_], dtype=float)

    def speed(self, facility: Facility) -> float:
        return self.ds if facility is Facility.DEPARTURES else self.as_

    def flow(self, facility: Facility) -> float:
        return self.df if facility is Facility.DEPARTURES else self.af

    def to_dict(self) -> dict[str, float]:
        return {"df": self.df, "ds": self.ds, "af": self.af, "as": self.as_}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrafficState":
        return cls(data["df"], data["ds"], data["af"], data["as"])


@dataclass(frozen=True)
class ControlInput:
    """Message flags for one bin plus the exogenous passenger-volume features."""

    td: int = 0
    ta: int = 0
    dv: float = 0.0
    av: float = 0.0

    def __post_init__(self) -> None:
        for name in ("td", "ta"):
            flag = getattr(self, name)
            if flag not in (0, 1):
                raise InvalidParameterError(f"ControlInput.{name} must be 0 or 1, got {flag!r}")
            object.__setattr__(self, name, int(flag))
        if self.td + self.ta > 1:
            raise InvalidParameterError("at most one diversion message can be displayed per bin")
        for name in ("dv", "av"):
            value = float(getattr(self, name))
            if not (0.0 <= value <= 1.0):
                raise InvalidParameterError(f"ControlInput.{name} must lie in [0, 1], got {value!r}")
            object.__setattr__(self, name, value)

    @property
    def action(self) -> tuple[int, int]:
        return (self.td, self.ta)

    def to_array(self) -> np.ndarray:
        return np.array([self.td, self.ta, self.dv, self.av], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "ControlInput":
        td, ta, dv, av = values
        return cls(int(round(td)), int(round(ta)), float(dv), float(av))

    def to_dict(self) -> dict[str, float]:
        return {"td": self.td, "ta": self.ta, "dv": self.dv, "av": self.av}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ControlInput":
        return cls(data["td"], data["ta"], data["dv"], data["av"])


def default_eq_mask() -> np.ndarray:
    """Entries of [A B] fixed at zero: no cross-facility flow coupling."""
    mask = np.zeros((N_STATES, N_STATES + N_INPUTS), dtype=bool)
    mask[DF, AF] = True
    mask[AF, DF] = True
    mask[DF, AS] = True
    mask[AF, DS] = True
    return mask


def default_sign_mask() -> np.ndarray:
    """+1 forces an entry of [A B] to be >= 0, -1 to be <= 0, 0 leaves it free.

    Treating a roadway must not lower its own speed.
    """
    mask = np.zeros((N_STATES, N_STATES + N_INPUTS), dtype=np.int8)
    mask[DS, N_STATES + TD] = 1
    mask[AS, N_STATES + TA] = 1
    return mask


def _frozen(array: Any, dtype: Any, shape: tuple[int, int]) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    if out.shape != shape:
        raise InvalidParameterError(f"expected shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class VolumeScale:
    """Min-max constants mapping raw windowed passenger sums onto [0, 1]."""

    dv_min: float = 0.0
    dv_max: float = 1.0
    av_min: float = 0.0
    av_max: float = 1.0

    def to_dict(self) -> dict[str, float]:
        return {"dv_min": self.dv_min, "dv_max": self.dv_max, "av_min": self.av_min, "av_max": self.av_max}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VolumeScale":
        return cls(**{k: float(data[k]) for k in ("dv_min", "dv_max", "av_min", "av_max")})


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    """Linear one-bin-ahead model ``x_next = A x + B u`` with its structural masks."""

    a: np.ndarray
    b: np.ndarray
    eq_mask: np.ndarray = field(default_factory=default_eq_mask)
    sign_mask: np.ndarray = field(default_factory=default_sign_mask)
    volume_scale: VolumeScale = field(default_factory=VolumeScale)
    fit_report: Any = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "a", _frozen(self.a, float, (N_STATES, N_STATES)))
        object.__setattr__(self, "b", _frozen(self.b, float, (N_STATES, N_INPUTS)))
        object.__setattr__(self, "eq_mask", _frozen(self.eq_mask, bool, (N_STATES, N_STATES + N_INPUTS)))
        sign = _frozen(self.sign_mask, np.int8, (N_STATES, N_STATES + N_INPUTS))
        if not np.isin(sign, (-1, 0, 1)).all():
            raise InvalidParameterError("sign_mask entries must be -1, 0 or +1")
        object.__setattr__(self, "sign_mask", sign)
        if not (np.isfinite(self.a).all() and np.isfinite(self.b).all()):
            raise InvalidParameterError("model matrices must be finite")

    @property
    def a_prime(self) -> np.ndarray:
        return np.hstack([self.a, self.b])

    def mask_violation(self) -> float:
        """Largest violation of the equality and sign masks (0.0 when feasible)."""
        ap = self.a_prime
        eq = np.abs(ap[self.eq_mask]).max(initial=0.0)
        pos = np.maximum(-ap[self.sign_mask > 0], 0.0).max(initial=0.0)
        neg = np.maximum(ap[self.sign_mask < 0], 0.0).max(initial=0.0)
        return float(max(eq, pos, neg))

    def step(self, state: TrafficState, control: ControlInput) -> TrafficState:
        return TrafficState.from_array(propagate(self.a, self.b, state.to_array(), control.to_array()))


def affine_step(a: np.ndarray, b: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Unclamped ``A x + B u`` for a single vector or a batch (trailing axis of 4).

    The sums are spelled out term by term so that a batch row and the same
    vector evaluated alone round identically; the controller and the plant
    both rely on that.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    ax = x[..., 0:1] * a[:, 0] + x[..., 1:2] * a[:, 1] + x[..., 2:3] * a[:, 2] + x[..., 3:4] * a[:, 3]
    bu = u[..., 0:1] * b[:, 0] + u[..., 1:2] * b[:, 1] + u[..., 2:3] * b[:, 2] + u[..., 3:4] * b[:, 3]
    return ax + bu


def propagate(a: np.ndarray, b: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Clamped one-step recursion ``max(A x + B u, 0)``."""
    return np.maximum(affine_step(a, b, x, u), 0.0)


@dataclass(frozen=True)
class NoiseModel:
    """Per-state uniform residual bounds used by the stochastic plant."""

    lo: tuple[float, float, float, float]
    hi: tuple[float, float, float, float]
    seed: int = 0

    def __post_init__(self) -> None:
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != N_STATES or len(hi) != N_STATES:
            raise InvalidParameterError("noise bounds need one value per state")
        for name, l, h in zip(STATE_NAMES, lo, hi):
            if not (math.isfinite(l) and math.isfinite(h)):
                raise InvalidParameterError(f"noise bounds for {name} must be finite")
            if not (l <= 0.0 <= h):
                raise InvalidParameterError(f"noise bounds for {name} must straddle zero, got ({l}, {h})")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def zero(cls, seed: int = 0) -> "NoiseModel":
        return cls((0.0,) * 4, (0.0,) * 4, seed)

    @property
    def mean(self) -> np.ndarray:
        return (np.array(self.lo) + np.array(self.hi)) / 2.0

    def to_dict(self) -> dict[str, Any]:
        return {"lo": list(self.lo), "hi": list(self.hi), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "NoiseModel":
        return cls(tuple(data["lo"]), tuple(data["hi"]), data.get("seed", 0))


@dataclass(frozen=True)
class TimeSeries:
    """Contiguous, uniformly binned states and inputs."""

    start: int
    states: tuple[TrafficState, ...]
    inputs: tuple[ControlInput, ...]
    bin_minutes: int = BIN_MINUTES

    def __post_init__(self) -> None:
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if len(self.states) != len(self.inputs):
            raise InvalidParameterError("states and inputs must have equal length")
        if self.bin_minutes <= 0:
            raise InvalidParameterError("bin_minutes must be positive")

    def __len__(self) -> int:
        return len(self.states)

    def timestamp(self, index: int) -> int:
        return self.start + index * self.bin_minutes * 60

    def slice(self, start: int, stop: int) -> "TimeSeries":
        start = max(start, 0)
        stop = min(stop, len(self))
        return TimeSeries(self.timestamp(start), self.states[start:stop], self.inputs[start:stop], self.bin_minutes)

    def state_array(self) -> np.ndarray:
        return np.array([s.to_array() for s in self.states]).reshape(-1, N_STATES)

    def input_array(self) -> np.ndarray:
        return np.array([u.to_array() for u in self.inputs]).reshape(-1, N_INPUTS)


@dataclass(frozen=True)
class Scenario:
    """Untreated congestion episode on one facility.

    ``window`` covers the congested run; ``lookahead`` holds the bins right
    after it (possibly empty) so that controllers have history to forecast from.
    ``onset_index`` is the position of the first window bin in the source series.
    """

    window: TimeSeries
    congested_facility: Facility
    onset_index: int
    label: str = ""
    lookahead: TimeSeries | None = None

    @property
    def history(self) -> TimeSeries:
        if self.lookahead is None or len(self.lookahead) == 0:
            return self.window
        return TimeSeries(
            self.window.start,
            self.window.states + self.lookahead.states,
            self.window.inputs + self.lookahead.inputs,
            self.window.bin_minutes,
        )

    @property
    def end(self) -> int:
        return self.window.timestamp(len(self.window))

    def to_dict(self) -> dict[str, Any]:
        return {
            "start": self.window.start,
            "end": self.end,
            "facility": self.congested_facility.value,
            "onset_index": self.onset_index,
        }
