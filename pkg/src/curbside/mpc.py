"""Receding-horizon control over binary diversion messages.

Each bin the controller may show TD, TA or nothing, so a horizon of T bins has
3**T candidate sequences. ``solve`` enumerates them exactly with a
branch-and-bound prune, level by level over numpy batches.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .core import (
    AS,
    AS_CRIT,
    DS,
    DS_CRIT,
    ControlInput,
    DynamicsModel,
    InvalidParameterError,
    TrafficState,
    propagate,
)

MAX_HORIZON = 16

# Row order doubles as the tie-break order: TD before TA before idle.
ACTIONS = ((1, 0), (0, 1), (0, 0))
IDLE = 2


@dataclass(frozen=True)
class MpcConfig:
    horizon_t: int = 12
    exec_steps: int = 4
    ds_crit: float = DS_CRIT
    as_crit: float = AS_CRIT
    gamma: float = 0.01
    exo_forecast: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.horizon_t < 1:
            raise InvalidParameterError("horizon_t must be at least 1")
        if not 1 <= self.exec_steps <= self.horizon_t:
            raise InvalidParameterError("exec_steps must lie in [1, horizon_t]")
        if not (self.ds_crit > 0 and self.as_crit > 0):
            raise InvalidParameterError("critical speeds must be positive")
        if not self.gamma >= 0:
            raise InvalidParameterError("gamma must be non-negative")
        forecast = tuple((float(dv), float(av)) for dv, av in self.exo_forecast)
        object.__setattr__(self, "exo_forecast", forecast)


@dataclass(frozen=True)
class ControlPlan:
    actions: tuple[tuple[int, int], ...]
    predicted_states: tuple[TrafficState, ...]
    cost: float
    nodes_expanded: int = 0

    @property
    def n_active(self) -> int:
        return sum(td + ta for td, ta in self.actions)


def state_cost(ds: Any, as_: Any, ds_crit: float = DS_CRIT, as_crit: float = AS_CRIT) -> Any:
    """Squared shortfall of both critical-speed ratios below 1.

    Accepts scalars or arrays. Capping each ratio at 1 is the minimizer of the
    epigraph form (ratio variable <= 1 and <= speed / critical speed).
    """
    d = np.minimum(1.0, ds / ds_crit)
    a = np.minimum(1.0, as_ / as_crit)
    return (d - 1.0) * (d - 1.0) + (a - 1.0) * (a - 1.0)


def stage_cost(state: TrafficState, action: tuple[int, int], config: MpcConfig) -> float:
    td, ta = action
    base = state_cost(state.ds, state.as_, config.ds_crit, config.as_crit)
    return float(base + config.gamma * (td + ta))


def _check_forecast(config: MpcConfig) -> np.ndarray:
    if len(config.exo_forecast) < config.horizon_t:
        raise InvalidParameterError(
            f"exo_forecast has {len(config.exo_forecast)} entries, horizon needs {config.horizon_t}"
        )
    return np.array(config.exo_forecast[: config.horizon_t], dtype=float)


def solve(x_init: TrafficState, model: DynamicsModel, config: MpcConfig) -> ControlPlan:
    """Globally optimal message sequence over the horizon.

    Controls cover bins 0..T-1 and the state cost runs through bin T. Ties go to
    the plan with fewer messages, then to the one whose messages come earliest.
    """
    horizon = config.horizon_t
    if horizon > MAX_HORIZON:
        raise InvalidParameterError(f"horizon {horizon} exceeds the enumeration limit of {MAX_HORIZON}")
    forecast = _check_forecast(config)
    a, b = model.a, model.b
    gamma = config.gamma

    def cost_of(states: np.ndarray) -> np.ndarray:
        return state_cost(states[:, DS], states[:, AS], config.ds_crit, config.as_crit)

    def idle_completion(cost: np.ndarray, states: np.ndarray, start: int) -> np.ndarray:
        for k in range(start, horizon):
            cost = cost + cost_of(states)
            states = propagate(a, b, states, [0.0, 0.0, forecast[k, 0], forecast[k, 1]])
        return cost + cost_of(states)

    a_pos, a_neg = np.maximum(a, 0.0), np.minimum(a, 0.0)
    # per-state extremes of B[:, :2] @ action over the three admissible actions
    pushes = np.array([b[:, 0] * td + b[:, 1] * ta for td, ta in ACTIONS])
    push_lo, push_hi = pushes.min(axis=0), pushes.max(axis=0)

    def cost_to_go_bound(states: np.ndarray, start: int) -> np.ndarray:
        # Box over-approximation of every state reachable from each node; the
        # cost is nonincreasing in both speeds, so the box's upper speeds give
        # an admissible lower bound on the remaining state cost.
        bound = cost_of(states)
        lo = hi = states
        for k in range(start, horizon):
            exo = b[:, 2] * forecast[k, 0] + b[:, 3] * forecast[k, 1]
            lo, hi = (
                np.maximum(lo @ a_pos.T + hi @ a_neg.T + exo + push_lo, 0.0),
                np.maximum(hi @ a_pos.T + lo @ a_neg.T + exo + push_hi, 0.0),
            )
            bound = bound + cost_of(hi)
        return bound

    states = x_init.to_array()[None, :]
    partial = np.zeros(1)
    codes = np.zeros((1, 0), dtype=np.int8)
    n_active = np.zeros(1, dtype=np.int64)
    incumbent = float(idle_completion(partial, states, 0)[0])
    expanded = 0

    for k in range(horizon):
        here = cost_of(states)
        dv, av = forecast[k]
        child_states, child_cost, child_codes, child_active = [], [], [], []
        for code, (td, ta) in enumerate(ACTIONS):
            child_states.append(propagate(a, b, states, [td, ta, dv, av]))
            child_cost.append(partial + (here + gamma * (td + ta)))
            child_codes.append(np.full(len(states), code, dtype=np.int8))
            child_active.append(n_active + (td + ta))
        states = np.concatenate(child_states)
        partial = np.concatenate(child_cost)
        codes = np.concatenate([np.tile(codes, (3, 1)), np.concatenate(child_codes)[:, None]], axis=1)
        n_active = np.concatenate(child_active)
        expanded += len(states)

        if k < horizon - 1:
            incumbent = min(incumbent, float(idle_completion(partial, states, k + 1).min()))
            # Strict inequality plus a rounding allowance keeps every sequence
            # that could tie the optimum.
            slack = 1e-9 * (1.0 + abs(incumbent))
            keep = partial <= incumbent
            keep[keep] = partial[keep] + cost_to_go_bound(states[keep], k + 1) <= incumbent + slack
            states, partial, codes, n_active = states[keep], partial[keep], codes[keep], n_active[keep]

    total = partial + cost_of(states)
    order = np.lexsort(tuple(codes[:, j] for j in range(horizon - 1, -1, -1)) + (n_active, total))
    best = order[0]
    actions = tuple(ACTIONS[c] for c in codes[best])
    return ControlPlan(
        actions=actions,
        predicted_states=tuple(predict(x_init, model, actions, forecast)),
        cost=float(total[best]),
        nodes_expanded=expanded,
    )


def predict(
    x_init: TrafficState,
    model: DynamicsModel,
    actions: Sequence[tuple[int, int]],
    forecast: Sequence[Sequence[float]],
) -> list[TrafficState]:
    """Clamped model recursion under a fixed action sequence."""
    x = x_init.to_array()
    out = []
    for (td, ta), (dv, av) in zip(actions, forecast):
        x = propagate(model.a, model.b, x, [td, ta, dv, av])
        out.append(TrafficState.from_array(x))
    return out


def plan_cost(
    x_init: TrafficState,
    model: DynamicsModel,
    actions: Sequence[tuple[int, int]],
    config: MpcConfig,
) -> float:
    """Objective of a given action sequence, accumulated in solve's order."""
    forecast = _check_forecast(config)
    x = x_init.to_array()
    cost = 0.0
    for (td, ta), (dv, av) in zip(actions, forecast):
        cost = cost + (state_cost(x[DS], x[AS], config.ds_crit, config.as_crit) + config.gamma * (td + ta))
        x = propagate(model.a, model.b, x, [td, ta, dv, av])
    return float(cost + state_cost(x[DS], x[AS], config.ds_crit, config.as_crit))


@dataclass
class ClosedLoopTrace:
    """States x_0..x_n, the applied inputs, and per-solve diagnostics."""

    states: list[TrafficState] = field(default_factory=list)
    inputs: list[ControlInput] = field(default_factory=list)
    solve_costs: list[float] = field(default_factory=list)
    solve_ms: list[float] = field(default_factory=list)

    @property
    def actions(self) -> list[tuple[int, int]]:
        return [u.action for u in self.inputs]

    def to_dict(self, timings: bool = True) -> dict[str, Any]:
        bins = []
        for i, state in enumerate(self.states):
            entry: dict[str, Any] = {"state": state.to_dict()}
            if i < len(self.inputs):
                entry["action"] = list(self.inputs[i].action)
                entry["solve_cost"] = self.solve_costs[i]
                if timings:
                    entry["solve_ms"] = self.solve_ms[i]
            bins.append(entry)
        return {"bins": bins}


def _window(forecast: Sequence[tuple[float, float]], start: int, length: int) -> tuple[tuple[float, float], ...]:
    # past the end of the forecast, hold the last known volumes
    out = list(forecast[start : start + length])
    while len(out) < length:
        out.append(forecast[min(start + len(out), len(forecast) - 1)])
    return tuple(out)


def receding_horizon(
    x_init: TrafficState,
    model: DynamicsModel,
    plant: Any,
    config: MpcConfig,
    total_steps: int,
) -> ClosedLoopTrace:
    """Plan, apply the first action to ``plant``, observe, and re-plan.

    ``config.exo_forecast`` is indexed from the first loop bin; it is held at
    its last value once the loop runs past it.
    """
    if total_steps < 1:
        raise InvalidParameterError("total_steps must be at least 1")
    if not config.exo_forecast:
        raise InvalidParameterError("receding_horizon needs a passenger-volume forecast")
    forecast = config.exo_forecast
    trace = ClosedLoopTrace(states=[x_init])
    state = x_init
    for t in range(total_steps):
        step_config = replace(config, exo_forecast=_window(forecast, t, config.horizon_t))
        tic = time.perf_counter()
        plan = solve(state, model, step_config)
        trace.solve_ms.append((time.perf_counter() - tic) * 1e3)
        td, ta = plan.actions[0]
        dv, av = step_config.exo_forecast[0]
        control = ControlInput(td, ta, min(max(dv, 0.0), 1.0), min(max(av, 0.0), 1.0))
        state = plant.step(state, control)
        trace.inputs.append(control)
        trace.solve_costs.append(plan.cost)
        trace.states.append(state)
    return trace
