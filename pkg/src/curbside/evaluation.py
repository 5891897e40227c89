"""Counterfactual evaluation of the controller on untreated congestion scenarios.

For each scenario the receding-horizon loop is replayed from the onset state
against the stochastic plant, and the resulting speeds are compared with what
was actually measured over the same bins.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, NamedTuple, Sequence

import numpy as np

from .core import (
    DataError,
    DynamicsModel,
    Facility,
    InsufficientDataError,
    InvalidParameterError,
    NoiseModel,
    Scenario,
    TrafficState,
)
from .mpc import MpcConfig, receding_horizon
from .plant import PlantStepper

SPEED_FLOOR = 1.0
IQR_METHOD = "linear"


@dataclass(frozen=True)
class EvalConfig:
    bottleneck_km_low: float = 0.5
    bottleneck_km_high: float = 2.0
    idle_fuel_gal_per_hr: float = 0.35
    idle_co2_g_per_hr: float = 2100.0
    mc_runs: int = 30
    exec_steps: int = 4

    def __post_init__(self) -> None:
        if not 0 < self.bottleneck_km_low <= self.bottleneck_km_high:
            raise InvalidParameterError("bottleneck lengths need 0 < low <= high")
        if self.mc_runs < 1:
            raise InvalidParameterError("mc_runs must be at least 1")
        if self.exec_steps < 1:
            raise InvalidParameterError("exec_steps must be at least 1")
        if self.idle_fuel_gal_per_hr < 0 or self.idle_co2_g_per_hr < 0:
            raise InvalidParameterError("idle rates must be non-negative")


class RatioProfile(NamedTuple):
    ratios: np.ndarray
    floored: np.ndarray


def _speeds(states: Sequence[TrafficState], facility: Facility) -> np.ndarray:
    return np.array([s.speed(facility) for s in states], dtype=float)


def _flows(states: Sequence[TrafficState], facility: Facility) -> np.ndarray:
    return np.array([s.flow(facility) for s in states], dtype=float)


def _check_lengths(actual: Sequence[TrafficState], counterfactual: Sequence[TrafficState]) -> None:
    if len(actual) != len(counterfactual):
        raise InvalidParameterError(f"length mismatch: {len(actual)} actual vs {len(counterfactual)} counterfactual")


def speed_ratio_profile(
    actual: Sequence[TrafficState], counterfactual: Sequence[TrafficState], facility: Facility
) -> RatioProfile:
    """Counterfactual over actual speed per step, both floored at 1 km/h.

    ``floored`` marks the steps where the actual speed was below the floor.
    """
    _check_lengths(actual, counterfactual)
    act = _speeds(actual, facility)
    cf = _speeds(counterfactual, facility)
    return RatioProfile(np.maximum(cf, SPEED_FLOOR) / np.maximum(act, SPEED_FLOOR), act < SPEED_FLOOR)


def _hours_base(actual: Sequence[TrafficState], counterfactual: Sequence[TrafficState], facility: Facility) -> float:
    # travel time per km saved, weighted by the flow that actually went through
    act = np.maximum(_speeds(actual, facility), SPEED_FLOOR)
    cf = np.maximum(_speeds(counterfactual, facility), SPEED_FLOOR)
    return float(np.sum((1.0 / act - 1.0 / cf) * _flows(actual, facility)))


def vehicle_hours_saved(
    actual: Sequence[TrafficState],
    counterfactual: Sequence[TrafficState],
    facility: Facility,
    config: EvalConfig | None = None,
) -> tuple[float, float]:
    """Signed vehicle-hours saved over the steps given, for both bottleneck lengths.

    With four 15-minute steps the sum covers one hour of deployment, so it is
    reported as-is.
    """
    config = config or EvalConfig()
    _check_lengths(actual, counterfactual)
    base = _hours_base(actual, counterfactual, facility)
    return config.bottleneck_km_low * base, config.bottleneck_km_high * base


def operational_savings(veh_hours: tuple[float, float], config: EvalConfig | None = None) -> dict[str, tuple[float, float]]:
    """Idle fuel (gallons) and CO2 (kg) avoided for each vehicle-hour bound."""
    config = config or EvalConfig()
    low, high = veh_hours
    if not (math.isfinite(low) and math.isfinite(high)):
        raise InvalidParameterError("vehicle-hours must be finite")
    co2_kg = config.idle_co2_g_per_hr / 1000.0
    fuel = config.idle_fuel_gal_per_hr
    return {"fuel_gal": (fuel * low, fuel * high), "co2_kg": (co2_kg * low, co2_kg * high)}


@dataclass(frozen=True)
class Rollout:
    actions: tuple[tuple[int, int], ...]
    states: tuple[TrafficState, ...]

    def __iter__(self):
        return iter(zip(self.actions, self.states))

    def __len__(self) -> int:
        return len(self.states)


def scenario_forecast(scenario: Scenario) -> tuple[tuple[float, float], ...]:
    return tuple((u.dv, u.av) for u in scenario.history.inputs)


def counterfactual_rollout(
    scenario: Scenario,
    model: DynamicsModel,
    noise: NoiseModel | None = None,
    config: EvalConfig | None = None,
    mpc_config: MpcConfig | None = None,
    seed: int | None = None,
) -> Rollout:
    """Closed loop from the onset state with volumes taken from the scenario history."""
    config = config or EvalConfig()
    mpc_config = mpc_config or MpcConfig(exec_steps=config.exec_steps)
    history = scenario.history
    if len(history) < config.exec_steps + 1:
        raise InsufficientDataError(
            f"scenario has {len(history)} bins, need {config.exec_steps + 1} to compare {config.exec_steps} steps"
        )
    plant = PlantStepper(model, noise, seed)
    loop_config = replace(mpc_config, exo_forecast=scenario_forecast(scenario))
    trace = receding_horizon(history.states[0], model, plant, loop_config, config.exec_steps)
    return Rollout(tuple(trace.actions), tuple(trace.states[1:]))


def run_seed(campaign_seed: int, scenario_index: int, run: int) -> int:
    """Per-run plant seed; depends only on its coordinates, not on scheduling."""
    seq = np.random.SeedSequence([campaign_seed, scenario_index, run])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def _mean_se(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = samples.mean(axis=0)
    if samples.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])


@dataclass(frozen=True)
class ScenarioResult:
    """Monte-Carlo summary of one scenario (means and standard errors over runs)."""

    label: str
    start: int
    facility: Facility
    treated_ratio_mean: tuple[float, ...]
    treated_ratio_se: tuple[float, ...]
    untreated_ratio_mean: tuple[float, ...]
    untreated_ratio_se: tuple[float, ...]
    veh_hours: tuple[float, float]
    fuel_gal: tuple[float, float]
    co2_kg: tuple[float, float]
    activation_rate: tuple[float, ...] = ()
    floored_steps: int = 0
    runs: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "start": self.start,
            "facility": self.facility.value,
            "runs": self.runs,
            "treated_ratio": {"mean": list(self.treated_ratio_mean), "se": list(self.treated_ratio_se)},
            "untreated_ratio": {"mean": list(self.untreated_ratio_mean), "se": list(self.untreated_ratio_se)},
            "activation_rate": list(self.activation_rate),
            "floored_steps": self.floored_steps,
            "veh_hours": {"low": self.veh_hours[0], "high": self.veh_hours[1]},
            "fuel_gal": {"low": self.fuel_gal[0], "high": self.fuel_gal[1]},
            "co2_kg": {"low": self.co2_kg[0], "high": self.co2_kg[1]},
        }


def evaluate_scenario(
    scenario: Scenario,
    model: DynamicsModel,
    noise: NoiseModel | None = None,
    config: EvalConfig | None = None,
    mpc_config: MpcConfig | None = None,
    campaign_seed: int = 0,
    scenario_index: int = 0,
) -> ScenarioResult:
    config = config or EvalConfig()
    steps = config.exec_steps
    treated = scenario.congested_facility
    actual = scenario.history.states[1 : steps + 1]

    treated_ratios, untreated_ratios, bases, active = [], [], [], []
    floored = 0
    for run in range(config.mc_runs):
        seed = run_seed(campaign_seed, scenario_index, run)
        rollout = counterfactual_rollout(scenario, model, noise, config, mpc_config, seed)
        profile = speed_ratio_profile(actual, rollout.states, treated)
        treated_ratios.append(profile.ratios)
        untreated_ratios.append(speed_ratio_profile(actual, rollout.states, treated.other).ratios)
        floored += int(profile.floored.sum())
        bases.append(_hours_base(actual, rollout.states, treated))
        active.append([td + ta for td, ta in rollout.actions])

    t_mean, t_se = _mean_se(np.array(treated_ratios))
    u_mean, u_se = _mean_se(np.array(untreated_ratios))
    base = float(np.mean(bases))
    hours = (config.bottleneck_km_low * base, config.bottleneck_km_high * base)
    savings = operational_savings(hours, config)
    return ScenarioResult(
        label=scenario.label,
        start=scenario.window.start,
        facility=treated,
        treated_ratio_mean=tuple(float(v) for v in t_mean),
        treated_ratio_se=tuple(float(v) for v in t_se),
        untreated_ratio_mean=tuple(float(v) for v in u_mean),
        untreated_ratio_se=tuple(float(v) for v in u_se),
        veh_hours=hours,
        fuel_gal=savings["fuel_gal"],
        co2_kg=savings["co2_kg"],
        activation_rate=tuple(float(v) for v in np.mean(active, axis=0)),
        floored_steps=floored,
        runs=config.mc_runs,
    )


def _evaluate_job(args: tuple) -> ScenarioResult:
    return evaluate_scenario(*args)


def evaluate_campaign(
    scenarios: Sequence[Scenario],
    model: DynamicsModel,
    noise: NoiseModel | None = None,
    config: EvalConfig | None = None,
    mpc_config: MpcConfig | None = None,
    seed: int = 0,
    jobs: int = 1,
) -> list[ScenarioResult]:
    """Evaluate every scenario; results come back in scenario order for any ``jobs``."""
    if jobs < 1:
        raise InvalidParameterError("jobs must be at least 1")
    config = config or EvalConfig()
    tasks = [(s, model, noise, config, mpc_config, seed, i) for i, s in enumerate(scenarios)]
    if jobs == 1 or len(tasks) < 2:
        return [_evaluate_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_evaluate_job, tasks))


def _iqr(values: np.ndarray) -> tuple[float, float]:
    q1, q3 = np.percentile(values, [25, 75], method=IQR_METHOD)
    return float(q1), float(q3)


@dataclass
class CampaignReport:
    results: list[ScenarioResult]
    panels: dict[str, dict[str, Any]] = field(default_factory=dict)
    veh_hours: dict[str, Any] = field(default_factory=dict)
    savings: dict[str, Any] = field(default_factory=dict)

    @property
    def n_scenarios(self) -> int:
        return len(self.results)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_scenarios": self.n_scenarios,
            "panels": self.panels,
            "veh_hours": self.veh_hours,
            "savings": self.savings,
            "scenarios": [r.to_dict() for r in self.results],
        }


def _panel(results: Sequence[ScenarioResult]) -> dict[str, Any]:
    # standard errors here are across scenarios of the per-scenario means
    if not results:
        return {"n": 0, "treated_ratio": {"mean": [], "se": []}, "untreated_ratio": {"mean": [], "se": []}}
    t_mean, t_se = _mean_se(np.array([r.treated_ratio_mean for r in results]))
    u_mean, u_se = _mean_se(np.array([r.untreated_ratio_mean for r in results]))
    return {
        "n": len(results),
        "treated_ratio": {"mean": t_mean.tolist(), "se": t_se.tolist()},
        "untreated_ratio": {"mean": u_mean.tolist(), "se": u_se.tolist()},
    }


def aggregate(results: Sequence[ScenarioResult]) -> CampaignReport:
    """Speed-ratio panels per congested facility plus vehicle-hour distributions."""
    results = list(results)
    if not results:
        raise DataError("cannot aggregate an empty result set")
    panels = {f.value: _panel([r for r in results if r.facility is f]) for f in Facility}
    low = np.array([r.veh_hours[0] for r in results])
    high = np.array([r.veh_hours[1] for r in results])
    veh_hours = {
        "low": {"mean": float(low.mean()), "iqr": list(_iqr(low))},
        "high": {"mean": float(high.mean()), "iqr": list(_iqr(high))},
    }
    fuel = np.array([r.fuel_gal for r in results])
    co2 = np.array([r.co2_kg for r in results])
    savings = {
        "fuel_gal": {"low": float(fuel[:, 0].mean()), "high": float(fuel[:, 1].mean())},
        "co2_kg": {"low": float(co2[:, 0].mean()), "high": float(co2[:, 1].mean())},
    }
    return CampaignReport(results, panels, veh_hours, savings)


def empty_report() -> CampaignReport:
    return CampaignReport([], {f.value: _panel([]) for f in Facility}, {}, {})


def ratio_rows(report: CampaignReport) -> list[dict[str, Any]]:
    """Rows for the speed-ratio-by-step table, one per panel and step."""
    rows = []
    for facility, panel in report.panels.items():
        for k, (tm, ts, um, us) in enumerate(
            zip(
                panel["treated_ratio"]["mean"],
                panel["treated_ratio"]["se"],
                panel["untreated_ratio"]["mean"],
                panel["untreated_ratio"]["se"],
            )
        ):
            rows.append(
                {
                    "congested": facility,
                    "step": k + 1,
                    "n": panel["n"],
                    "treated_mean": tm,
                    "treated_se": ts,
                    "untreated_mean": um,
                    "untreated_se": us,
                }
            )
    return rows


def hours_rows(report: CampaignReport) -> list[dict[str, Any]]:
    """Rows for the vehicle-hours distribution table, one per scenario."""
    return [
        {"label": r.label, "congested": r.facility.value, "veh_hours_low": r.veh_hours[0], "veh_hours_high": r.veh_hours[1]}
        for r in report.results
    ]
