"""Seeded synthetic measurement campaigns with a known ground-truth model.

Passenger volumes follow two daily waves (departing in the morning, arriving
in the evening). Congestion episodes are passenger surges on one facility with
no message shown that day; elsewhere messages are deployed at random so their
effect stays identifiable.

The truth model has no intercept, so speeds are held up by a slow common mode
(both speeds move together, eigenvalue ``slow_pole``) fed by total volume,
while a fast difference mode carries the facility-specific congestion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .core import DynamicsModel, Facility, InvalidParameterError, NoiseModel, VolumeScale
from .ingest import RawRecord, apply_volume_scale, build_volume_features

BINS_PER_DAY = 96
DEFAULT_START = int(datetime(2022, 4, 1, tzinfo=timezone.utc).timestamp())


def ground_truth_model(
    slow_pole: float = 0.995,
    fast_pole: float = 0.8,
    level: float = 0.7,
    imbalance: float = 9.0,
    tilt: float = 1.5,
    td_effect: float = 3.0,
    ta_effect: float = 2.0,
    volume_scale: VolumeScale | None = None,
) -> DynamicsModel:
    """Masked ``(A, B)`` used to generate campaigns.

    ``level`` feeds total normalized volume into the common speed mode;
    ``imbalance`` pushes the speed difference toward the facility with the
    lighter load. ``tilt`` shifts the speed difference toward arrivals in
    proportion to total volume, which evens out how close each facility runs to
    its critical speed.
    """
    common = (slow_pole + fast_pole) / 2
    cross = (slow_pole - fast_pole) / 2
    a = np.array(
        [
            [0.5, 0.0, 0.0, 0.0],
            [0.0, common, 0.0, cross],
            [0.0, 0.0, 0.5, 0.0],
            [0.0, cross, 0.0, common],
        ]
    )
    b = np.array(
        [
            [-40.0, 30.0, 380.0, 0.0],
            [td_effect, -0.3, level - imbalance - tilt, level + imbalance - tilt],
            [30.0, -40.0, 0.0, 380.0],
            [-0.3, ta_effect, level + imbalance + tilt, level - imbalance + tilt],
        ]
    )
    return DynamicsModel(a, b, volume_scale=volume_scale or VolumeScale())


@dataclass(frozen=True)
class SynthConfig:
    days: int = 120
    episodes: int = 50
    seed: int = 42
    start: int = DEFAULT_START
    message_rate: float = 0.03
    noise_lo: tuple[float, float, float, float] = (-3.0, -0.4, -3.0, -0.4)
    noise_hi: tuple[float, float, float, float] = (3.0, 0.4, 3.0, 0.4)
    base_pax: float = 40.0
    peak_pax: float = 160.0
    surge_pax: float = 400.0
    surge_bins: int = 12

    def __post_init__(self) -> None:
        if self.days < 3:
            raise InvalidParameterError("need at least three days")
        if not 0 <= self.episodes <= self.days - 2:
            raise InvalidParameterError("episodes must fit on interior days, one per day")
        if not 0 <= self.message_rate < 0.5:
            raise InvalidParameterError("message_rate must lie in [0, 0.5)")


@dataclass
class SynthCampaign:
    records: list[RawRecord]
    model: DynamicsModel
    noise: NoiseModel
    injections: list[dict] = field(default_factory=list)


# time-of-day (bins) of the departing and arriving passenger peaks
DEPARTURE_PEAK = 32
ARRIVAL_PEAK = 80


def _daily_wave(peak_bin: int) -> np.ndarray:
    t = np.arange(BINS_PER_DAY)
    return 0.5 * (1.0 + np.cos(2 * np.pi * (t - peak_bin) / BINS_PER_DAY))


def _surge_shape(bins: int) -> np.ndarray:
    # flat-topped bump, identical on every surge day so the volume maximum repeats
    ramp = np.sin(np.linspace(0.0, np.pi, bins)) ** 0.5
    return ramp


def synthesize(config: SynthConfig | None = None) -> SynthCampaign:
    config = config or SynthConfig()
    rng = np.random.default_rng(config.seed)
    n = config.days * BINS_PER_DAY

    dep_wave = np.tile(_daily_wave(DEPARTURE_PEAK), config.days)
    arr_wave = np.tile(_daily_wave(ARRIVAL_PEAK), config.days)
    pax_dep = config.base_pax + config.peak_pax * dep_wave
    pax_arr = config.base_pax + config.peak_pax * arr_wave

    # alternate facilities so the split is even; surge days drawn without replacement
    days = np.sort(rng.choice(np.arange(1, config.days - 1), size=config.episodes, replace=False))
    facilities = [Facility.DEPARTURES if i % 2 == 0 else Facility.ARRIVALS for i in range(config.episodes)]
    facilities = [facilities[i] for i in rng.permutation(config.episodes)]
    shape = _surge_shape(config.surge_bins)
    surge_days = set(int(d) for d in days)
    injections = []
    for day, facility in zip(days, facilities):
        peak = DEPARTURE_PEAK if facility is Facility.DEPARTURES else ARRIVAL_PEAK
        first = int(day) * BINS_PER_DAY + peak - config.surge_bins // 2
        target = pax_dep if facility is Facility.DEPARTURES else pax_arr
        target[first : first + config.surge_bins] += config.surge_pax * shape
        injections.append({"day": int(day), "facility": facility.value, "surge_start": first})
    pax_dep = np.round(pax_dep).astype(int)
    pax_arr = np.round(pax_arr).astype(int)

    # messages: none on surge days, otherwise random and mutually exclusive
    draw = rng.random(n)
    td = (draw < config.message_rate).astype(int)
    ta = ((draw >= config.message_rate) & (draw < 2 * config.message_rate)).astype(int)
    for day in surge_days:
        td[day * BINS_PER_DAY : (day + 1) * BINS_PER_DAY] = 0
        ta[day * BINS_PER_DAY : (day + 1) * BINS_PER_DAY] = 0

    stamps = config.start + np.arange(n) * 15 * 60
    skeleton = [
        RawRecord(int(stamps[i]), 0, 0.0, 0, 0.0, int(td[i]), int(ta[i]), int(pax_arr[i]), int(pax_dep[i]))
        for i in range(n)
    ]
    features = build_volume_features(skeleton)
    scale = VolumeScale(
        float(features.dv.min()), float(features.dv.max()), float(features.av.min()), float(features.av.max())
    )
    volumes = apply_volume_scale(scale, features.dv, features.av)
    model = ground_truth_model(volume_scale=scale)
    noise = NoiseModel(config.noise_lo, config.noise_hi, config.seed)

    a, b = model.a, model.b
    first_idx = int(features.index[0])
    x = _steady_state(model, volumes[:BINS_PER_DAY])
    lo, hi = np.array(noise.lo), np.array(noise.hi)
    records = []
    for j, i in enumerate(features.index):
        records.append(
            RawRecord(
                int(stamps[i]),
                int(round(max(x[0], 0.0))),
                round(max(x[1], 0.0), 2),
                int(round(max(x[2], 0.0))),
                round(max(x[3], 0.0), 2),
                int(td[i]),
                int(ta[i]),
                int(pax_arr[i]),
                int(pax_dep[i]),
            )
        )
        u = np.array([td[i], ta[i], volumes[j, 0], volumes[j, 1]], dtype=float)
        x = np.maximum(a @ x + b @ u + rng.uniform(lo, hi), 0.0)
    # keep the pax columns for the window bins too, so features can be rebuilt from the CSV
    head = [
        RawRecord(int(stamps[i]), records[0].df, records[0].ds, records[0].af, records[0].as_, 0, 0, int(pax_arr[i]), int(pax_dep[i]))
        for i in range(first_idx)
    ]
    tail_start = int(features.index[-1]) + 1
    tail = [
        RawRecord(int(stamps[i]), records[-1].df, records[-1].ds, records[-1].af, records[-1].as_, 0, 0, int(pax_arr[i]), int(pax_dep[i]))
        for i in range(tail_start, n)
    ]
    return SynthCampaign(head + records + tail, model, noise, injections)


def _steady_state(model: DynamicsModel, volumes: np.ndarray) -> np.ndarray:
    # average-input equilibrium, then a few days of burn-in on the first day's volumes
    u_mean = np.array([0.0, 0.0, volumes[:, 0].mean(), volumes[:, 1].mean()])
    x = np.linalg.solve(np.eye(4) - model.a, model.b @ u_mean)
    for _ in range(5):
        for v in volumes:
            x = np.maximum(model.a @ x + model.b @ np.array([0.0, 0.0, v[0], v[1]]), 0.0)
    return x
