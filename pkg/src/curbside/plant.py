"""Stochastic stand-in for the real roadway: the fitted model plus uniform residuals."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import ControlInput, DynamicsModel, InvalidParameterError, NoiseModel, TrafficState, affine_step


class PlantStepper:
    """Steps ``max(A x + B u + w, 0)`` with ``w[i] ~ U(lo[i], hi[i])``.

    Owns one generator; every step consumes exactly four draws in state order
    (DF, DS, AF, AS). Not thread-safe, so give each concurrent rollout its own
    stepper.
    """

    def __init__(self, model: DynamicsModel, noise: NoiseModel | None = None, seed: int | None = None):
        self.model = model
        self.noise = noise if noise is not None else NoiseModel.zero()
        self.seed = self.noise.seed if seed is None else int(seed)
        self._lo = np.array(self.noise.lo)
        self._hi = np.array(self.noise.hi)
        self.rng = np.random.default_rng(self.seed)
        self.last_noise: np.ndarray | None = None

    def step(self, state: TrafficState, control: ControlInput) -> TrafficState:
        w = self.rng.uniform(self._lo, self._hi)
        self.last_noise = w
        raw = affine_step(self.model.a, self.model.b, state.to_array(), control.to_array()) + w
        return TrafficState.from_array(np.maximum(raw, 0.0))

    def rollout(self, x_init: TrafficState, inputs: Sequence[ControlInput]) -> list[TrafficState]:
        if len(inputs) == 0:
            raise InvalidParameterError("rollout needs at least one input")
        states = []
        state = x_init
        for control in inputs:
            state = self.step(state, control)
            states.append(state)
        return states
