import numpy as np
import pytest

from curbside.core import ControlInput, DynamicsModel, InvalidParameterError, NoiseModel, TrafficState
from curbside.mpc import predict
from curbside.plant import PlantStepper
from curbside.synth import ground_truth_model

TABLE_NOISE = NoiseModel((-34.6, -2.9, -43.3, -3.5), (38.5, 3.4, 46.5, 3.9), seed=0)
IDLE = ControlInput(0, 0, 0.0, 0.0)


def test_identity_with_zero_noise():
    plant = PlantStepper(DynamicsModel(np.eye(4), np.zeros((4, 4))))
    x = TrafficState(10, 20, 30, 40)
    assert plant.step(x, IDLE) == x


def test_constant_shift_noise():
    # degenerate bounds lo == hi are not allowed, so use a tiny interval around a known shift
    noise = NoiseModel((-1e-12,) * 4, (1e-12,) * 4)
    b = np.zeros((4, 4))
    b[:, 2] = [1.0, 2.0, 3.0, 4.0]
    plant = PlantStepper(DynamicsModel(np.eye(4), b), noise)
    out = plant.step(TrafficState(10, 20, 30, 40), ControlInput(0, 0, 1.0, 0.0))
    np.testing.assert_allclose(out.to_array(), [11, 22, 33, 44], atol=1e-9)


def test_same_seed_same_trajectory():
    model = ground_truth_model()
    inputs = [ControlInput(k % 2, 0, 0.5, 0.5) for k in range(20)]
    x0 = TrafficState(200, 30, 200, 40)
    a = PlantStepper(model, TABLE_NOISE, seed=5).rollout(x0, inputs)
    b = PlantStepper(model, TABLE_NOISE, seed=5).rollout(x0, inputs)
    c = PlantStepper(model, TABLE_NOISE, seed=6).rollout(x0, inputs)
    assert a == b and a != c


def test_geometric_decay():
    plant = PlantStepper(DynamicsModel(0.5 * np.eye(4), np.zeros((4, 4))))
    states = plant.rollout(TrafficState(64, 64, 64, 64), [IDLE] * 6)
    for k, s in enumerate(states, start=1):
        assert s.to_array().tolist() == [64 * 0.5**k] * 4


def test_length_one_rollout_and_empty_input():
    plant = PlantStepper(ground_truth_model())
    assert len(plant.rollout(TrafficState(1, 1, 1, 1), [IDLE])) == 1
    with pytest.raises(InvalidParameterError):
        plant.rollout(TrafficState(1, 1, 1, 1), [])


def test_noise_within_bounds_and_four_draws_per_step():
    plant = PlantStepper(ground_truth_model(), TABLE_NOISE, seed=1)
    rng = np.random.default_rng(1)
    x = TrafficState(300, 40, 300, 50)
    for _ in range(500):
        plant.step(x, IDLE)
        w = plant.last_noise
        assert (w >= TABLE_NOISE.lo).all() and (w < TABLE_NOISE.hi).all()
        np.testing.assert_array_equal(w, rng.uniform(TABLE_NOISE.lo, TABLE_NOISE.hi))


def test_monte_carlo_mean_matches_expected_step():
    model = ground_truth_model()
    x = TrafficState(300, 40, 300, 50)  # far from zero, so the clamp never binds
    u = ControlInput(0, 1, 0.4, 0.6)
    plant = PlantStepper(model, TABLE_NOISE, seed=2)
    draws = np.array([plant.step(x, u).to_array() for _ in range(20000)])
    expected = model.a @ x.to_array() + model.b @ u.to_array() + TABLE_NOISE.mean
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert (np.abs(draws.mean(axis=0) - expected) <= 3 * se).all()


def test_zero_noise_equals_deterministic_prediction_bitwise():
    model = ground_truth_model()
    x0 = TrafficState(250, 25, 180, 35)
    actions = [(1, 0), (0, 0), (0, 1), (0, 0), (1, 0)]
    forecast = [(0.2 * k, 1 - 0.2 * k) for k in range(5)]
    inputs = [ControlInput(td, ta, dv, av) for (td, ta), (dv, av) in zip(actions, forecast)]
    plant_states = PlantStepper(model).rollout(x0, inputs)
    for got, want in zip(plant_states, predict(x0, model, actions, forecast)):
        assert got.to_array().tobytes() == want.to_array().tobytes()


def test_monte_carlo_rollouts_follow_accumulated_drift():
    # mean of x_k is the noiseless rollout plus sum_j A^j @ mean(w), while no clamp binds
    model = ground_truth_model()
    x0 = TrafficState(300, 40, 300, 50)
    inputs = [ControlInput(1, 0, 0.6, 0.4), ControlInput(0, 0, 0.6, 0.4), ControlInput(0, 1, 0.5, 0.5)] * 2
    clean = np.array([s.to_array() for s in PlantStepper(model).rollout(x0, inputs)])
    runs = np.array([[s.to_array() for s in PlantStepper(model, TABLE_NOISE, seed=i).rollout(x0, inputs)]
                     for i in range(1000)])
    drift = np.zeros(4)
    power = np.eye(4)
    for k in range(len(inputs)):
        drift = drift + power @ TABLE_NOISE.mean
        power = model.a @ power
        se = runs[:, k].std(axis=0, ddof=1) / np.sqrt(len(runs))
        assert (np.abs(runs[:, k].mean(axis=0) - (clean[k] + drift)) <= 3 * se).all(), k
    assert runs.min() > 0
