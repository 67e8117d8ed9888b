import numpy as np
from pydantic import ValidationError
import pytest

from estimate import (
    CHANNELS,
    DiscreteModel,
    KalmanFilter,
    KalmanState,
    SensorModel,
    SingularInnovation,
    kalman_step,
    sense,
)
from lqr import LinearPlant, discretize


X = np.array([0.01, -0.02, -0.3, 0.1, -0.2, 0.3])
QUIET = SensorModel(std_com=0.0, std_com_rate=0.0, std_angle=0.0, std_rate=0.0)


def _oscillators() -> LinearPlant:
    """Three independent damped oscillators laid out like the body state."""
    A = np.block([[np.zeros((3, 3)), np.eye(3)], [-np.eye(3), -0.5 * np.eye(3)]])
    return LinearPlant(A=A, B=np.zeros((6, 1)), Q=np.eye(6), R=[[1.0]], label="osc")


@pytest.mark.parametrize(
    ("value", "expected"),
    [(None, None), ("none", None), ("dbeta", 5), ("theta", 0), ("3", 3), (4, 4)],
)
def test_dropped_channel_parsing(value, expected):
    assert SensorModel(dropped_channel=value).dropped_channel == expected


@pytest.mark.parametrize("value", ["knee", 6, -1, "7"])
def test_dropped_channel_rejected(value):
    with pytest.raises(ValidationError):
        SensorModel(dropped_channel=value)


def test_negative_noise_rejected():
    with pytest.raises(ValidationError):
        SensorModel(std_angle=-0.1)


def test_observed_channels():
    assert SensorModel().observed == tuple(range(len(CHANNELS)))
    assert SensorModel(dropped_channel="dalpha").observed == (0, 1, 2, 3, 5)
    assert QUIET.noiseless
    assert not SensorModel().noiseless


def test_noiseless_sense_is_exact():
    m = sense(QUIET, X, 0.05, -0.1, np.random.default_rng(3))
    assert m.com_x == 0.05
    assert m.com_dx == -0.1
    np.testing.assert_array_equal(m.z, X)


def test_sense_drops_channel():
    sensor = SensorModel(std_com=0.0, std_com_rate=0.0, std_angle=0.0, std_rate=0.0, dropped_channel=2)
    m = sense(sensor, X, 0.0, 0.0, np.random.default_rng(0))
    assert len(m.z) == 5
    np.testing.assert_array_equal(m.full(np.zeros(6)), [0.01, -0.02, 0.0, 0.1, -0.2, 0.3])


def test_sense_is_seed_deterministic():
    first = sense(SensorModel(), X, 0.0, 0.0, np.random.default_rng(7))
    second = sense(SensorModel(), X, 0.0, 0.0, np.random.default_rng(7))
    assert first.com_x == second.com_x
    np.testing.assert_array_equal(first.z, second.z)


def test_noise_sequence_independent_of_dropped_channel():
    full = sense(SensorModel(), X, 0.0, 0.0, np.random.default_rng(1))
    dropped = sense(SensorModel(dropped_channel=0), X, 0.0, 0.0, np.random.default_rng(1))
    np.testing.assert_array_equal(full.z[1:], dropped.z)
    assert full.com_x == dropped.com_x


def test_sample_standard_deviations():
    rng = np.random.default_rng(0)
    sensor = SensorModel()
    readings = [sense(sensor, X, 0.0, 0.0, rng) for _ in range(5000)]
    assert np.std([m.com_x for m in readings]) == pytest.approx(0.01, rel=0.05)
    assert np.std([m.com_dx for m in readings]) == pytest.approx(0.005, rel=0.05)
    z = np.array([m.z for m in readings])
    np.testing.assert_allclose(np.std(z, axis=0), [0.01] * 3 + [0.005] * 3, rtol=0.05)


def test_discretize_matches_closed_form():
    plant = LinearPlant(A=[[0, 1], [0, 0]], B=[[0], [1]], Q=np.eye(2), R=[[1]], label="di")
    Ad, Bd = discretize(plant, 0.1)
    np.testing.assert_allclose(Ad, [[1.0, 0.1], [0.0, 1.0]], atol=1e-14)
    np.testing.assert_allclose(Bd, [[0.005], [0.1]], atol=1e-14)


def test_kalman_skips_update_without_uncertainty():
    model = DiscreteModel(np.eye(2), np.zeros((2, 1)), np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)))
    ks = KalmanState(np.array([1.0, 2.0]), np.zeros((2, 2)))
    out = kalman_step(model, ks, np.zeros(1), np.array([5.0, 5.0]))
    np.testing.assert_array_equal(out.x_hat, [1.0, 2.0])


def test_kalman_singular_innovation():
    model = DiscreteModel(np.eye(2), np.zeros((2, 1)), np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)))
    ks = KalmanState(np.zeros(2), np.diag([1.0, 0.0]))
    with pytest.raises(SingularInnovation):
        kalman_step(model, ks, np.zeros(1), np.zeros(2))


def _track(sensor: SensorModel, steps: int, dt: float = 0.02) -> tuple[list[np.ndarray], list[np.ndarray], KalmanFilter]:
    plant = _oscillators()
    kf = KalmanFilter(plant, sensor, dt)
    x = np.array([0.1, 0.2, 0.3, 0.0, 0.5, 0.0])
    truth, estimates = [], []
    for _ in range(steps):
        z = x[list(sensor.observed)]
        estimates.append(kf.update(z, np.zeros(1)))
        truth.append(x)
        x = kf.model.Ad @ x
    return truth, estimates, kf


def test_kalman_recovers_dropped_rate():
    sensor = SensorModel(std_angle=1e-3, std_rate=1e-3, dropped_channel="dalpha")
    truth, estimates, _ = _track(sensor, 200)
    assert estimates[0][4] == 0.0
    assert abs(estimates[-1][4] - truth[-1][4]) < 0.02
    np.testing.assert_allclose(estimates[-1][[0, 1, 2]], truth[-1][[0, 1, 2]], atol=5e-3)


def test_kalman_covariance_settles():
    sensor = SensorModel(std_angle=1e-3, std_rate=1e-3, dropped_channel="dalpha")
    _, _, kf = _track(sensor, 300)
    before = kf.state.P_cov.copy()
    kf.update(np.zeros(5), np.zeros(1))
    np.testing.assert_allclose(kf.state.P_cov, before, rtol=1e-4, atol=1e-12)
    assert kf.state.P_cov[4, 4] < 1e-2
