from fractions import Fraction

from hypothesis import given, settings
from hypothesis import strategies as st
import numpy as np
import pytest

from dynamics import static_torques
from lqr import sampled_spectral_radius, solve_care
from model import BodyParams, equilibrium_posture
from muscle import (
    Activation,
    MuscleParams,
    compensate,
    linearize,
    muscle_controller_step,
    muscle_plant,
    muscle_torques,
)


P = BodyParams()
EQ = equilibrium_posture(P)
MP = MuscleParams()
PLANT = muscle_plant(P, MP, EQ)

activations = st.floats(min_value=-2.0, max_value=2.0)
coefficients = st.floats(min_value=0.1, max_value=10.0)
weights = st.floats(min_value=0.1, max_value=1000.0)


def _reference(u1, u2, q1, q2, b, preserve):
    """The compensation cases written out in exact rational arithmetic."""
    u1, u2, q1, q2 = map(Fraction, (u1, u2, q1, q2))
    b1, b2, b3, b4 = map(Fraction, b)
    sign = 1 if preserve else -1
    w1, w2 = q1 / (q1 + q2), q2 / (q1 + q2)
    if u1 >= 0 and u2 >= 0:
        out = (u1, u2)
    elif u1 < 0 and u2 >= 0:
        out = (Fraction(0), u2 + sign * (w1 * b1 / b2 * u1 + w2 * b3 / b4 * u1))
    elif u2 < 0 and u1 >= 0:
        out = (u1 + sign * (w1 * b2 / b1 * u2 + w2 * b4 / b3 * u2), Fraction(0))
    else:
        out = (
            sign * (w1 * b2 / b1 * u2 + w2 * b4 / b3 * u2),
            sign * (w1 * b1 / b2 * u1 + w2 * b3 / b4 * u1),
        )
    return [float(min(max(v, Fraction(0)), Fraction(1))) for v in out]


def test_torque_map():
    np.testing.assert_allclose(MP.torque_map(), [[0.0, 0.0, 32.0, -32.0], [40.0, -40.0, 0.0, 0.0]])


def test_linearize_kinematic_rows():
    A, B_tau = linearize(P, EQ)
    np.testing.assert_allclose(A[:3, 3:], np.eye(3), atol=1e-6)
    np.testing.assert_allclose(A[:3, :3], 0.0, atol=1e-6)
    np.testing.assert_allclose(B_tau[:3], 0.0, atol=1e-6)


def test_muscle_plant_is_open_loop_unstable():
    assert np.max(np.linalg.eigvals(PLANT.A).real) > 0


def test_antagonists_have_opposite_columns():
    B = PLANT.B
    np.testing.assert_allclose(B[:, 1], -B[:, 0])
    np.testing.assert_allclose(B[:, 3], -B[:, 2])


def test_muscle_plant_weights():
    np.testing.assert_array_equal(np.diag(PLANT.Q), [100.0] * 3 + [10.0] * 3)
    np.testing.assert_array_equal(PLANT.R, 1000.0 * np.eye(4))
    assert PLANT.label == "MuscleFull"


def test_muscle_gain_stabilizes():
    gain = solve_care(PLANT)
    assert np.all(gain.closed_loop_eigenvalues.real < 0)


def test_muscle_gain_stable_at_control_period():
    gain = solve_care(PLANT)
    assert np.max(np.abs(gain.closed_loop_eigenvalues)) * 0.02 < 0.5
    assert sampled_spectral_radius(PLANT, gain, 0.02) < 1.0


def test_light_input_weight_is_unstable_at_control_period():
    plant = muscle_plant(P, MuscleParams(r=1.0), EQ)
    assert sampled_spectral_radius(plant, solve_care(plant), 0.02) > 1.0


def test_compensate_passes_non_negative_through():
    np.testing.assert_array_equal(compensate(np.array([0.2, 0.3]), (1.0, 1.0), (1, -1, 2, -2)), [0.2, 0.3])


def test_compensate_clips_above_one():
    np.testing.assert_array_equal(compensate(np.array([1.5, 0.3]), (1.0, 1.0), (1, -1, 2, -2)), [1.0, 0.3])


@pytest.mark.parametrize(
    ("preserve", "expected"),
    [(False, [0.0, 0.1]), (True, [0.0, 0.5])],
)
def test_compensate_first_negative(preserve, expected):
    out = compensate(np.array([-0.2, 0.3]), (100.0, 10.0), (1, -1, 2, -2), preserve)
    np.testing.assert_allclose(out, expected)


@pytest.mark.parametrize(
    ("preserve", "expected"),
    [(False, [0.0, 0.0]), (True, [0.2, 0.1])],
)
def test_compensate_both_negative(preserve, expected):
    out = compensate(np.array([-0.1, -0.2]), (100.0, 10.0), (1, -1, 2, -2), preserve)
    np.testing.assert_allclose(out, expected)


@settings(max_examples=200, deadline=None)
@given(
    activations,
    activations,
    weights,
    weights,
    st.tuples(coefficients, coefficients, coefficients, coefficients),
    st.booleans(),
)
def test_compensate_matches_rational_reference(u1, u2, q1, q2, b, preserve):
    # Antagonists act with opposite signs on every row.
    signed = (b[0], -b[1], b[2], -b[3])
    out = compensate(np.array([u1, u2]), (q1, q2), signed, preserve)
    np.testing.assert_allclose(out, _reference(u1, u2, q1, q2, signed, preserve), atol=1e-12)
    assert np.all(out >= 0.0)
    assert np.all(out <= 1.0)


@pytest.mark.slow
def test_compensate_never_negative_on_random_cases():
    rng = np.random.default_rng(0)
    u = rng.uniform(-2.0, 2.0, size=(100_000, 2))
    q = rng.uniform(0.1, 1000.0, size=(100_000, 2))
    b = rng.uniform(0.1, 10.0, size=(100_000, 4)) * np.array([1.0, -1.0, 1.0, -1.0])
    preserve = rng.random(100_000) < 0.5
    for k in range(100_000):
        out = compensate(u[k], (q[k, 0], q[k, 1]), tuple(b[k]), bool(preserve[k]))
        assert out.min() >= 0.0
        assert out.max() <= 1.0


def test_controller_at_equilibrium_is_relaxed():
    gain = solve_care(PLANT)
    a = muscle_controller_step(gain, MP, PLANT, np.zeros(6))
    assert a == Activation(0.0, 0.0, 0.0, 0.0)
    hold = static_torques(P, EQ.state())
    torques = muscle_torques(P, MP, EQ, a)
    assert torques.tau1 == pytest.approx(hold.tau1)
    assert torques.tau2 == pytest.approx(hold.tau2)


def test_controller_activations_bounded():
    gain = solve_care(PLANT)
    a = muscle_controller_step(gain, MP, PLANT, np.array([0.05, -0.1, 0.2, 0.5, -0.3, 1.0]))
    assert all(0.0 <= v <= 1.0 for v in a)


def test_muscle_torques_adds_to_hold():
    hold = static_torques(P, EQ.state())
    torques = muscle_torques(P, MP, EQ, Activation(1.0, 0.0, 0.0, 0.5))
    assert torques.tau2 == pytest.approx(hold.tau2 + 40.0)
    assert torques.tau1 == pytest.approx(hold.tau1 - 16.0)
