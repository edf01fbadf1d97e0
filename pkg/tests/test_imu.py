import numpy as np
import pytest

from se2lio.imu import (GRAVITY, ImuBias, ImuData, ImuNoiseParams, ImuSample, RobotState, correct_bias,
                        imu_jacobian, imu_residual, midpoint_step, preintegrate)
from se2lio.lie import so3_exp, so3_log
from se2lio.selftest import numeric_jacobian, random_bias, random_imu, random_state, rel_error

G = np.linalg.norm(GRAVITY)
NOISE = ImuNoiseParams()


def stream(n, dt, gyro, acc):
    t = np.arange(n) * dt
    return ImuData(t, np.tile(gyro, (n, 1)), np.tile(acc, (n, 1)))


def test_midpoint_stationary():
    R = so3_exp([0.1, -0.2, 0.3])
    s = RobotState(R, np.array([1.0, 2.0, 3.0]), np.zeros(3))
    a = R.T @ (-GRAVITY)
    out = midpoint_step(s, ImuSample(0.0, np.zeros(3), a), ImuSample(0.01, np.zeros(3), a), ImuBias())
    assert np.allclose(out.R, R, atol=1e-15)
    assert np.allclose(out.P, s.P, atol=1e-15) and np.allclose(out.V, 0.0, atol=1e-15)


def test_midpoint_constant_acceleration():
    a = np.array([1.0, 0.0, 0.0]) - GRAVITY
    out = midpoint_step(RobotState(), ImuSample(0.0, np.zeros(3), a), ImuSample(0.01, np.zeros(3), a), ImuBias())
    assert np.allclose(out.P, [5e-5, 0, 0], atol=1e-15)
    assert np.allclose(out.V, [0.01, 0, 0], atol=1e-15)


def test_midpoint_pure_yaw():
    w = np.array([0.0, 0.0, 1.0])
    out = midpoint_step(RobotState(), ImuSample(0.0, w, np.zeros(3)), ImuSample(0.01, w, np.zeros(3)), ImuBias())
    assert np.abs(out.R - so3_exp([0, 0, 0.01])).max() < 1e-12


def test_midpoint_rejects_bad_steps():
    s0 = ImuSample(0.0, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        midpoint_step(RobotState(), s0, ImuSample(0.0, np.zeros(3), np.zeros(3)), ImuBias())
    with pytest.raises(ValueError):
        midpoint_step(RobotState(), s0, ImuSample(0.5, np.zeros(3), np.zeros(3)), ImuBias())


def test_single_interval_matches_midpoint_step(rng):
    data = random_imu(rng, n=2)
    b = random_bias(rng)
    pre = preintegrate(data, b, NOISE)
    s = midpoint_step(RobotState(bias=b), *data.samples(), b)
    p = pre.predict(RobotState(bias=b))
    assert np.allclose(p.R, s.R, atol=1e-14)
    assert np.allclose(p.P, s.P, atol=1e-14) and np.allclose(p.V, s.V, atol=1e-14)


def test_stationary_preintegration():
    still = preintegrate(stream(101, 0.005, np.zeros(3), np.zeros(3)), ImuBias(), NOISE)
    assert np.abs(still.dphi).max() < 1e-10
    assert np.abs(still.dP).max() < 1e-10 and np.abs(still.dV).max() < 1e-10
    # a resting sensor reads -g; the predicted state does not move
    rest = preintegrate(stream(101, 0.005, np.zeros(3), -GRAVITY), ImuBias(), NOISE)
    s = RobotState()
    p = rest.predict(s)
    assert np.abs(p.P).max() < 1e-10 and np.abs(p.V).max() < 1e-10
    assert np.abs(so3_log(p.R)).max() < 1e-10


def test_preintegration_independent_of_world_frame(rng):
    data = random_imu(rng)
    pre = preintegrate(data, ImuBias(), NOISE)
    # integrating in a rotated world frame changes the states, not the deltas
    for _ in range(3):
        s = random_state(rng)
        s.bias = ImuBias()
        p = pre.predict(s)
        assert np.allclose(s.R.T @ p.R, pre.dR, atol=1e-12)


def test_covariance_trace_grows(rng):
    data = random_imu(rng, n=40)
    traces = [np.trace(preintegrate(ImuData(data.t[:n], data.gyro[:n], data.acc[:n]), ImuBias(), NOISE).cov)
              for n in range(2, 41)]
    assert np.all(np.diff(traces) >= 0)
    pre = preintegrate(data, ImuBias(), NOISE)
    assert np.allclose(pre.cov, pre.cov.T) and np.linalg.eigvalsh(pre.cov).min() > -1e-15


def test_correct_bias_examples():
    yaw = stream(21, 0.005, np.array([0.0, 0.0, 1.0]), -GRAVITY)
    pre = preintegrate(yaw, ImuBias(), NOISE)
    dR, dP, dV = correct_bias(pre, ImuBias())
    assert np.array_equal(dR, pre.dR) and np.array_equal(dP, pre.dP) and np.array_equal(dV, pre.dV)

    nb = ImuBias(np.zeros(3), np.array([0.0, 0.0, 1e-3]))
    dR, _, _ = correct_bias(pre, nb)
    again = preintegrate(yaw, nb, NOISE)
    assert np.abs(so3_log(dR) - again.dphi).max() < 1e-6

    nb = ImuBias(np.array([0.01, -0.02, 0.03]), np.zeros(3))
    dR, dP, dV = correct_bias(pre, nb)
    assert np.array_equal(dR, pre.dR)
    assert not np.allclose(dP, pre.dP) and not np.allclose(dV, pre.dV)


def test_residual_examples(rng):
    data = random_imu(rng)
    b = random_bias(rng)
    pre = preintegrate(data, b, NOISE)
    si = RobotState(np.eye(3), np.zeros(3), np.array([1.0, 0.0, 0.0]), b)
    sj = pre.predict(si)
    assert np.abs(imu_residual(si, sj, pre)).max() < 1e-9

    moved = sj.copy()
    moved.P = moved.P + [0.1, 0.0, 0.0]
    d = imu_residual(si, moved, pre) - imu_residual(si, sj, pre)
    assert np.allclose(d[3:6], [0.1, 0, 0], atol=1e-15) and np.abs(np.delete(d, [3, 4, 5])).max() == 0

    delta = np.array([1e-3, -2e-3, 5e-4])
    biased = sj.copy()
    biased.bias = ImuBias(sj.bias.ba + delta, sj.bias.bg)
    assert np.allclose(imu_residual(si, biased, pre)[9:12], delta, rtol=0, atol=1e-18)


def test_jacobian_matches_finite_differences(rng):
    worst = 0.0
    for _ in range(100):
        pre = preintegrate(random_imu(rng), random_bias(rng), NOISE)
        si, sj = random_state(rng), random_state(rng)
        J = imu_jacobian(si, sj, pre)
        num = numeric_jacobian(lambda e: imu_residual(si.boxplus(e[:15]), sj.boxplus(e[15:]), pre), 30)
        worst = max(worst, rel_error(J, num))
    assert worst < 1e-4


def test_jacobian_structure(rng):
    data = random_imu(rng)
    b = random_bias(rng)
    pre = preintegrate(data, b, NOISE)
    si = random_state(rng)
    si.bias = b
    sj = pre.predict(si)
    J = imu_jacobian(si, sj, pre)
    I3 = np.eye(3)
    assert np.array_equal(J[9:12, 9:12], -I3) and np.array_equal(J[9:12, 24:27], I3)
    assert np.array_equal(J[12:15, 12:15], -I3) and np.array_equal(J[12:15, 27:30], I3)
    # consistent states: the residual rotation is zero and its inverse Jacobian the identity
    assert np.allclose(J[0:3, 15:18], I3, atol=1e-9)


def test_imu_data_validation():
    with pytest.raises(ValueError):
        ImuData([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ImuData([0.0, 1.0], [[0, 0, np.nan], [0, 0, 0]], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ImuNoiseParams(sigma_g=-1.0)


def test_window_interpolates_endpoints():
    d = ImuData(np.arange(5) * 0.01, np.arange(15.0).reshape(5, 3), np.zeros((5, 3)))
    w = d.window(0.005, 0.03)
    assert np.allclose(w.t, [0.005, 0.01, 0.02, 0.03])
    assert np.allclose(w.gyro[0], [1.5, 2.5, 3.5])
    assert np.isclose(d.rate(), 100.0)
    with pytest.raises(ValueError):
        d.window(-0.1, 0.02)


def test_boxplus_zero_is_identity(rng):
    s = random_state(rng)
    t = s.boxplus(np.zeros(15))
    assert np.array_equal(t.R, s.R) and np.array_equal(t.P, s.P) and np.array_equal(t.bias.bg, s.bias.bg)
