import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rcac_autopilot.autopilot import (
    AutopilotLimits, GainSet, LoopErrors, PidState, StockAutopilot, attitude_controller,
    attitude_error_vector, azimuth_error, clamp_thrust, clamp_velocity, detune, f2q,
    format_gain_file, parse_gain_file, position_controller, rate_controller,
    reduced_attitude_error, velocity_controller, velocity_pid,
)
from rcac_autopilot.dynamics import RigidBodyState, VehicleParams
from rcac_autopilot.mathcore import (
    E3, IDENTITY_QUAT, EulerAngles321, euler_to_quat, quat_mul, quat_to_euler, quat_to_rotmat,
)

from oracles import pid_transcription

P = VehicleParams()
finite = st.floats(-10, 10, allow_nan=False)
angles = st.floats(-math.pi, math.pi, allow_nan=False)


def yaw_quat(a):
    return np.array([math.cos(a / 2), 0.0, 0.0, math.sin(a / 2)])


# gains

def test_detune_identity():
    g = GainSet()
    np.testing.assert_array_equal(detune(g, 1.0).as_vector(), g.as_vector())


def test_detune_scales_every_gain():
    g, d = GainSet(), detune(GainSet(), 0.3)
    assert len(g.as_vector()) == 27
    np.testing.assert_array_equal(d.as_vector(), 0.3 * g.as_vector())
    assert d.tau == g.tau


@given(st.floats(0.05, 3), st.floats(0.05, 3))
def test_detune_multiplicative(a, b):
    g = GainSet()
    np.testing.assert_allclose(detune(detune(g, a), b).as_vector(), detune(g, a * b).as_vector(), rtol=1e-15)


@pytest.mark.parametrize("alpha", [0.0, -1.0, float("nan")])
def test_detune_rejects_nonpositive(alpha):
    with pytest.raises(ValueError):
        detune(GainSet(), alpha)


def test_gain_file_round_trip(tmp_path):
    g = detune(GainSet(), 0.7)
    g.tau = 0.25
    p = tmp_path / "gains.txt"
    p.write_text(format_gain_file(g))
    back = parse_gain_file(p)
    np.testing.assert_array_equal(back.as_vector(), g.as_vector())
    assert back.tau == 0.25


def test_gain_file_partial_and_comments(tmp_path):
    p = tmp_path / "g.txt"
    p.write_text("# tuned\nK_vP_x = 2.5  # north\n\nK_q_z=1.0\n")
    g = parse_gain_file(p)
    assert g.K_vP[0] == 2.5 and g.K_vP[1] == 1.8 and g.K_q[2] == 1.0


@pytest.mark.parametrize("text,line", [("K_vP_x = 1\nK_foo_x = 2\n", 2), ("K_r_w = 1\n", 1),
                                       ("K_r_x 1\n", 1), ("\n\nK_r_x = abc\n", 3)])
def test_gain_file_errors_report_line(tmp_path, text, line):
    p = tmp_path / "g.txt"
    p.write_text(text)
    with pytest.raises(ValueError, match=f":{line}:"):
        parse_gain_file(p)


# PID blocks

def test_velocity_pid_matches_transcription(rng):
    g = GainSet()
    zs = rng.normal(size=(40, 3))
    st_ = PidState()
    out = np.array([velocity_pid(z, st_, g) for z in zs])
    for ax in range(3):
        ref = pid_transcription(zs[:, ax], g.K_vP[ax], g.K_vI[ax], g.K_vD[ax])
        np.testing.assert_allclose(out[:, ax], ref, atol=1e-12)


def test_rate_controller_matches_transcription_plus_ff(rng):
    g = GainSet(K_wff=np.array([0.01, 0.02, 0.03]))
    sps, meas = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    errs = LoopErrors()
    out = np.array([rate_controller(s, m, errs, g, 0.004) for s, m in zip(sps, meas)])
    zs = sps - meas
    for ax in range(3):
        ref = np.array(pid_transcription(zs[:, ax], g.K_wP[ax], g.K_wI[ax], g.K_wD[ax])) + g.K_wff[ax] * sps[:, ax]
        np.testing.assert_allclose(out[:, ax], ref, atol=1e-12)


def test_detuned_pid_scales_output(rng):
    zs = rng.normal(size=(25, 3))
    a, b = PidState(), PidState()
    for z in zs:
        np.testing.assert_allclose(velocity_pid(z, a, detune(GainSet(), 0.3)), 0.3 * velocity_pid(z, b, GainSet()), atol=1e-14)


def test_integrator_clamp():
    st_ = PidState()
    lim = AutopilotLimits(gamma_v_max=0.5)
    for _ in range(10):
        velocity_pid(np.ones(3), st_, GainSet(), lim)
    np.testing.assert_array_equal(st_.gamma, 0.5)


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_pid_superposition(z1, z2):
    g = GainSet()
    z1, z2 = np.array(z1), np.array(z2)
    s1, s2, s12 = PidState(), PidState(), PidState()
    for _ in range(3):
        np.testing.assert_allclose(velocity_pid(z1 + z2, s12, g), velocity_pid(z1, s1, g) + velocity_pid(z2, s2, g), atol=1e-9)


# position / velocity

def test_position_controller_p_plus_ff():
    g = GainSet()
    v = position_controller([1.0, 2.0, -5.0], [0.0, 0.0, -5.0], [0.5, 0.0, 0.0], g)
    np.testing.assert_allclose(v, [0.95 + 0.5, 1.9, 0.0])


def test_clamp_velocity():
    v = clamp_velocity([30.0, 40.0, -9.0], AutopilotLimits())
    np.testing.assert_allclose(v, [3.0, 4.0, -2.0])


def test_velocity_controller_hover_offset():
    f = velocity_controller(np.zeros(3), np.zeros(3), LoopErrors(), GainSet(), 0.02, P.m, P.g, P.thrust_max)
    np.testing.assert_allclose(f, -P.m * P.g * E3)


def test_clamp_thrust_tilt_cone():
    lim = AutopilotLimits()
    f = clamp_thrust([100.0, 0.0, -19.62], P.thrust_max, lim)
    tilt = math.atan2(math.hypot(f[0], f[1]), -f[2])
    assert tilt == pytest.approx(lim.tilt_max)
    assert np.linalg.norm(f) <= lim.thrust_max_frac * P.thrust_max + 1e-12


def test_clamp_thrust_keeps_upward_minimum():
    f = clamp_thrust([0.0, 0.0, 50.0], P.thrust_max, AutopilotLimits())
    assert f[2] == pytest.approx(-0.1 * P.thrust_max)


# f2q

def test_f2q_hover_is_yaw_only():
    q, ok = f2q(-P.m * P.g * E3, 0.7)
    assert ok
    np.testing.assert_allclose(q, yaw_quat(0.7), atol=1e-15)


def test_f2q_alignment_and_azimuth(rng):
    for _ in range(1000):
        f = rng.normal(size=3) * [10, 10, 5]
        f[2] = -abs(f[2]) - 1.0
        psi = rng.uniform(-math.pi, math.pi)
        q, ok = f2q(f, psi)
        assert ok
        k_body = quat_to_rotmat(q)[2]
        np.testing.assert_allclose(-k_body, f / np.linalg.norm(f), atol=1e-9)
        d = quat_to_euler(q).psi - psi
        assert abs(math.remainder(d, 2 * math.pi)) < 1e-9


def test_f2q_small_force_flagged():
    q, ok = f2q([0.0, 0.0, -1e-5], 0.3)
    assert not ok
    np.testing.assert_allclose(q, yaw_quat(0.3), atol=1e-15)


# reduced attitude

def test_reduced_error_zero_when_aligned():
    q = euler_to_quat(EulerAngles321(0.3, 0.2, -0.1))
    q_red, z = reduced_attitude_error(q, q)
    np.testing.assert_allclose(q_red, IDENTITY_QUAT, atol=1e-8)
    np.testing.assert_allclose(z, 0.0, atol=1e-8)


def test_reduced_error_pure_pitch():
    th = 0.4
    _, z = reduced_attitude_error(IDENTITY_QUAT, euler_to_quat(EulerAngles321(0, th, 0)))
    np.testing.assert_allclose(z, [0.0, math.sin(th / 2), 0.0], atol=1e-12)


def test_reduced_error_ignores_yaw_offset():
    _, z = reduced_attitude_error(IDENTITY_QUAT, yaw_quat(1.0))
    np.testing.assert_allclose(z, 0.0, atol=1e-12)


def test_reduced_error_antiparallel_axis():
    q_red, z = reduced_attitude_error(IDENTITY_QUAT, euler_to_quat(EulerAngles321(0, 0, math.pi)))
    assert abs(q_red[0]) < 1e-8
    assert abs(np.linalg.norm(z) - 1.0) < 1e-8


@given(angles, st.floats(-1.2, 1.2), angles, st.floats(-1.2, 1.2), angles, angles, angles)
def test_reduced_angle_invariant_to_yaw_prerotation(p1, t1, p2, t2, psi, a, b):
    qm = euler_to_quat(EulerAngles321(psi, t1, p1))
    qs = euler_to_quat(EulerAngles321(psi + 0.5, t2, p2))
    r1, _ = reduced_attitude_error(qm, qs)
    r2, _ = reduced_attitude_error(quat_mul(qm, yaw_quat(a)), quat_mul(qs, yaw_quat(b)))
    assert abs(abs(r1[0]) - abs(r2[0])) < 1e-9


@given(angles, st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-2.5, 2.5))
def test_reduced_then_azimuth_recovers_setpoint(psi, th, ph, dpsi):
    qm = euler_to_quat(EulerAngles321(psi, 0.2, -0.1))
    qs = euler_to_quat(EulerAngles321(psi + dpsi, th, ph))
    q_red, _ = reduced_attitude_error(qm, qs)
    # the residual rotation after q_red is about the body k axis only
    from rcac_autopilot.mathcore import quat_conj, quat_error
    q_yaw = quat_mul(quat_conj(q_red), quat_error(qm, qs))
    assert abs(q_yaw[1]) < 1e-9 and abs(q_yaw[2]) < 1e-9
    assert azimuth_error(qm, qs, q_red) == pytest.approx(math.copysign(1, q_yaw[0]) * q_yaw[3])


def test_azimuth_error_pure_yaw():
    z = attitude_error_vector(IDENTITY_QUAT, yaw_quat(0.5))
    np.testing.assert_allclose(z, [0, 0, math.sin(0.25)], atol=1e-12)


# attitude controller

def test_attitude_controller_yaw_rate_feedthrough():
    g = GainSet()
    w = attitude_controller(IDENTITY_QUAT, IDENTITY_QUAT, 0.8, g)
    np.testing.assert_allclose(w, [0.0, 0.0, 0.8], atol=1e-15)
    q = euler_to_quat(EulerAngles321(0.0, 0.3, 0.0))
    w = attitude_controller(q, q, 1.0, g)
    # O_{Q/E} e3 resolves the Earth vertical in body axes
    np.testing.assert_allclose(w, [-math.sin(0.3), 0.0, math.cos(0.3)], atol=1e-9)


def test_attitude_controller_full_mode():
    g = GainSet(tau=0.5)
    qs = euler_to_quat(EulerAngles321(0.2, 0.1, 0.0))
    w = attitude_controller(IDENTITY_QUAT, qs, 0.0, g, mode="full")
    np.testing.assert_allclose(w, 4.0 * qs[1:], atol=1e-12)
    with pytest.raises(ValueError):
        attitude_controller(IDENTITY_QUAT, qs, 0.0, g, mode="bogus")


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_attitude_controller_linear_in_error(a, b):
    g = GainSet()
    a, b = np.array(a), np.array(b)
    w = lambda z: attitude_controller(IDENTITY_QUAT, IDENTITY_QUAT, 0.0, g, z_q=z)
    np.testing.assert_allclose(w(a + b), w(a) + w(b), atol=1e-12)


def test_rate_controller_moment_clamp():
    m = rate_controller([100.0, -100.0, 100.0], np.zeros(3), LoopErrors(), GainSet(), 0.004,
                        moment_max=P.moment_max)
    np.testing.assert_array_equal(m, [2.0, -2.0, 0.5])


def test_bad_dt_rejected():
    with pytest.raises(ValueError):
        rate_controller(np.zeros(3), np.zeros(3), LoopErrors(), GainSet(), 0.0)
    with pytest.raises(ValueError):
        velocity_controller(np.zeros(3), np.zeros(3), LoopErrors(), GainSet(), -1.0, 1, 9.81, 40)


# cascade

def _drive(ap, n=30):
    s = RigidBodyState(np.array([0.3, -0.2, -4.0]), np.array([0.1, 0.0, 0.2]),
                       euler_to_quat(EulerAngles321(0.1, 0.05, -0.02)), np.array([0.1, -0.2, 0.05]))
    out = []
    for k in range(n):
        if k % 5 == 0:
            ap.outer_step(s, [1.0, 0.0, -5.0], np.zeros(3), 0.2, 0.02)
        ap.inner_step(s, 0.0, 0.004)
        out.append(np.concatenate([ap.sp.f_sp, ap.sp.q_sp, ap.sp.omega_sp, ap.sp.moment_sp, [ap.thrust_cmd]]))
    return np.array(out)


def test_cascade_is_deterministic():
    a = _drive(StockAutopilot(GainSet(), P))
    b = _drive(StockAutopilot(GainSet(), P))
    np.testing.assert_array_equal(a, b)


def test_cascade_hover_at_setpoint_is_quiet():
    ap = StockAutopilot(GainSet(), P)
    s = RigidBodyState.at_rest((0, 0, -5))
    ap.outer_step(s, [0, 0, -5], np.zeros(3), 0.0, 0.02)
    ap.inner_step(s, 0.0, 0.004)
    assert ap.thrust_cmd == pytest.approx(P.m * P.g)
    np.testing.assert_allclose(ap.sp.moment_sp, 0.0, atol=1e-15)
    assert ap.f2q_ok
