import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handxfer.contact import (ContactConfig, ContactMap, FingertipTrace, build_contact_map,
                              contact_probability, dual_threshold, extract_contacts, fit_spline,
                              impute_states, interpolate_contact, single_frame_flips,
                              velocity_displacement)
from handxfer.fixtures import curl_for_depth, curl_pose
from handxfer.hand_model import FINGERS

MM = 1e-3


def trace_from(pos, dt=1 / 30):
    """FingertipTrace with the same 1-D motion on every finger (distances unused here)."""
    pos = np.asarray(pos, dtype=float)
    P = np.zeros((len(pos), 5, 3))
    P[:, :, 0] = pos[:, None]
    return FingertipTrace(np.arange(len(pos)) * dt, P, np.zeros((len(pos), 5)))


def column(states, f=0):
    return states[:, f].astype(int).tolist()


def test_dual_threshold_example():
    cfg = ContactConfig()
    assert column(dual_threshold(np.array([1, 3, 6]) * MM, cfg)) == [1, 1, 0]
    assert not dual_threshold(np.full(6, 9 * MM), cfg).any()
    assert dual_threshold(np.full(6, 1 * MM), cfg).all()
    # the first frame in the dead band starts out of contact
    assert column(dual_threshold(np.array([3, 3, 1, 3]) * MM, cfg)) == [0, 0, 1, 1]


def test_dual_threshold_empty():
    with pytest.raises(ValueError):
        dual_threshold(np.zeros((0, 5)), ContactConfig())


def test_velocity_displacement():
    assert velocity_displacement(0.8, 0.8, 1 / 30) == pytest.approx(0.026667, abs=1e-6)
    assert velocity_displacement(0.0, 0.0, 1 / 30) == 0.0
    assert velocity_displacement(0.4, 1.2, 0.1) == pytest.approx(0.08)
    with pytest.raises(ValueError):
        velocity_displacement(1, 1, 0)


def test_interpolation_rule():
    cfg = ContactConfig()
    # alpha * v_f / f_c = 0.6 * 0.8 / 30 = 0.016
    assert interpolate_contact(1, 1, cfg) is True
    assert interpolate_contact(0, 0, cfg) is False
    assert interpolate_contact(1, 0, cfg) is False
    assert interpolate_contact(0, 1, cfg) is False
    # a displacement large enough to push (1, 0) over tau_c
    assert interpolate_contact(1, 0, cfg, displacement=0.4) is True


def test_spline_exact_cubic():
    t = np.linspace(0, 4 / 30, 5)
    c = np.array([0.3, -1.0, 2.0, 5.0])
    x = c[0] + c[1] * t + c[2] * t ** 2 + c[3] * t ** 3
    fit = fit_spline(x, t)
    assert fit.residual < 1e-10
    np.testing.assert_allclose(fit.coeffs[:, 0], c, atol=1e-8)
    assert fit(t[2], 2) == pytest.approx(2 * c[2] + 6 * c[3] * t[2])


def test_spline_constant():
    fit = fit_spline(np.full((5, 3), 0.7), np.arange(5) / 30)
    np.testing.assert_allclose(fit.coeffs[1:], 0, atol=1e-12)


def test_spline_sine_acceleration():
    w = 2 * np.pi
    t = 0.3 + (np.arange(5) - 2) / 30
    fit = fit_spline(np.sin(w * t), t)
    exact = -w ** 2 * np.sin(w * 0.3)
    assert abs(fit(0.3, 2) - exact) < 0.05 * abs(exact)


def test_spline_duplicate_timestamps():
    with pytest.raises(ValueError):
        fit_spline(np.zeros(3), [0, 0, 1])


def test_contact_probability():
    assert contact_probability([1, 2, 3], [1, 2, 3], 5.0) == 0.5
    assert contact_probability([100, 0, 0], [0, 0, 0], 5.0) < 1e-100
    assert contact_probability([0, 1, 0], [0, 0, 0], 2.0) == pytest.approx(0.11920, abs=1e-5)
    # literal sign: sigma(beta1 * sum(diff))
    assert contact_probability([1, 1, 0], [0, 0, 0], 1.0, strict_literal=True) == pytest.approx(
        1 / (1 + np.exp(-2)))


def test_stationary_flicker_kept():
    raw = np.array([[1] * 5, [0] * 5, [1] * 5], dtype=bool)
    out = impute_states(raw, trace_from(np.zeros(3)), None, ContactConfig())
    assert np.array_equal(out, raw)


def test_smooth_approach_flicker_removed():
    # slowly decelerating approach: |acc| = 0.5 m/s^2 opens the gate when beta1 < 0
    t = np.arange(3) / 30
    raw = np.array([[1] * 5, [0] * 5, [1] * 5], dtype=bool)
    cfg = ContactConfig(beta1=-5.0)
    imp = impute_states(raw, trace_from(0.1 * t - 0.25 * t ** 2), None, cfg, detailed=True)
    assert imp.gate[1].all()
    assert imp.states[1].all()
    assert imp.changed.sum() == 5


def test_fast_motion_preserves_raw():
    t = np.arange(3) / 30
    raw = np.array([[1] * 5, [0] * 5, [1] * 5], dtype=bool)
    cfg = ContactConfig(beta1=-5.0)
    out = impute_states(raw, trace_from(3.0 * t - 0.25 * t ** 2), None, cfg)
    assert np.array_equal(out, raw)


def test_moving_object_acceleration_is_subtracted():
    # hand and object share the same accelerating motion, so P_c = 0.5 and the gate stays closed
    t = np.arange(5) / 30
    x = 0.1 * t - 2.0 * t ** 2
    raw = np.array([[1] * 5, [1] * 5, [0] * 5, [1] * 5, [1] * 5], dtype=bool)
    obj = np.stack([x, 0 * x, 0 * x], axis=1)
    cfg = ContactConfig(beta1=-5.0)
    imp = impute_states(raw, trace_from(x), obj, cfg, detailed=True)
    np.testing.assert_allclose(imp.probability[1:-1], 0.5, atol=1e-9)
    assert np.array_equal(imp.states, raw)
    assert impute_states(raw, trace_from(x), None, cfg)[2].all()


def test_all_scope_erodes_run_ends():
    t = np.arange(8) / 30
    raw = np.zeros((8, 5), dtype=bool)
    raw[2:6] = True
    tr = trace_from(0.1 * t - 0.25 * t ** 2)
    iso = impute_states(raw, tr, None, ContactConfig(beta1=-5.0))
    lit = impute_states(raw, tr, None, ContactConfig(beta1=-5.0, impute_scope="all"))
    assert np.array_equal(iso, raw)
    assert lit[2:6, 0].tolist() == [False, True, True, False]


def test_config_validation():
    with pytest.raises(ValueError):
        ContactConfig(dis_min=0.006)
    with pytest.raises(ValueError):
        ContactConfig(tau_c=1.0)
    with pytest.raises(ValueError):
        ContactConfig(impute_scope="some")
    with pytest.raises(ValueError):
        ContactConfig(passes=0)
    assert ContactConfig().delta == ContactConfig().dis_max


def test_single_frame_flips():
    s = np.array([1, 0, 1, 1, 0, 0, 1, 0], dtype=bool)[:, None]
    assert single_frame_flips(s) == 2  # frames 1 and 6
    assert single_frame_flips(s[:2]) == 0


def test_contact_map_empty(chain, grasp):
    m = build_contact_map(chain, np.zeros(chain.n_dof), grasp, np.zeros(5, bool), ContactConfig())
    assert m.is_empty()


def test_contact_map_thumb_only(chain, grasp):
    s = curl_for_depth(chain, "thumb", 0.001, grasp)
    q = curl_pose(chain, {"thumb": s})
    state = np.array([1, 0, 0, 0, 0], dtype=bool)
    cfg = ContactConfig()
    m = build_contact_map(chain, q, grasp, state, cfg)
    assert len(m["thumb"]) >= 1
    assert all(len(m[f]) == 0 for f in FINGERS[1:])
    n_hand = len(chain.sample_local)
    for h, v, d in m["thumb"]:
        assert 0 <= d <= cfg.delta and 0 <= h < n_hand and 0 <= v < len(grasp.vertices)
    assert ContactMap.from_json(m.to_json()).pairs == m.pairs


def test_extract_contacts_far_object_is_all_false(chain, grasp):
    Q = np.zeros((6, chain.n_dof))
    Q[:, 2] = 1.0
    tl = extract_contacts(chain, Q, grasp, np.arange(6) / 30)
    assert not tl.states.any() and all(m.is_empty() for m in tl.maps)
    assert np.isinf(tl.trace.distances[:, 3:]).all()


traces = st.lists(st.sampled_from([1.0, 3.0, 6.0]), min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(traces, st.data())
def test_hysteresis_decreasing_never_releases(d, data):
    """Lowering distances (while staying below dis_max) never turns contact off."""
    cfg = ContactConfig()
    d = np.array(d) * MM
    lower = np.array([data.draw(st.floats(0.0, 1.0)) for _ in d]) * d
    a = dual_threshold(d, cfg)[:, 0]
    b = dual_threshold(lower, cfg)[:, 0]
    below = d < cfg.dis_max
    assert not np.any(a & ~b & below)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_imputation_respects_gate(seed):
    rng = np.random.default_rng(seed)
    T = 30
    raw = rng.random((T, 5)) < 0.5
    t = np.arange(T) / 30
    P = np.cumsum(rng.normal(0, 0.02, (T, 5, 3)), axis=0)
    tr = FingertipTrace(t, P, np.zeros((T, 5)))
    cfg = ContactConfig(beta1=float(rng.choice([-5.0, 5.0])),
                        impute_scope=str(rng.choice(["isolated", "all"])))
    imp = impute_states(raw, tr, None, cfg, detailed=True)
    assert not np.any(imp.changed & ~imp.gate)
    assert np.array_equal(imp.states[[0, -1]], raw[[0, -1]])


@settings(max_examples=30, deadline=None)
@given(st.booleans(), st.integers(3, 20))
def test_constant_sequence_is_fixed_point(value, T):
    raw = np.full((T, 5), value)
    t = np.arange(T) / 30
    tr = trace_from(0.05 * t - 0.3 * t ** 2)
    for scope in ("isolated", "all"):
        out = impute_states(raw, tr, None, ContactConfig(beta1=-5.0, impute_scope=scope))
        assert np.array_equal(out, raw)
