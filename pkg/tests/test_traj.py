import numpy as np
import pytest

from hierdex.geom import ObjectState, Rot, quat_angle
from hierdex.traj import (
    GoalTrajectory,
    GoalWindow,
    compose_relative_window,
    interpolate_keyposes,
    load_trajectory,
    perturb_goal_trajectory,
    relative_goal_window,
    resample_interp,
    resample_skip,
    sample_goal_window,
    save_trajectory,
)


def _line_traj(n=30, step=0.004, joint=None):
    states = [
        ObjectState(Rot.about_z(0.01 * i), np.array([step * i, 0.0, 0.0]), joint)
        for i in range(n)
    ]
    return GoalTrajectory(states)


def test_continuity_guard_rejects_jumps():
    a = ObjectState(Rot.identity(), np.zeros(3), None)
    b = ObjectState(Rot.identity(), np.array([0.2, 0.0, 0.0]), None)
    with pytest.raises(ValueError):
        GoalTrajectory([a, b])


def test_state_at_step_interpolates_and_clamps():
    g = _line_traj()
    g2 = resample_skip(g, 1)  # dt_units = 2
    mid = g2.state_at_step(1)  # halfway between kept states 0 and 1
    assert np.allclose(mid.pos, [0.004, 0.0, 0.0], atol=1e-12)
    assert np.allclose(g2.state_at_step(-5).pos, g2.states[0].pos)
    assert np.allclose(g2.state_at_step(10_000).pos, g2.states[-1].pos)


def test_interpolate_keyposes_hits_keys():
    a = ObjectState(Rot.identity(), np.zeros(3), 0.0)
    b = ObjectState(Rot.about_z(0.3), np.array([0.05, 0.0, 0.0]), 0.4)
    g = interpolate_keyposes([(a, 0), (b, 19)], 20)
    assert len(g) == 20
    assert np.allclose(g.states[0].pos, a.pos)
    assert np.allclose(g.states[19].pos, b.pos)
    assert np.isclose(g.states[19].joint, 0.4)
    # strictly increasing indices enforced
    with pytest.raises(ValueError):
        interpolate_keyposes([(a, 5), (b, 5)], 20)


def test_resample_skip_preserves_horizon():
    g = _line_traj(31)
    for k in (1, 2):
        s = resample_skip(g, k)
        assert s.dt_units == k + 1
        assert s.horizon == (len(s) - 1) * (k + 1)
        assert np.allclose(s.states[1].pos, g.states[k + 1].pos)


def test_resample_interp_doubles_density():
    g = _line_traj(11)
    d = resample_interp(g, 1)
    assert len(d) == 21
    assert np.allclose(d.states[1].pos, 0.5 * (g.states[0].pos + g.states[1].pos))


def test_sample_goal_window_sequential_and_clamped():
    g = _line_traj(15)
    w = sample_goal_window(g, 2)
    assert isinstance(w, GoalWindow)
    assert len(w.states) == 10
    assert np.allclose(w.states[0].pos, g.states[3].pos)
    # indices clamp at the last state
    tail = sample_goal_window(g, 13)
    assert np.allclose(tail.states[-1].pos, g.states[-1].pos)


def test_sample_goal_window_random_gaps_bounded():
    g = _line_traj(200)
    rng = np.random.default_rng(0)
    for _ in range(50):
        w = sample_goal_window(g, 0, rng=rng, random_gaps=True)
        assert all(1 <= gap <= 4 for gap in w.gaps)
    with pytest.raises(ValueError):
        sample_goal_window(g, 0, random_gaps=True)


def test_perturb_goal_trajectory_blends_offset():
    g = _line_traj(60)
    rng = np.random.default_rng(1)
    offset = np.array([0.01, -0.01, 0.005])
    p = perturb_goal_trajectory(g, rng, offset=offset)
    assert len(p) == len(g)
    # endpoints anchored, interior displaced toward the offset
    assert np.allclose(p.states[0].pos, g.states[0].pos, atol=1e-12)
    deltas = [
        np.linalg.norm(p.states[i].pos - g.states[i].pos) for i in range(len(g))
    ]
    assert max(deltas) <= np.linalg.norm(offset) + 1e-12
    assert max(deltas) > 0.0


def test_relative_window_roundtrip():
    g = _line_traj(30, joint=0.2)
    current = ObjectState(Rot.about_z(0.4), np.array([0.03, -0.02, 0.01]), 0.1)
    w = sample_goal_window(g, 4)
    feats = relative_goal_window(w, current)
    back = compose_relative_window(feats, current)
    for s, b in zip(w.states, back):
        assert np.allclose(b.pos, s.pos, atol=1e-9)
        assert quat_angle(b.rot, s.rot) < 1e-9
        assert np.isclose(b.joint, s.joint)


def test_trajectory_roundtrip(tmp_path):
    g = _line_traj(25, joint=0.3)
    path = str(tmp_path / "traj.json")
    save_trajectory(g, path)
    g2 = load_trajectory(path)
    assert len(g2) == len(g)
    assert g2.dt_units == g.dt_units
    for a, b in zip(g.states, g2.states):
        assert np.allclose(a.pos, b.pos)
        assert quat_angle(a.rot, b.rot) < 1e-12
