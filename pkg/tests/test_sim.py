import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lifelong_distill import sim
from lifelong_distill.metrics import ExpertAgent, rollout_success
from lifelong_distill.sim import (GRASP_RADIUS, MAX_STEP, SimState, SuiteKind, collect_demos,
                                  goal_reached, make_suite, observe, observe_flat, read_trajectories,
                                  reset, scripted_expert, step, write_trajectories)


def test_object_suite_example():
    s = make_suite("OBJECT", 10, 100)
    assert len(s) == 10
    targets = [t.target_spec.feature for t in s.tasks]
    assert len(set(targets)) == 10
    assert len({t.goal_center for t in s.tasks}) == 1


def test_spatial_pair_identical_features_disjoint_spawns():
    s = make_suite("spatial", 2, 5)
    a, b = (t.target_spec for t in s.tasks)
    assert a.feature == b.feature
    ax0, ay0, ax1, ay1 = a.spawn
    bx0, by0, bx1, by1 = b.spawn
    assert ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0
    for t in s.tasks:  # each scene holds an identical twin of its target
        assert len({o.feature for o in t.objects}) == 1 and len(t.objects) == 2


def test_goal_suite_distinct_goals():
    s = make_suite("goal", 5, 1)
    assert len({t.goal_center for t in s.tasks}) == 5
    assert len({t.objects for t in s.tasks}) == 1


@pytest.mark.parametrize("kind", list(SuiteKind))
def test_make_suite_deterministic(kind):
    assert make_suite(kind, 4, 9) == make_suite(kind, 4, 9)
    assert make_suite(kind, 4, 9) != make_suite(kind, 4, 10)


def test_make_suite_rejects():
    with pytest.raises(ValueError, match="unknown suite kind"):
        make_suite("kitchen", 3, 0)
    with pytest.raises(ValueError):
        make_suite("object", 0, 0)


def test_task_invariants():
    s = make_suite("object", 5, 100)
    for t in s.tasks:
        assert abs(np.linalg.norm(t.lang_vec) - 1.0) < 1e-12
        cx, cy = t.goal_center
        assert t.goal_radius <= cx <= 1 - t.goal_radius and t.goal_radius <= cy <= 1 - t.goal_radius
    with pytest.raises(ValueError, match="unit norm"):
        sim.TaskSpec(0, SuiteKind.OBJECT, (1.0, 1.0), s.tasks[0].objects, s.tasks[0].target, (0.5, 0.5))


def test_reset_deterministic_and_in_spawn_rects():
    task = make_suite("goal", 3, 2).tasks[0]
    assert np.array_equal(reset(task, 11).obj_pos, reset(task, 11).obj_pos)
    for seed in range(1000):
        s = reset(task, seed)
        assert s.t == 0 and s.held is None
        for o, p in zip(task.objects, s.obj_pos):
            x0, y0, x1, y1 = o.spawn
            assert x0 <= p[0] <= x1 and y0 <= p[1] <= y1


def test_zero_action_only_advances_time():
    task = make_suite("object", 3, 0).tasks[1]
    s0 = reset(task, 3)
    s1 = step(s0, [0.0, 0.0, 0.0])
    assert s1.t == 1
    assert np.array_equal(s1.obj_pos, s0.obj_pos) and np.array_equal(s1.arm, s0.arm)
    assert s1.held == s0.held and s1.gripper == s0.gripper


def test_grasp_and_release():
    task = make_suite("object", 3, 0).tasks[0]
    s = reset(task, 0)
    s.arm = s.obj_pos[task.target_index].copy()
    s = step(s, [0.0, 0.0, 1.0])
    assert s.held == task.target
    s = step(s, [1.0, 0.0, 1.0])
    assert np.array_equal(s.obj_pos[task.target_index], s.arm)
    s = step(s, [0.0, 0.0, -1.0])
    assert s.held is None


def test_grip_outside_radius_does_not_attach():
    task = make_suite("object", 1, 0).tasks[0]
    s = reset(task, 0)
    s.arm = s.obj_pos[0] + np.array([GRASP_RADIUS * 1.5, 0.0])
    assert step(s, [0.0, 0.0, 1.0]).held is None


def test_step_at_horizon_rejected():
    task = make_suite("object", 1, 0, horizon=2).tasks[0]
    s = step(step(reset(task, 0), [0, 0, 0]), [0, 0, 0])
    with pytest.raises(RuntimeError, match="horizon"):
        step(s, [0, 0, 0])


def test_displacement_never_exceeds_max_step():
    rng = np.random.default_rng(0)
    task = make_suite("object", 1, 0, horizon=10_000).tasks[0]
    s = reset(task, 0)
    for _ in range(2000):
        a = rng.uniform(-5, 5, 3)
        nxt = step(s, a)
        assert np.abs(nxt.arm - s.arm).max() <= MAX_STEP + 1e-15
        assert (0 <= nxt.arm).all() and (nxt.arm <= 1).all()
        s = nxt


def _state_with_target_at(task, pos, held):
    s = reset(task, 0)
    s.obj_pos[task.target_index] = pos
    s.held = task.target if held else None
    if held:
        s.arm = np.asarray(pos, dtype=float)
    return s


def test_goal_reached_rules():
    task = make_suite("object", 2, 0).tasks[0]
    g = np.asarray(task.goal_center)
    assert goal_reached(task, _state_with_target_at(task, g, held=False))
    assert not goal_reached(task, _state_with_target_at(task, g, held=True))
    outside = g + np.array([task.goal_radius + 1e-6, 0.0])
    assert not goal_reached(task, _state_with_target_at(task, outside, held=False))
    inside = g + np.array([task.goal_radius - 1e-6, 0.0])
    assert goal_reached(task, _state_with_target_at(task, inside, held=False))


def test_observe_deterministic_and_in_range():
    task = make_suite("spatial", 3, 4).tasks[2]
    s = reset(task, 8)
    a, b = observe_flat(s, task), observe_flat(s, task)
    assert a.tobytes() == b.tobytes()
    assert (np.abs(a) <= 1).all()
    o = observe(s, task)
    assert o.agentview.shape == (64,) and o.handeye.shape == (25,) and o.lang.shape == (16,)
    assert o.joint.shape == (4,) and o.gripper_obs.shape == (1,)
    assert np.array_equal(o.lang, task.lang_vec)


def _empty_state(arm):
    return SimState((), np.zeros((0, 2)), np.zeros(0), np.asarray(arm, dtype=float), np.zeros(2), 1.0, None, 0, 60)


def test_observe_no_objects_marks_only_arm_cell():
    task = make_suite("object", 1, 0).tasks[0]
    view = observe(_empty_state([0.3, 0.6]), task).agentview
    assert np.count_nonzero(view) == 1
    assert view.reshape(8, 8)[int(0.6 * 8), int(0.3 * 8)] != 0


def test_handeye_corner_has_nine_in_bounds_cells():
    # fill every agentview cell with an object so in-bounds patch cells are nonzero
    centres = np.array([[(c + 0.5) / 8, (r + 0.5) / 8] for r in range(8) for c in range(8)])
    s = SimState(tuple(range(64)), centres, np.full(64, 0.5), np.array([0.0, 0.0]), np.zeros(2), 1.0, None, 0, 60)
    task = make_suite("object", 1, 0).tasks[0]
    eye = observe(s, task).handeye
    assert np.count_nonzero(eye) == 9 and np.sum(eye == 0) == 16


def test_spatial_observations_differ_only_by_positions():
    suite = make_suite("spatial", 2, 3)
    s0, s1 = (reset(t, 5) for t in suite.tasks)
    assert np.array_equal(np.sort(s0.features), np.sort(s1.features))


@pytest.mark.parametrize("kind", list(SuiteKind))
def test_expert_success_rate(kind):
    suite = make_suite(kind, 5, 100)
    for task in suite.tasks:
        assert rollout_success(ExpertAgent(), task, 100, seed=1) >= 0.95


def test_expert_release_inside_goal_and_clamped():
    task = make_suite("object", 2, 0).tasks[0]
    s = _state_with_target_at(task, np.asarray(task.goal_center), held=True)
    assert scripted_expert(task, s)[2] == -1.0
    rng = np.random.default_rng(0)
    for seed in range(50):
        s = reset(task, seed)
        s.arm = rng.uniform(0, 1, 2)
        assert (np.abs(scripted_expert(task, s)) <= 1).all()


def test_collect_demos():
    task = make_suite("object", 3, 100).tasks[1]
    demos = collect_demos(task, 20, 4)
    assert len(demos) == 20
    for d in demos:
        assert d.success and len(d) <= task.horizon
        assert (np.abs(d.actions) <= 1).all() and (np.abs(d.observations) <= 1).all()
    again = collect_demos(task, 20, 4)
    assert all(a.observations.tobytes() == b.observations.tobytes() and a.actions.tobytes() == b.actions.tobytes()
               for a, b in zip(demos, again))


def test_recorded_actions_replay_to_success():
    task = make_suite("goal", 2, 100).tasks[1]
    d = collect_demos(task, 1, 0)[0]
    s = reset(task, sim.derive_seed(0, task.task_id, 0))
    assert np.array_equal(observe_flat(s, task), d.observations[0])
    for a in d.actions:
        assert not goal_reached(task, s)
        s = step(s, a)
    assert goal_reached(task, s)


def test_unsolvable_task_flagged():
    task = make_suite("object", 1, 0, horizon=1).tasks[0]
    with pytest.raises(sim.UnsolvableTaskError):
        collect_demos(task, 2, 0)


def test_trajectory_file_roundtrip(tmp_path):
    task = make_suite("object", 2, 1).tasks[0]
    demos = collect_demos(task, 3, 2)
    path = tmp_path / "t.jsonl"
    write_trajectories(path, demos)
    back = read_trajectories(path)
    assert [b.observations.tobytes() for b in back] == [d.observations.tobytes() for d in demos]
    assert [b.actions.tobytes() for b in back] == [d.actions.tobytes() for d in demos]


def test_trajectory_reader_rejects_bad_records(tmp_path):
    path = tmp_path / "t.jsonl"
    rec = sim.trajectory_record(collect_demos(make_suite("object", 1, 1).tasks[0], 1, 0)[0])
    rec["format_version"] = 99
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ValueError, match="format version"):
        read_trajectories(path)
    path.write_text("{not json\n")
    with pytest.raises(ValueError, match="t.jsonl:1"):
        read_trajectories(path)


def test_suite_file_roundtrip(tmp_path):
    s = make_suite("spatial", 3, 8)
    sim.write_suite(tmp_path / "s.json", s)
    assert sim.read_suite(tmp_path / "s.json") == s


@given(st.integers(0, 2**31), st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3)),
                                        min_size=1, max_size=40))
def test_dynamics_invariants(seed, actions):
    task = make_suite("object", 3, 0).tasks[seed % 3]
    s = reset(task, seed)
    for a in actions:
        s = step(s, a)
        assert ((0 <= s.obj_pos) & (s.obj_pos <= 1)).all() and 0 <= s.gripper <= 1
        if s.held is not None:
            assert np.array_equal(s.obj_pos[s.index_of(s.held)], s.arm)
        assert (np.abs(observe_flat(s, task)) <= 1).all()
        assert 0 <= s.t <= s.horizon


@given(st.integers(0, 2**31), st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)),
                                        min_size=1, max_size=20))
def test_simulation_deterministic(seed, actions):
    task = make_suite("goal", 2, 0).tasks[1]
    a, b = reset(task, seed), reset(task, seed)
    for act in actions:
        a, b = step(a, act), step(b, act)
    assert np.array_equal(a.obj_pos, b.obj_pos) and np.array_equal(a.arm, b.arm) and a.held == b.held
