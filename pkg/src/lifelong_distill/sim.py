"""Synthetic planar pick-and-place tasks with a scripted expert.

The workspace is the unit square. An arm moves by bounded displacements,
grasps an object within ``GRASP_RADIUS`` when the gripper command is
positive and releases it when negative. A task is solved when its target
object rests (not held) inside the goal disc.

Three suite kinds mirror the usual lifelong-manipulation splits:

* ``OBJECT``  distinct objects, one shared goal; the target differs per task.
* ``GOAL``    one fixed scene; tasks differ in which object goes where.
* ``SPATIAL`` two identical objects; the target is only identifiable by where
  it spawned.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import kernels

GRID = 8
PATCH = 5
LANG_DIM = 16
MAX_STEP = 0.05
GRASP_RADIUS = 0.05
DEFAULT_HORIZON = 60
GOAL_RADIUS = 0.08
SPAWN_HALF = 0.02
ARM_START = (0.5, 0.45)
SHARED_GOAL = (0.5, 0.85)
DEMO_NOISE = 0.1  # std of the actuation noise added to expert demonstrations

# flat observation layout
OBS_SLICES = {
    "agentview": slice(0, 64),
    "handeye": slice(64, 89),
    "lang": slice(89, 105),
    "joint": slice(105, 109),
    "gripper": slice(109, 110),
}
OBS_DIM = 110
ACTION_DIM = 3
FORMAT_VERSION = 1


class SuiteKind(str, enum.Enum):
    OBJECT = "OBJECT"
    GOAL = "GOAL"
    SPATIAL = "SPATIAL"

    @classmethod
    def parse(cls, value) -> "SuiteKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown suite kind {value!r}; expected one of "
                             f"{[k.value for k in cls]}") from None


class UnsolvableTaskError(RuntimeError):
    def __init__(self, task_id: int, attempts: int):
        super().__init__(f"scripted expert failed {attempts} consecutive episodes on task {task_id}")
        self.task_id = task_id


@dataclass(frozen=True)
class ObjectSpec:
    object_id: int
    feature: float
    spawn: tuple[float, float, float, float]  # x0, y0, x1, y1


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    suite_kind: SuiteKind
    lang_vec: tuple[float, ...]
    objects: tuple[ObjectSpec, ...]
    target: int
    goal_center: tuple[float, float]
    goal_radius: float = GOAL_RADIUS
    arm_start: tuple[float, float] = ARM_START
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if abs(math.fsum(v * v for v in self.lang_vec) - 1.0) > 1e-9:
            raise ValueError("lang_vec must have unit norm")
        cx, cy = self.goal_center
        r = self.goal_radius
        if not (r <= cx <= 1 - r and r <= cy <= 1 - r):
            raise ValueError("goal region must lie inside the unit workspace")
        if self.target not in [o.object_id for o in self.objects]:
            raise ValueError(f"target {self.target} is not among the task objects")

    @property
    def target_index(self) -> int:
        return [o.object_id for o in self.objects].index(self.target)

    @property
    def target_spec(self) -> ObjectSpec:
        return self.objects[self.target_index]

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "suite_kind": self.suite_kind.value,
            "lang_vec": list(self.lang_vec),
            "objects": [{"object_id": o.object_id, "feature": o.feature, "spawn": list(o.spawn)}
                        for o in self.objects],
            "target": self.target,
            "goal_center": list(self.goal_center),
            "goal_radius": self.goal_radius,
            "arm_start": list(self.arm_start),
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            task_id=int(d["task_id"]),
            suite_kind=SuiteKind.parse(d["suite_kind"]),
            lang_vec=tuple(float(v) for v in d["lang_vec"]),
            objects=tuple(ObjectSpec(int(o["object_id"]), float(o["feature"]),
                                     tuple(float(v) for v in o["spawn"])) for o in d["objects"]),
            target=int(d["target"]),
            goal_center=tuple(float(v) for v in d["goal_center"]),
            goal_radius=float(d["goal_radius"]),
            arm_start=tuple(float(v) for v in d["arm_start"]),
            horizon=int(d["horizon"]),
        )


@dataclass(frozen=True)
class TaskSuite:
    kind: SuiteKind
    tasks: tuple[TaskSpec, ...]
    seed: int

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if not ids:
            raise ValueError("a suite needs at least one task")
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be distinct")

    def __len__(self) -> int:
        return len(self.tasks)

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": self.kind.value, "seed": self.seed,
                "tasks": [t.to_dict() for t in self.tasks]}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSuite":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported suite format version {d.get('format_version')!r}")
        return cls(SuiteKind.parse(d["kind"]), tuple(TaskSpec.from_dict(t) for t in d["tasks"]),
                   int(d["seed"]))


@dataclass
class SimState:
    object_ids: tuple[int, ...]
    obj_pos: np.ndarray  # [n, 2]
    features: np.ndarray  # [n]
    arm: np.ndarray  # [2]
    arm_vel: np.ndarray  # [2], last displacement / MAX_STEP
    gripper: float  # open fraction
    held: int | None  # object id
    t: int
    horizon: int

    def copy(self) -> "SimState":
        return SimState(self.object_ids, self.obj_pos.copy(), self.features, self.arm.copy(),
                        self.arm_vel.copy(), self.gripper, self.held, self.t, self.horizon)

    def index_of(self, object_id: int) -> int:
        return self.object_ids.index(object_id)


@dataclass(frozen=True)
class MultiModalObs:
    agentview: np.ndarray
    handeye: np.ndarray
    lang: np.ndarray
    joint: np.ndarray
    gripper_obs: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.agentview, self.handeye, self.lang, self.joint, self.gripper_obs])

    @classmethod
    def from_flat(cls, v: np.ndarray) -> "MultiModalObs":
        return cls(*(np.asarray(v[s]) for s in OBS_SLICES.values()))


@dataclass
class Trajectory:
    task_id: int
    suite_kind: SuiteKind
    observations: np.ndarray  # [T, OBS_DIM]
    actions: np.ndarray  # [T, ACTION_DIM]
    success: bool

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def steps(self) -> list[tuple[MultiModalObs, np.ndarray]]:
        return [(MultiModalObs.from_flat(o), a) for o, a in zip(self.observations, self.actions)]


# ---------------------------------------------------------------- suites


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


def _unit(rng: np.random.Generator, dim: int) -> tuple[float, ...]:
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    return tuple(float(x) for x in v)


def _cell_center(row: int, col: int) -> tuple[float, float]:
    return ((col + 0.5) / GRID, (row + 0.5) / GRID)


def _spawn_rect(row: int, col: int) -> tuple[float, float, float, float]:
    cx, cy = _cell_center(row, col)
    return (cx - SPAWN_HALF, cy - SPAWN_HALF, cx + SPAWN_HALF, cy + SPAWN_HALF)


# objects spawn in the lower three rows, away from the arm start and goals
_SPAWN_CELLS = [(r, c) for r in range(3) for c in range(GRID)]
_GOAL_CELLS = [(r, c) for r in range(5, 7) for c in range(1, GRID - 1)]


def make_suite(kind, num_tasks: int, seed: int, horizon: int = DEFAULT_HORIZON) -> TaskSuite:
    kind = SuiteKind.parse(kind)
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, list(SuiteKind).index(kind)))
    cells = [_SPAWN_CELLS[i] for i in rng.permutation(len(_SPAWN_CELLS))]
    tasks = []
    if kind is SuiteKind.OBJECT:
        if num_tasks > len(cells):
            raise ValueError(f"OBJECT suites support at most {len(cells)} tasks")
        feats = np.linspace(0.25, 1.0, num_tasks) if num_tasks > 1 else np.array([0.6])
        feats = feats[rng.permutation(num_tasks)]
        pool = [ObjectSpec(i, float(feats[i]), _spawn_rect(*cells[i])) for i in range(num_tasks)]
        for k in range(num_tasks):
            ids = [k] + [(k + d) % num_tasks for d in (1, 2) if d < num_tasks]
            tasks.append(TaskSpec(k, kind, _unit(rng, LANG_DIM), tuple(pool[i] for i in ids), k,
                                  SHARED_GOAL, horizon=horizon))
    elif kind is SuiteKind.GOAL:
        goals = [_GOAL_CELLS[i] for i in rng.permutation(len(_GOAL_CELLS))]
        if num_tasks > len(goals):
            raise ValueError(f"GOAL suites support at most {len(goals)} tasks")
        scene = tuple(ObjectSpec(i, f, _spawn_rect(*cells[i])) for i, f in enumerate((0.35, 0.65, 0.95)))
        for k in range(num_tasks):
            tasks.append(TaskSpec(k, kind, _unit(rng, LANG_DIM), scene, k % len(scene),
                                  _cell_center(*goals[k]), horizon=horizon))
    else:
        if 2 * num_tasks > len(cells):
            raise ValueError(f"SPATIAL suites support at most {len(cells) // 2} tasks")
        for k in range(num_tasks):
            target = ObjectSpec(2 * k, 0.7, _spawn_rect(*cells[k]))
            twin = ObjectSpec(2 * k + 1, 0.7, _spawn_rect(*cells[num_tasks + k]))
            tasks.append(TaskSpec(k, kind, _unit(rng, LANG_DIM), (target, twin), 2 * k,
                                  SHARED_GOAL, horizon=horizon))
    return TaskSuite(kind, tuple(tasks), seed)


# ---------------------------------------------------------------- dynamics


def reset(task: TaskSpec, episode_seed: int) -> SimState:
    rng = np.random.default_rng(episode_seed)
    pos = np.empty((len(task.objects), 2))
    for i, o in enumerate(task.objects):
        x0, y0, x1, y1 = o.spawn
        pos[i] = rng.uniform((x0, y0), (x1, y1))
    return SimState(
        object_ids=tuple(o.object_id for o in task.objects),
        obj_pos=pos,
        features=np.array([o.feature for o in task.objects]),
        arm=np.array(task.arm_start, dtype=float),
        arm_vel=np.zeros(2),
        gripper=1.0,
        held=None,
        t=0,
        horizon=task.horizon,
    )


def clamp_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=float).reshape(ACTION_DIM)
    return np.clip(a, -1.0, 1.0)


def step(state: SimState, action) -> SimState:
    if state.t >= state.horizon:
        raise RuntimeError(f"episode already at horizon {state.horizon}")
    a = clamp_action(action)
    s = state.copy()
    new_arm = np.clip(s.arm + a[:2] * MAX_STEP, 0.0, 1.0)
    s.arm_vel = np.clip((new_arm - s.arm) / MAX_STEP, -1.0, 1.0)  # division can round past 1
    s.arm = new_arm
    grip = a[2]
    s.gripper = min(max(s.gripper - 0.5 * grip, 0.0), 1.0)
    if s.held is None and grip > 0:
        d = np.hypot(*(s.obj_pos - s.arm).T)
        i = int(np.argmin(d))
        if d[i] <= GRASP_RADIUS:
            s.held = s.object_ids[i]
    elif s.held is not None and grip < 0:
        s.held = None
    if s.held is not None:
        s.obj_pos[s.index_of(s.held)] = s.arm
    s.t += 1
    return s


def goal_reached(task: TaskSpec, state: SimState) -> bool:
    if state.held == task.target:
        return False
    p = state.obj_pos[state.index_of(task.target)]
    gx, gy = task.goal_center
    return math.hypot(p[0] - gx, p[1] - gy) <= task.goal_radius


def observe_flat(state: SimState, task: TaskSpec) -> np.ndarray:
    view, eye = kernels.render_grids(state.obj_pos, state.features, state.arm, GRID, PATCH)
    out = np.empty(OBS_DIM)
    out[OBS_SLICES["agentview"]] = view
    out[OBS_SLICES["handeye"]] = eye
    out[OBS_SLICES["lang"]] = task.lang_vec
    out[105:107] = 2.0 * state.arm - 1.0
    out[107:109] = state.arm_vel
    out[109] = state.gripper
    return out


def observe(state: SimState, task: TaskSpec) -> MultiModalObs:
    return MultiModalObs.from_flat(observe_flat(state, task))


# ---------------------------------------------------------------- expert


def _toward(d: np.ndarray) -> np.ndarray:
    """Full-speed command along ``d``; lands exactly on the point once within one step."""
    v = d / MAX_STEP
    m = np.abs(v).max()
    return v / m if m > 1.0 else v


def _within_step(d: np.ndarray) -> bool:
    return float(np.abs(d).max()) <= MAX_STEP


def scripted_expert(task: TaskSpec, state: SimState) -> np.ndarray:
    """Approach the target, grasp on arrival, carry to the goal centre, release on arrival."""
    if state.held == task.target:
        d = np.asarray(task.goal_center) - state.arm
        return clamp_action(np.append(_toward(d), -1.0 if _within_step(d) else 1.0))
    if state.held is not None:
        return np.array([0.0, 0.0, -1.0])
    d = state.obj_pos[task.target_index] - state.arm
    return clamp_action(np.append(_toward(d), 1.0 if _within_step(d) else -1.0))


def run_episode(task: TaskSpec, controller: Callable[[SimState, list[np.ndarray]], np.ndarray],
                episode_seed: int) -> Trajectory:
    """Roll out ``controller(state, obs_history)`` until success or the horizon."""
    state = reset(task, episode_seed)
    obs, acts = [], []
    success = False
    while state.t < task.horizon:
        o = observe_flat(state, task)
        obs.append(o)
        a = clamp_action(controller(state, obs))
        acts.append(a)
        state = step(state, a)
        if goal_reached(task, state):
            success = True
            break
    return Trajectory(task.task_id, task.suite_kind, np.array(obs).reshape(-1, OBS_DIM),
                      np.array(acts).reshape(-1, ACTION_DIM), success)


def noisy_expert(task: TaskSpec, noise: float, rng: np.random.Generator):
    """Scripted expert with Gaussian actuation noise; the executed action is what gets recorded."""
    def controller(state: SimState, _history) -> np.ndarray:
        a = scripted_expert(task, state)
        if noise > 0:
            a = clamp_action(a + noise * rng.standard_normal(ACTION_DIM))
        return a
    return controller


def collect_demos(task: TaskSpec, n: int, seed: int, noise: float = DEMO_NOISE) -> list[Trajectory]:
    """``n`` successful expert episodes; failed attempts are discarded and resampled."""
    if n < 1:
        raise ValueError("need at least one demonstration")
    demos: list[Trajectory] = []
    episode = failures = 0
    while len(demos) < n:
        ep_seed = derive_seed(seed, task.task_id, episode)
        rng = np.random.default_rng(derive_seed(ep_seed, 1))
        traj = run_episode(task, noisy_expert(task, noise, rng), ep_seed)
        episode += 1
        if traj.success:
            demos.append(traj)
            failures = 0
        else:
            failures += 1
            if failures >= 10 * n:
                raise UnsolvableTaskError(task.task_id, failures)
    return demos


# ---------------------------------------------------------------- files


def trajectory_record(traj: Trajectory) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "task_id": traj.task_id,
        "suite_kind": traj.suite_kind.value,
        "length": len(traj),
        "obs_dim": OBS_DIM,
        "action_dim": ACTION_DIM,
        "observations": traj.observations.reshape(-1).tolist(),
        "actions": traj.actions.reshape(-1).tolist(),
        "success": bool(traj.success),
    }


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(json.dumps(trajectory_record(traj), separators=(",", ":")) + "\n")


def read_trajectories(path) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict) or rec.get("format_version") != FORMAT_VERSION:
                version = rec.get("format_version") if isinstance(rec, dict) else None
                raise ValueError(f"{path}:{lineno}: unsupported format version {version!r}")
            try:
                T = int(rec["length"])
                out.append(Trajectory(
                    int(rec["task_id"]), SuiteKind.parse(rec["suite_kind"]),
                    np.array(rec["observations"], dtype=float).reshape(T, int(rec["obs_dim"])),
                    np.array(rec["actions"], dtype=float).reshape(T, int(rec["action_dim"])),
                    bool(rec["success"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trajectory record ({exc})") from None
    return out


def write_suite(path, suite: TaskSuite) -> None:
    Path(path).write_text(json.dumps(suite.to_dict(), indent=1) + "\n")


def read_suite(path) -> TaskSuite:
    return TaskSuite.from_dict(json.loads(Path(path).read_text()))
