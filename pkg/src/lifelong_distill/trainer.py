"""Sequential task training: replay buffer, batching, optimiser, lifelong loop."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import LossBreakdown, LossWeights, WindowBatch, total_loss
from .metrics import (DriftRecord, LifelongMetrics, SuccessTensor, compute_metrics, latent_drift,
                      rollout_success)
from .policy import Policy, PolicyConfig, save_checkpoint
from .sim import ACTION_DIM, OBS_DIM, TaskSuite, Trajectory, derive_seed

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    SEQUENTIAL = "sequential"
    ER = "er"
    M2DISTILL = "m2distill"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown method {value!r}; expected one of {[m.value for m in cls]}") from None


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, epoch: int, detail: str):
        super().__init__(f"non-finite loss at step {step}, epoch {epoch}: {detail}")
        self.step = step
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 2e-3
    weights: LossWeights | None = None  # None -> per-suite preset
    kl_samples: int = 16
    eval_epochs: tuple[int, ...] = (10, 20, 30, 40, 50)
    eval_episodes: int = 20
    replay_mix: float = 0.5
    replay_capacity: int = 1000
    grad_clip: float = 10.0
    seed: int = 0
    method: Method = Method.M2DISTILL
    eval_workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        object.__setattr__(self, "eval_epochs", tuple(sorted(int(e) for e in self.eval_epochs)))
        if not self.eval_epochs or self.eval_epochs[0] < 1 or self.epochs < self.eval_epochs[-1]:
            raise ValueError("eval epochs must be within 1..epochs")
        if not 0.0 <= self.replay_mix <= 1.0:
            raise ValueError("replay_mix must lie in [0, 1]")
        if self.batch_size < 1 or self.kl_samples < 1 or self.eval_episodes < 1:
            raise ValueError("batch_size, kl_samples and eval_episodes must be positive")

    @property
    def uses_replay(self) -> bool:
        return self.method is not Method.SEQUENTIAL

    @property
    def distills(self) -> bool:
        return self.method is Method.M2DISTILL

    def loss_weights(self, kind) -> LossWeights:
        if not self.distills:
            return LossWeights.zeros()
        return self.weights if self.weights is not None else LossWeights.preset(kind)


# ---------------------------------------------------------------- data


@dataclass
class WindowDataset:
    """Every timestep of a set of trajectories as a length-L observation window."""

    obs: np.ndarray  # [T, OBS_DIM]
    actions: np.ndarray  # [T, A]
    windows: np.ndarray  # [n, L] row indices, left-padded with each trajectory's first row
    task_ids: np.ndarray  # [n]

    def __len__(self) -> int:
        return len(self.windows)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], context_len: int) -> "WindowDataset":
        obs, acts, wins, tids = [], [], [], []
        offset = 0
        for tr in trajs:
            T = len(tr)
            t = np.arange(T)[:, None] + np.arange(-context_len + 1, 1)[None, :]
            wins.append(offset + np.maximum(t, 0))
            tids.append(np.full(T, tr.task_id))
            obs.append(tr.observations)
            acts.append(tr.actions)
            offset += T
        if not trajs:
            return cls(np.zeros((0, OBS_DIM)), np.zeros((0, ACTION_DIM)),
                       np.zeros((0, context_len), dtype=np.intp), np.zeros(0, dtype=int))
        return cls(np.concatenate(obs), np.concatenate(acts), np.concatenate(wins).astype(np.intp),
                   np.concatenate(tids))

    def batch(self, idx) -> WindowBatch:
        idx = np.asarray(idx, dtype=np.intp)
        rows = self.windows[idx]
        return WindowBatch(self.obs[rows], self.actions[rows[:, -1]], self.task_ids[idx])


class ReplayBuffer:
    """Capped per-task trajectory store with quota-based uniform eviction."""

    def __init__(self, capacity: int = 1000, context_len: int = 8):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.context_len = context_len
        self._tasks: dict[int, list[Trajectory]] = {}
        self._cache: dict[int, WindowDataset] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self._tasks.values())

    @property
    def task_ids(self) -> list[int]:
        return [k for k, v in self._tasks.items() if v]

    @property
    def counts(self) -> dict[int, int]:
        return {k: len(v) for k, v in self._tasks.items()}

    def trajectories(self, task_id: int) -> list[Trajectory]:
        return list(self._tasks.get(task_id, []))

    def push(self, trajectories: Sequence[Trajectory], rng: np.random.Generator) -> None:
        for tr in trajectories:
            self._tasks.setdefault(tr.task_id, []).append(tr)
            self._cache.pop(tr.task_id, None)
        excess = len(self) - self.capacity
        if excess <= 0:
            return
        # Water-fill from the top: every eviction hits a currently largest task
        # (ties broken at random), so evicted tasks end within 1 of each other
        # and never below the quota floor(capacity / tasks_seen).
        ids = list(self._tasks)
        target = np.array([len(self._tasks[t]) for t in ids])
        for _ in range(excess):
            top = np.flatnonzero(target == target.max())
            target[top[rng.integers(len(top))] if len(top) > 1 else top[0]] -= 1
        for tid, n in zip(ids, target):
            trajs = self._tasks[tid]
            if n < len(trajs):
                keep = np.sort(rng.choice(len(trajs), size=int(n), replace=False))
                self._tasks[tid] = [trajs[i] for i in keep]
                self._cache.pop(tid, None)

    def windows(self, task_id: int) -> WindowDataset:
        if task_id not in self._cache:
            self._cache[task_id] = WindowDataset.from_trajectories(self._tasks[task_id], self.context_len)
        return self._cache[task_id]


def replay_push(buffer: ReplayBuffer, trajectories: Sequence[Trajectory], rng: np.random.Generator) -> ReplayBuffer:
    buffer.push(trajectories, rng)
    return buffer


def sample_batch(current: WindowDataset, buffer: ReplayBuffer | None, batch_size: int, mix_ratio: float,
                 rng: np.random.Generator, current_index=None) -> tuple[WindowBatch, WindowBatch]:
    """ceil(mix * B) current windows plus exemplars drawn task-uniformly from the buffer.

    ``current_index`` supplies the current windows explicitly (epoch
    iteration); otherwise they are drawn uniformly.
    """
    if len(current) == 0:
        raise ValueError("current dataset is empty")
    tasks = buffer.task_ids if buffer is not None else []
    n_cur = batch_size if not tasks else math.ceil(mix_ratio * batch_size)
    n_ex = 0 if not tasks else batch_size - n_cur
    if current_index is None:
        current_index = rng.integers(len(current), size=n_cur)
    cur = current.batch(current_index)
    L = current.windows.shape[1]
    if n_ex == 0:
        return cur, WindowBatch.empty(L, OBS_DIM, ACTION_DIM)
    pick = rng.integers(len(tasks), size=n_ex)
    parts_obs, parts_act, parts_tid = [], [], []
    for slot in range(len(tasks)):
        m = int((pick == slot).sum())
        if m == 0:
            continue
        ds = buffer.windows(tasks[slot])
        b = ds.batch(rng.integers(len(ds), size=m))
        parts_obs.append(b.obs)
        parts_act.append(b.actions)
        parts_tid.append(b.task_ids)
    ex = WindowBatch(np.concatenate(parts_obs), np.concatenate(parts_act), np.concatenate(parts_tid))
    return cur, ex


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    rejected: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """In-place bias-corrected Adam update. Returns False (and skips) on non-finite gradients."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {params[k].shape}")
        if not np.isfinite(g).all():
            state.rejected += 1
            return False
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[k].data = params[k].data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return True


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# ---------------------------------------------------------------- training


@dataclass
class TaskResult:
    logs: list[dict]
    evaluations: dict[tuple[int, int], float]  # (task j, epoch e) -> rate
    checkpoints: dict[int, str]


def snapshot_teacher(policy: Policy) -> Policy:
    """Frozen deep copy; the student keeps training from the same weights."""
    return policy.snapshot()


def train_task(student: Policy, teacher: Policy | None, data: WindowDataset, buffer: ReplayBuffer | None,
               config: TrainConfig, suite: TaskSuite, step: int, *, batch_rng: np.random.Generator,
               kl_rng: np.random.Generator, seen_tasks: Sequence[int] | None = None,
               run_dir: Path | None = None, on_epoch: Callable[[dict], None] | None = None) -> TaskResult:
    """Optimise the step objective for ``config.epochs`` passes over ``data``.

    ``seen_tasks`` (task positions, 1-based) are evaluated at each epoch in
    ``config.eval_epochs``; the student is modified in place.
    """
    if len(data) == 0:
        raise ValueError("task data is empty")
    weights = config.loss_weights(suite.kind)
    replay = buffer if (config.uses_replay and buffer is not None and len(buffer) > 0) else None
    teach = teacher if (config.distills and replay is not None) else None
    n_cur = config.batch_size if replay is None else math.ceil(config.replay_mix * config.batch_size)
    seen = list(seen_tasks) if seen_tasks is not None else list(range(1, step + 1))
    opt = AdamState()
    logs, evals, ckpts = [], {}, {}
    t_start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        perm = batch_rng.permutation(len(data))
        sums = dict.fromkeys(LossBreakdown.FIELDS, 0.0)
        n_batches = 0
        for start in range(0, len(perm), n_cur):
            cur, ex = sample_batch(data, replay, config.batch_size, config.replay_mix, batch_rng,
                                   current_index=perm[start:start + n_cur])
            lb = total_loss(student, teach, cur, ex, weights, config.kl_samples, kl_rng)
            if not math.isfinite(lb.total):
                raise TrainingDiverged(step, epoch, str(lb.as_dict()))
            grads = ad.backprop(lb.loss, student.params)
            clip_global_norm(grads, config.grad_clip)
            if not adam_step(student.params, grads, opt, config.lr):
                log.warning("step %d epoch %d: non-finite gradient, update skipped", step, epoch)
            for k, v in lb.as_dict().items():
                sums[k] += v
            n_batches += 1
        rec = {"step": step, "epoch": epoch, **{k: v / n_batches for k, v in sums.items()},
               "batches": n_batches, "wall_time": time.perf_counter() - t_start}
        logs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if epoch in config.eval_epochs:
            for j in seen:
                evals[(j, epoch)] = rollout_success(student, suite.tasks[j - 1], config.eval_episodes,
                                                    config.seed, workers=config.eval_workers)
            if run_dir is not None:
                path = Path(run_dir) / "checkpoints" / f"step{step:02d}_epoch{epoch:03d}.npz"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(path, student, {"step": step, "epoch": epoch, "method": config.method.value})
                ckpts[epoch] = str(path)
            log.info("step %d epoch %d: %s", step, epoch,
                     " ".join(f"T{j}={evals[(j, epoch)]:.2f}" for j in seen))
    return TaskResult(logs, evals, ckpts)


@dataclass
class LifelongReport:
    success: SuccessTensor
    metrics: LifelongMetrics
    logs: list[dict]
    drift: list[DriftRecord]
    checkpoints: dict[tuple[int, int], str]
    final_policy: Policy
    wall_time: float


def run_lifelong(suite: TaskSuite, demos: Mapping[int, Sequence[Trajectory]], policy_config: PolicyConfig,
                 config: TrainConfig, run_dir: Path | None = None,
                 probe: Sequence[Trajectory] | None = None,
                 on_epoch: Callable[[dict], None] | None = None) -> LifelongReport:
    """Learn the suite's tasks in order.

    Raw demonstrations of a task are dropped once its step ends; afterwards
    only the replay buffer (ER / distillation methods) carries past data.
    """
    t0 = time.perf_counter()
    pending = {tid: list(trajs) for tid, trajs in demos.items()}
    missing = [t.task_id for t in suite.tasks if not pending.get(t.task_id)]
    if missing:
        raise ValueError(f"no demonstrations for tasks {missing}")
    if probe is None:
        probe = list(pending[suite.tasks[0].task_id])
    L = policy_config.context_len
    student = Policy.create(policy_config, derive_seed(config.seed, 0))
    buffer = ReplayBuffer(config.replay_capacity, L)
    success = SuccessTensor(len(suite), config.eval_epochs)
    logs, drift, ckpts = [], [], {}
    for k, task in enumerate(suite.tasks, start=1):
        trajs = pending.pop(task.task_id)
        data = WindowDataset.from_trajectories(trajs, L)
        previous = snapshot_teacher(student)
        teacher = previous if (k >= 2 and config.distills) else None
        res = train_task(student, teacher, data, buffer if config.uses_replay else None, config, suite, k,
                         batch_rng=np.random.default_rng(derive_seed(config.seed, 1, k)),
                         kl_rng=np.random.default_rng(derive_seed(config.seed, 2, k)),
                         run_dir=run_dir, on_epoch=on_epoch)
        for (j, e), rate in res.evaluations.items():
            success[(k, j, e)] = rate
        for e, path in res.checkpoints.items():
            ckpts[(k, e)] = path
        logs.extend(res.logs)
        if config.uses_replay:
            buffer.push(trajs, np.random.default_rng(derive_seed(config.seed, 3, k)))
        del trajs, data
        if k >= 2:
            drift.append(latent_drift(student, previous, probe, step=k))
    return LifelongReport(success, compute_metrics(success), logs, drift, ckpts, student,
                          time.perf_counter() - t0)

