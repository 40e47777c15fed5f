"""Success-rate rollouts, lifelong transfer metrics and latent drift."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .policy import MODALITIES, Policy, left_pad_window
from .sim import (SimState, TaskSpec, Trajectory, derive_seed, goal_reached, observe_flat, reset,
                  scripted_expert, step)

EPISODE_BLOCK = 10


class SuccessTensor:
    """c[i][j][e]: success on task j (1-based) at epoch e of learning step i, for j <= i."""

    def __init__(self, num_tasks: int, eval_epochs: Sequence[int]):
        if num_tasks < 1 or not eval_epochs:
            raise ValueError("need K >= 1 and a non-empty evaluation schedule")
        self.K = num_tasks
        self.E = tuple(sorted(int(e) for e in eval_epochs))
        self._c: dict[tuple[int, int, int], float] = {}

    def __setitem__(self, key: tuple[int, int, int], rate: float) -> None:
        i, j, e = key
        if not (1 <= j <= i <= self.K) or e not in self.E:
            raise KeyError(f"entry {key} outside schedule (K={self.K}, E={self.E})")
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"success rate {rate} outside [0, 1]")
        self._c[(i, j, e)] = float(rate)

    def __getitem__(self, key: tuple[int, int, int]) -> float:
        return self._c[key]

    def __contains__(self, key) -> bool:
        return key in self._c

    def __eq__(self, other) -> bool:
        return isinstance(other, SuccessTensor) and (self.K, self.E, self._c) == (other.K, other.E, other._c)

    @property
    def e_last(self) -> int:
        return self.E[-1]

    def expected_keys(self) -> list[tuple[int, int, int]]:
        return [(i, j, e) for i in range(1, self.K + 1) for j in range(1, i + 1) for e in self.E]

    def is_complete(self) -> bool:
        return all(k in self._c for k in self.expected_keys())

    def rows(self) -> list[tuple[int, int, int, float]]:
        return [(i, j, e, self._c[(i, j, e)]) for (i, j, e) in self.expected_keys() if (i, j, e) in self._c]

    @classmethod
    def from_rows(cls, num_tasks: int, eval_epochs: Sequence[int], rows: Iterable) -> "SuccessTensor":
        c = cls(num_tasks, eval_epochs)
        for i, j, e, r in rows:
            c[(int(i), int(j), int(e))] = float(r)
        return c


@dataclass(frozen=True)
class LifelongMetrics:
    fwt: float
    nbt: float
    auc: float

    def __iter__(self):
        return iter((self.fwt, self.nbt, self.auc))


def compute_metrics(c: SuccessTensor) -> LifelongMetrics:
    """Forward transfer, negative backward transfer and AUC of a complete tensor."""
    if not c.is_complete():
        missing = [k for k in c.expected_keys() if k not in c][:5]
        raise ValueError(f"success tensor incomplete; first missing entries {missing}")
    K, E, last = c.K, c.E, c.e_last
    fwt, nbt, auc = [], [], []
    for k in range(1, K + 1):
        own = [c[(k, k, e)] for e in E]
        fwt_k = sum(own) / len(E)
        best = max(own)
        later = [c[(tau, k, last)] for tau in range(k + 1, K + 1)]
        if later:
            nbt.append(sum(best - v for v in later) / len(later))
        auc.append((fwt_k + sum(later)) / (len(later) + 1))
        fwt.append(fwt_k)
    return LifelongMetrics(float(np.mean(fwt)), float(np.mean(nbt)) if nbt else 0.0, float(np.mean(auc)))


# ---------------------------------------------------------------- rollouts


class PolicyAgent:
    """Deterministic evaluation: mean of the dominant mixture component."""

    def __init__(self, policy: Policy):
        self.policy = policy

    def act(self, task: TaskSpec, histories: Sequence[Sequence[np.ndarray]],
            states: Sequence[SimState]) -> np.ndarray:
        L = self.policy.config.context_len
        windows = np.stack([left_pad_window(np.asarray(h[-L:]), L) for h in histories])
        return self.policy.mode_action(windows)


class ExpertAgent:
    def act(self, task, histories, states) -> np.ndarray:
        return np.stack([scripted_expert(task, s) for s in states])


def _run_block(agent, task: TaskSpec, seeds: Sequence[int]) -> int:
    states = [reset(task, s) for s in seeds]
    hist = [[observe_flat(s, task)] for s in states]
    active = list(range(len(seeds)))
    wins = 0
    while active:
        acts = agent.act(task, [hist[i] for i in active], [states[i] for i in active])
        still = []
        for i, a in zip(active, acts):
            states[i] = step(states[i], a)
            if goal_reached(task, states[i]):
                wins += 1
            elif states[i].t < task.horizon:
                hist[i].append(observe_flat(states[i], task))
                still.append(i)
        active = still
    return wins


def episode_seeds(seed: int, task: TaskSpec, episodes: int) -> list[int]:
    return [derive_seed(seed, task.task_id, ep) for ep in range(episodes)]


def rollout_success(agent, task: TaskSpec, episodes: int, seed: int, workers: int = 1,
                    block: int = EPISODE_BLOCK) -> float:
    """Fraction of ``episodes`` solved within the horizon.

    Episodes run in fixed blocks of ``block`` lock-stepped environments; blocks
    are distributed over ``workers`` threads, so the result does not depend on
    the worker count.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    if isinstance(agent, Policy):
        agent = PolicyAgent(agent)
    seeds = episode_seeds(seed, task, episodes)
    blocks = [seeds[i:i + block] for i in range(0, episodes, block)]
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            wins = sum(pool.map(lambda b: _run_block(agent, task, b), blocks))
    else:
        wins = sum(_run_block(agent, task, b) for b in blocks)
    return wins / episodes


# ---------------------------------------------------------------- drift


@dataclass(frozen=True)
class DriftRecord:
    step: int
    agentview: float
    handeye: float
    lang: float
    joint: float
    gripper: float

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in ("agentview", "handeye", "lang", "joint", "gripper")}


def probe_latents(policy: Policy, probe: Sequence[Trajectory]) -> dict[str, np.ndarray]:
    obs = np.concatenate([t.observations for t in probe])[:, None, :]
    with ad.no_grad():
        lat = policy.encode(obs)
    return {m: lat[m].data[:, 0, :] for m in MODALITIES}


def latent_drift(policy_k: Policy, policy_prev: Policy, probe: Sequence[Trajectory], step: int = 0) -> DriftRecord:
    """Mean squared latent displacement per modality over every probe timestep."""
    if policy_k.config != policy_prev.config:
        raise ValueError("drift needs policies with the same configuration")
    a = probe_latents(policy_k, probe)
    b = probe_latents(policy_prev, probe)
    vals = {m: float(np.mean(np.sum((a[m] - b[m]) ** 2, axis=1))) for m in MODALITIES}
    return DriftRecord(step, vals["agentview"], vals["handeye"], vals["lang"], vals["joint"], vals["gripper"])


def mean_and_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))
