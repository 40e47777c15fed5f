"""Behavioural cloning, feature distillation and policy distillation losses."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gmm import mc_kl
from .policy import ForwardOutput, GmmParams, Policy
from .sim import SuiteKind


@dataclass(frozen=True)
class LossWeights:
    lambda_i: float = 0.0
    lambda_t: float = 0.0
    lambda_e: float = 0.0
    lambda_p: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    @classmethod
    def preset(cls, kind) -> "LossWeights":
        """0.05 for text/extra everywhere; image/policy 0.25 on GOAL suites, else 0.05."""
        strong = SuiteKind.parse(kind) is SuiteKind.GOAL
        v = 0.25 if strong else 0.05
        return cls(lambda_i=v, lambda_t=0.05, lambda_e=0.05, lambda_p=v)

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls()

    def is_zero(self) -> bool:
        return not any((self.lambda_i, self.lambda_t, self.lambda_e, self.lambda_p))


@dataclass
class LossBreakdown:
    bc_nll: float = 0.0
    l_agentview: float = 0.0
    l_handeye: float = 0.0
    l_text: float = 0.0
    l_extra: float = 0.0
    l_policy: float = 0.0
    total: float = 0.0
    loss: Tensor | None = field(default=None, repr=False, compare=False)

    FIELDS = ("bc_nll", "l_agentview", "l_handeye", "l_text", "l_extra", "l_policy", "total")

    @property
    def l_image(self) -> float:
        return self.l_agentview + self.l_handeye

    def distill_value(self, w: LossWeights) -> float:
        return (w.lambda_i * self.l_image + w.lambda_t * self.l_text
                + w.lambda_e * self.l_extra + w.lambda_p * self.l_policy)

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in self.FIELDS}


@dataclass
class WindowBatch:
    obs: np.ndarray  # [B, L, OBS_DIM]
    actions: np.ndarray  # [B, A] target for the final window step
    task_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def empty(cls, context_len: int, obs_dim: int, action_dim: int) -> "WindowBatch":
        return cls(np.zeros((0, context_len, obs_dim)), np.zeros((0, action_dim)), np.zeros(0, dtype=int))


def nll_terms(gmm: GmmParams, actions) -> Tensor:
    return ad.mul(ad.gmm_log_prob(gmm.logits, gmm.means, gmm.log_scales, ad.as_tensor(actions)), -1.0)


def bc_nll(gmm: GmmParams, actions) -> Tensor:
    """Mean negative log-likelihood of the target actions."""
    if gmm.logits.shape[0] == 0:
        raise ValueError("bc_nll needs a non-empty batch")
    return ad.mean(nll_terms(gmm, actions))


def modality_l2(f_k: Tensor, f_prev) -> Tensor:
    """(1 / (N L)) sum_ij ||f_k[i, j] - f_prev[i, j]||^2 for latents [N, L, D]."""
    f_prev = f_prev.data if isinstance(f_prev, Tensor) else np.asarray(f_prev)
    if f_k.shape != f_prev.shape or f_k.ndim != 3:
        raise ValueError(f"latent shapes disagree: {f_k.shape} vs {f_prev.shape}")
    n, L = f_k.shape[:2]
    diff = ad.sub(f_k, f_prev)
    return ad.mul(ad.sum_(ad.square(diff)), 1.0 / (n * L))


def modality_losses(student: dict[str, Tensor], teacher: dict[str, Tensor]) -> dict[str, Tensor]:
    return {m: modality_l2(student[m], teacher[m]) for m in ("agentview", "handeye", "lang", "joint", "gripper")}


def distill_features(student: dict[str, Tensor], teacher: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """(l_image, l_text, l_extra) between student and teacher latent sets."""
    per = modality_losses(student, teacher)
    return (ad.add(per["agentview"], per["handeye"]), per["lang"], ad.add(per["joint"], per["gripper"]))


def l_policy(student: GmmParams, teacher: GmmParams, n: int, rng: np.random.Generator) -> Tensor:
    """Batch mean of Monte-Carlo KL(student || teacher); teacher side is constant."""
    return mc_kl(student, teacher.detach(), n, rng).value


def _distill_terms(student_out: ForwardOutput, teacher_out: ForwardOutput, weights: LossWeights,
                   n: int, rng: np.random.Generator):
    """Weighted sum (graph) plus raw component values; zero-weight terms stay out of the graph."""
    def maybe_graph(weight, fn):
        if weight > 0:
            return fn()
        with ad.no_grad():
            return fn()

    per = {}
    per["agentview"] = maybe_graph(weights.lambda_i, lambda: modality_l2(student_out.latents["agentview"],
                                                                        teacher_out.latents["agentview"]))
    per["handeye"] = maybe_graph(weights.lambda_i, lambda: modality_l2(student_out.latents["handeye"],
                                                                      teacher_out.latents["handeye"]))
    per["lang"] = maybe_graph(weights.lambda_t, lambda: modality_l2(student_out.latents["lang"],
                                                                   teacher_out.latents["lang"]))
    per["joint"] = maybe_graph(weights.lambda_e, lambda: modality_l2(student_out.latents["joint"],
                                                                    teacher_out.latents["joint"]))
    per["gripper"] = maybe_graph(weights.lambda_e, lambda: modality_l2(student_out.latents["gripper"],
                                                                      teacher_out.latents["gripper"]))
    per["policy"] = maybe_graph(weights.lambda_p, lambda: l_policy(student_out.gmm, teacher_out.gmm, n, rng))
    image = ad.add(per["agentview"], per["handeye"])
    extra = ad.add(per["joint"], per["gripper"])
    total = None
    for w, term in ((weights.lambda_i, image), (weights.lambda_t, per["lang"]),
                    (weights.lambda_e, extra), (weights.lambda_p, per["policy"])):
        if w > 0:
            total = ad.mul(term, w) if total is None else ad.add(total, ad.mul(term, w))
    parts = LossBreakdown(l_agentview=float(per["agentview"].data), l_handeye=float(per["handeye"].data),
                          l_text=float(per["lang"].data), l_extra=float(extra.data),
                          l_policy=float(per["policy"].data))
    return total, parts


def l_distill(student: Policy, teacher: Policy, exemplars: WindowBatch, weights: LossWeights, n: int,
              rng: np.random.Generator) -> LossBreakdown:
    """Weighted feature + policy distillation on exemplar windows only."""
    s_out = student.forward_full(exemplars.obs)
    t_out = teacher.snapshot().forward_full(exemplars.obs) if not teacher.frozen else teacher.forward_full(exemplars.obs)
    graph, parts = _distill_terms(s_out, t_out, weights, n, rng)
    parts.loss = graph if graph is not None else Tensor(0.0)
    parts.total = float(parts.loss.data)
    return parts


def total_loss(student: Policy, teacher: Policy | None, current: WindowBatch, exemplars: WindowBatch | None,
               weights: LossWeights, n: int, rng: np.random.Generator) -> LossBreakdown:
    """BC NLL over the union of current and exemplar windows plus distillation on exemplars.

    Current and exemplar windows run through separate forward passes so the
    exemplar computations are bit-identical to the teacher's when the weights
    coincide.
    """
    if len(current) == 0:
        raise ValueError("current batch must be non-empty")
    cur = student.forward_full(current.obs)
    nll = [nll_terms(cur.gmm, current.actions)]
    have_ex = exemplars is not None and len(exemplars) > 0
    if have_ex:
        ex = student.forward_full(exemplars.obs)
        nll.append(nll_terms(ex.gmm, exemplars.actions))
    bc = ad.mean(ad.concat(nll, axis=0))
    out = LossBreakdown(bc_nll=float(bc.data))
    loss = bc
    if teacher is not None and have_ex:
        t_out = teacher.forward_full(exemplars.obs) if teacher.frozen else teacher.snapshot().forward_full(exemplars.obs)
        graph, parts = _distill_terms(ex, t_out, weights, n, rng)
        for k in ("l_agentview", "l_handeye", "l_text", "l_extra", "l_policy"):
            setattr(out, k, getattr(parts, k))
        if graph is not None:
            loss = ad.add(bc, graph)
    out.loss = loss
    out.total = float(loss.data)
    return out
