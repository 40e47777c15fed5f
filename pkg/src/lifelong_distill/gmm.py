"""Diagonal Gaussian-mixture numerics: density, sampling, Monte-Carlo KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .policy import LOG_SCALE_MAX, LOG_SCALE_MIN, GmmParams

MIN_SCALE = 1e-4


@dataclass(frozen=True)
class GaussianDiag:
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "scale", np.atleast_1d(np.asarray(self.scale, dtype=float)))
        if self.mean.shape != self.scale.shape:
            raise ValueError("mean and scale must have the same shape")
        if (self.scale < MIN_SCALE).any():
            raise ValueError(f"scales must be >= {MIN_SCALE}")


@dataclass
class KlEstimate:
    value: Tensor  # scalar, differentiable w.r.t. the sampling distribution
    n_samples: int
    terms: np.ndarray  # [B, N] per-sample log-ratio terms

    def __float__(self) -> float:
        return float(self.value.data)


def _batched(p: GmmParams) -> tuple[GmmParams, bool]:
    if p.logits.ndim == 1:
        return GmmParams(ad.reshape(p.logits, (1,) + p.logits.shape),
                         ad.reshape(p.means, (1,) + p.means.shape),
                         ad.reshape(p.log_scales, (1,) + p.log_scales.shape)), True
    return p, False


def gmm_log_pdf(p: GmmParams, a) -> Tensor:
    """log sum_c w_c N(a; mu_c, diag sigma_c^2). Unbatched params give a scalar.

    Batched params [B, ...] take actions [B, A] and return [B].
    """
    p, single = _batched(p)
    a = ad.as_tensor(a)
    if single:
        a = ad.reshape(a, (1, -1))
    out = ad.gmm_log_prob(p.logits, p.means, p.log_scales, a)
    return ad.reshape(out, ()) if single else out


def sample_components(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF component choice: logits [B, C], uniforms [B, n] -> [B, n]."""
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    cdf = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
    comp = (u[:, :, None] > cdf[:, None, :]).sum(axis=2)
    return np.minimum(comp, logits.shape[1] - 1)


def gmm_sample(p: GmmParams, n: int, rng: np.random.Generator, pathwise: bool = False) -> Tensor:
    """Draw ``n`` actions per batch row; returns [B*n, A] ([n, A] if unbatched).

    The component index is drawn without gradient. With ``pathwise`` the sample
    is mu_c + sigma_c * eps as a graph node, so gradients reach the selected
    component's mean and scale.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p, _ = _batched(p)
    B, C, A = p.means.shape
    u = rng.random((B, n))
    eps = rng.standard_normal((B, n, A))
    comp = sample_components(p.logits.data, u).reshape(-1)
    eps = eps.reshape(B * n, A)
    if not pathwise:
        rows = np.repeat(np.arange(B), n)
        mu = p.means.data[rows, comp]
        sd = np.exp(p.log_scales.data[rows, comp])
        return Tensor(mu + sd * eps)
    mu = ad.take_components(ad.repeat_rows(p.means, n), comp)
    sd = ad.exp(ad.take_components(ad.repeat_rows(p.log_scales, n), comp))
    return ad.add(mu, ad.mul(sd, eps))


def gaussian_kl_closed_form(p: GaussianDiag, q: GaussianDiag) -> float:
    if p.mean.shape != q.mean.shape:
        raise ValueError("dimension mismatch")
    return float(np.sum(np.log(q.scale / p.scale)
                        + (p.scale ** 2 + (p.mean - q.mean) ** 2) / (2.0 * q.scale ** 2) - 0.5))


def mc_kl(p_k: GmmParams, p_prev: GmmParams, n: int, rng: np.random.Generator) -> KlEstimate:
    """Monte-Carlo KL(p_k || p_prev) from ``n`` pathwise samples of p_k per row.

    The value is the mean of all B*n log-ratio terms, i.e. the batch mean of the
    per-row estimates. Identical inputs give exactly zero.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p_k, _ = _batched(p_k)
    p_prev, _ = _batched(p_prev)
    if p_k.means.shape[0] != p_prev.means.shape[0] or p_k.means.shape[2] != p_prev.means.shape[2]:
        raise ValueError(f"mixture shapes disagree: {p_k.means.shape} vs {p_prev.means.shape}")
    B = p_k.means.shape[0]
    a = gmm_sample(p_k, n, rng, pathwise=True)
    lp_k = ad.gmm_log_prob(ad.repeat_rows(p_k.logits, n), ad.repeat_rows(p_k.means, n),
                           ad.repeat_rows(p_k.log_scales, n), a)
    lp_prev = ad.gmm_log_prob(ad.repeat_rows(p_prev.logits, n), ad.repeat_rows(p_prev.means, n),
                              ad.repeat_rows(p_prev.log_scales, n), a)
    terms = ad.sub(lp_k, lp_prev)
    return KlEstimate(ad.mean(terms), n, terms.data.reshape(B, n).copy())


def single_component(mean, scale) -> GmmParams:
    """Unbatched one-component GmmParams from a mean/scale vector."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    scale = np.atleast_1d(np.asarray(scale, dtype=float))
    return GmmParams.from_arrays(np.zeros(1), mean[None], np.log(np.maximum(scale, MIN_SCALE))[None])


def clamp_log_scales(log_scales: np.ndarray) -> np.ndarray:
    return np.clip(log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX)
