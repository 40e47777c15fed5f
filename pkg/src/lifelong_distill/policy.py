"""Multi-modal policy: per-modality MLP encoders -> causal transformer -> GMM head."""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sim import ACTION_DIM, OBS_DIM, OBS_SLICES

# token order inside one timestep
MODALITIES = ("lang", "agentview", "handeye", "joint", "gripper")
LOG_SCALE_MIN = math.log(1e-4)
LOG_SCALE_MAX = math.log(10.0)
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    latent_dim: int = 64
    context_len: int = 8
    gmm_components: int = 5
    action_dim: int = ACTION_DIM
    encoder_hidden: int = 64
    ffn_hidden: int = 64

    def __post_init__(self):
        if self.gmm_components < 1 or self.context_len < 1 or self.latent_dim < 1:
            raise ValueError(f"invalid policy config: {self}")

    @property
    def max_tokens(self) -> int:
        return len(MODALITIES) * self.context_len

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GmmParams:
    logits: Tensor  # [B, C]
    means: Tensor  # [B, C, A]
    log_scales: Tensor  # [B, C, A]

    @property
    def batch(self) -> int:
        return self.logits.shape[0]

    def detach(self) -> "GmmParams":
        return GmmParams(self.logits.detach(), self.means.detach(), self.log_scales.detach())

    @classmethod
    def from_arrays(cls, logits, means, log_scales, requires_grad=False) -> "GmmParams":
        return cls(Tensor(logits, requires_grad), Tensor(means, requires_grad),
                   Tensor(log_scales, requires_grad))


@dataclass
class ForwardOutput:
    latents: dict[str, Tensor]  # modality -> [B, L, D]
    gmm: GmmParams


def _param_shapes(cfg: PolicyConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    h, d = cfg.encoder_hidden, cfg.latent_dim
    for m in MODALITIES:
        n_in = OBS_SLICES[m].stop - OBS_SLICES[m].start
        for i, (a, b) in enumerate(((n_in, h), (h, h), (h, d))):
            shapes[f"enc.{m}.w{i}"] = (a, b)
            shapes[f"enc.{m}.b{i}"] = (b,)
    shapes["tf.pos"] = (cfg.max_tokens, d)
    for n in ("wq", "wk", "wv", "wo"):
        shapes[f"tf.{n}"] = (d, d)
    shapes["tf.ff_w1"] = (d, cfg.ffn_hidden)
    shapes["tf.ff_b1"] = (cfg.ffn_hidden,)
    shapes["tf.ff_w2"] = (cfg.ffn_hidden, d)
    shapes["tf.ff_b2"] = (d,)
    C, A = cfg.gmm_components, cfg.action_dim
    shapes["head.w"] = (d, C + 2 * C * A)
    shapes["head.b"] = (C + 2 * C * A,)
    return shapes


def init_params(cfg: PolicyConfig, seed: int) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if len(shape) == 1:
            arr = np.zeros(shape)
        elif name == "tf.pos":
            arr = rng.uniform(-0.1, 0.1, shape)
        else:
            lim = math.sqrt(3.0 / shape[0])
            arr = rng.uniform(-lim, lim, shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def left_pad_window(history: np.ndarray, length: int) -> np.ndarray:
    """Last ``length`` rows of ``history``; short histories repeat the first row."""
    history = np.asarray(history)
    if len(history) >= length:
        return history[len(history) - length:]
    pad = np.repeat(history[:1], length - len(history), axis=0)
    return np.concatenate([pad, history], axis=0)


class Policy:
    """Parameters plus config. ``frozen`` policies never record gradients."""

    def __init__(self, config: PolicyConfig, params: Mapping[str, Tensor], frozen: bool = False):
        expected = _param_shapes(config)
        if set(params) != set(expected):
            raise ValueError(f"parameter names do not match config: missing "
                             f"{sorted(set(expected) - set(params))}, extra {sorted(set(params) - set(expected))}")
        for k, shape in expected.items():
            if params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {params[k].shape}, expected {shape}")
        self.config = config
        self.params = dict(params)
        self.frozen = frozen

    @classmethod
    def create(cls, config: PolicyConfig, seed: int) -> "Policy":
        return cls(config, init_params(config, seed))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def snapshot(self) -> "Policy":
        """Deep frozen copy (teacher)."""
        return Policy(self.config, {k: Tensor(v.data.copy(), False, k) for k, v in self.params.items()},
                      frozen=True)

    def trainable_copy(self) -> "Policy":
        return Policy(self.config, {k: Tensor(v.data.copy(), True, k) for k, v in self.params.items()})

    # ------------------------------------------------------------ forward

    def encode(self, obs) -> dict[str, Tensor]:
        """obs [B, L, OBS_DIM] -> modality -> latent [B, L, D]."""
        obs = np.asarray(obs.data if isinstance(obs, Tensor) else obs, dtype=np.float64)
        if obs.ndim != 3 or obs.shape[-1] != OBS_DIM:
            raise ValueError(f"expected observations of shape [B, L, {OBS_DIM}], got {obs.shape}")
        B, L, _ = obs.shape
        p = self.params
        out = {}
        for m in MODALITIES:
            h = Tensor(obs[:, :, OBS_SLICES[m]].reshape(B * L, -1))
            h = ad.dense(h, p[f"enc.{m}.w0"], p[f"enc.{m}.b0"], "tanh")
            h = ad.dense(h, p[f"enc.{m}.w1"], p[f"enc.{m}.b1"], "tanh")
            h = ad.dense(h, p[f"enc.{m}.w2"], p[f"enc.{m}.b2"], "identity")
            out[m] = ad.reshape(h, (B, L, self.config.latent_dim))
        return out

    def tokens(self, latents: Mapping[str, Tensor]) -> Tensor:
        B, L, D = latents[MODALITIES[0]].shape
        stacked = ad.stack([latents[m] for m in MODALITIES], axis=2)  # B, L, 5, D
        return ad.reshape(stacked, (B, L * len(MODALITIES), D))

    def temporal_aggregate(self, tokens: Tensor) -> Tensor:
        """Causal transformer output at the final token, [B, D]."""
        p = self.params
        if tokens.shape[1] > self.config.max_tokens:
            raise ValueError(f"{tokens.shape[1]} tokens exceed max context {self.config.max_tokens}")
        h = ad.causal_self_attention(
            tokens, {"pos": p["tf.pos"], "wq": p["tf.wq"], "wk": p["tf.wk"], "wv": p["tf.wv"],
                     "wo": p["tf.wo"]}, last_only=True)
        ff = ad.dense(h, p["tf.ff_w1"], p["tf.ff_b1"], "tanh")
        return ad.add(h, ad.dense(ff, p["tf.ff_w2"], p["tf.ff_b2"], "identity"))

    def head(self, ctx: Tensor) -> GmmParams:
        C, A = self.config.gmm_components, self.config.action_dim
        B = ctx.shape[0]
        out = ad.dense(ctx, self.params["head.w"], self.params["head.b"], "identity")
        logits = out[:, :C]
        means = ad.reshape(out[:, C:C + C * A], (B, C, A))
        log_scales = ad.clamp(ad.reshape(out[:, C + C * A:], (B, C, A)), LOG_SCALE_MIN, LOG_SCALE_MAX)
        return GmmParams(logits, means, log_scales)

    def forward_full(self, obs) -> ForwardOutput:
        if self.frozen:
            with ad.no_grad():
                return self._forward(obs)
        return self._forward(obs)

    def _forward(self, obs) -> ForwardOutput:
        latents = self.encode(obs)
        ctx = self.temporal_aggregate(self.tokens(latents))
        gmm = self.head(ctx)
        for name, t in (("context token", ctx), ("gmm logits", gmm.logits), ("gmm means", gmm.means)):
            if not np.isfinite(t.data).all():
                bad = [k for k, v in self.params.items() if not np.isfinite(v.data).all()]
                raise FloatingPointError(f"non-finite {name} in policy forward; non-finite params: {bad}")
        return ForwardOutput(latents, gmm)

    def forward(self, obs) -> GmmParams:
        return self.forward_full(obs).gmm

    def mode_action(self, obs) -> np.ndarray:
        """Mean of the highest-weight component per row (deterministic evaluation)."""
        with ad.no_grad():
            g = self._forward(obs).gmm
        c = np.argmax(g.logits.data, axis=1)
        return g.means.data[np.arange(len(c)), c]


def policy_forward(obs_window, policy: Policy) -> GmmParams:
    """Single unbatched window [T, OBS_DIM] (T >= 1), padded/truncated to context_len."""
    obs_window = np.asarray(obs_window, dtype=float)
    if obs_window.ndim != 2 or len(obs_window) < 1:
        raise ValueError("window must be [T, OBS_DIM] with T >= 1")
    w = left_pad_window(obs_window, policy.config.context_len)
    return policy.forward(w[None])


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, policy: Policy, meta: dict | None = None) -> None:
    header = {"format_version": CHECKPOINT_VERSION, "config": policy.config.to_dict(),
              "shapes": {k: list(v.shape) for k, v in policy.params.items()}, "meta": meta or {}}
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update({f"p/{k}": v.data for k, v in policy.params.items()})
    # npz layout written by hand with a fixed timestamp so identical weights give identical bytes
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            with zf.open(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arr), allow_pickle=False)


def load_checkpoint(path, frozen: bool = False) -> tuple[Policy, dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("p/")}
    except (OSError, ValueError, KeyError) as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')!r}")
    for k, shape in header["shapes"].items():
        if k not in arrays or list(arrays[k].shape) != shape:
            raise ValueError(f"corrupt checkpoint {path}: tensor {k} missing or mis-shaped")
    cfg = PolicyConfig(**header["config"])
    params = {k: Tensor(v, requires_grad=not frozen, name=k) for k, v in arrays.items()}
    return Policy(cfg, params, frozen=frozen), header.get("meta", {})
