"""Pure-numpy reference kernels; used when the compiled module is unavailable."""

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def gmm_logpdf(logits, means, log_scales, x):
    """Diagonal-GMM log density per row. Returns (logp [M], responsibilities [M, C])."""
    A = x.shape[-1]
    m = logits.max(axis=1, keepdims=True)
    log_w = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
    z = (x[:, None, :] - means) * np.exp(-log_scales)
    comp = -0.5 * (z * z).sum(axis=2) - log_scales.sum(axis=2) - 0.5 * A * LOG_2PI
    joint = log_w + comp
    jm = joint.max(axis=1, keepdims=True)
    lp = jm[:, 0] + np.log(np.exp(joint - jm).sum(axis=1))
    resp = np.exp(joint - lp[:, None])
    return lp, resp


def gmm_logpdf_grad(logits, means, log_scales, x, resp, g):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True)
    gr = g[:, None] * resp
    d_logits = gr - g[:, None] * w
    diff = x[:, None, :] - means
    inv_var = np.exp(-2.0 * log_scales)
    t = gr[:, :, None] * diff * inv_var
    d_means = t
    d_log_scales = gr[:, :, None] * (diff * diff * inv_var - 1.0)
    d_x = -t.sum(axis=1)
    return d_logits, d_means, d_log_scales, d_x


def render_grids(obj_pos, signatures, arm, grid, patch):
    """Workspace feature grid plus arm-centred crop, both flattened row-major.

    Object cells carry the object's signature; the arm cell is -1 when empty
    and the negated signature when it overlaps an object.
    """
    view = np.zeros((grid, grid))
    for (px, py), sig in zip(obj_pos, signatures):
        r = min(int(py * grid), grid - 1)
        c = min(int(px * grid), grid - 1)
        view[r, c] = sig
    ar = min(int(arm[1] * grid), grid - 1)
    ac = min(int(arm[0] * grid), grid - 1)
    view[ar, ac] = -view[ar, ac] if view[ar, ac] != 0.0 else -1.0
    half = patch // 2
    eye = np.zeros((patch, patch))
    r0, r1 = max(ar - half, 0), min(ar + half + 1, grid)
    c0, c1 = max(ac - half, 0), min(ac + half + 1, grid)
    eye[r0 - (ar - half):r1 - (ar - half), c0 - (ac - half):c1 - (ac - half)] = view[r0:r1, c0:c1]
    return view.reshape(-1), eye.reshape(-1)
