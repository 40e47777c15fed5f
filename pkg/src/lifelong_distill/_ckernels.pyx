# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels mirroring _kernels_py."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


def gmm_logpdf(const double[:, ::1] logits, const double[:, :, ::1] means,
               const double[:, :, ::1] log_scales, const double[:, ::1] x):
    cdef Py_ssize_t M = logits.shape[0], C = logits.shape[1], A = x.shape[1]
    cdef Py_ssize_t i, c, a
    cdef double m, s, lse_w, comp, z, jm, tot
    lp_arr = np.empty(M)
    resp_arr = np.empty((M, C))
    cdef double[::1] lp = lp_arr
    cdef double[:, ::1] resp = resp_arr
    for i in range(M):
        m = logits[i, 0]
        for c in range(1, C):
            if logits[i, c] > m:
                m = logits[i, c]
        s = 0.0
        for c in range(C):
            s += exp(logits[i, c] - m)
        lse_w = m + log(s)
        for c in range(C):
            comp = 0.0
            for a in range(A):
                z = (x[i, a] - means[i, c, a]) * exp(-log_scales[i, c, a])
                comp += -0.5 * z * z - log_scales[i, c, a]
            resp[i, c] = logits[i, c] - lse_w + comp - 0.5 * A * LOG_2PI
        jm = resp[i, 0]
        for c in range(1, C):
            if resp[i, c] > jm:
                jm = resp[i, c]
        tot = 0.0
        for c in range(C):
            tot += exp(resp[i, c] - jm)
        lp[i] = jm + log(tot)
        for c in range(C):
            resp[i, c] = exp(resp[i, c] - lp[i])
    return lp_arr, resp_arr


def gmm_logpdf_grad(const double[:, ::1] logits, const double[:, :, ::1] means,
                    const double[:, :, ::1] log_scales, const double[:, ::1] x,
                    const double[:, ::1] resp, const double[::1] g):
    cdef Py_ssize_t M = logits.shape[0], C = logits.shape[1], A = x.shape[1]
    cdef Py_ssize_t i, c, a
    cdef double m, s, gr, diff, inv_var, t
    dl_arr = np.empty((M, C))
    dm_arr = np.empty((M, C, A))
    ds_arr = np.empty((M, C, A))
    dx_arr = np.zeros((M, A))
    cdef double[:, ::1] dl = dl_arr
    cdef double[:, :, ::1] dm = dm_arr
    cdef double[:, :, ::1] ds = ds_arr
    cdef double[:, ::1] dx = dx_arr
    for i in range(M):
        m = logits[i, 0]
        for c in range(1, C):
            if logits[i, c] > m:
                m = logits[i, c]
        s = 0.0
        for c in range(C):
            s += exp(logits[i, c] - m)
        for c in range(C):
            gr = g[i] * resp[i, c]
            dl[i, c] = gr - g[i] * (exp(logits[i, c] - m) / s)
            for a in range(A):
                diff = x[i, a] - means[i, c, a]
                inv_var = exp(-2.0 * log_scales[i, c, a])
                t = gr * diff * inv_var
                dm[i, c, a] = t
                ds[i, c, a] = gr * (diff * diff * inv_var - 1.0)
                dx[i, a] -= t
    return dl_arr, dm_arr, ds_arr, dx_arr


def render_grids(const double[:, ::1] obj_pos, const double[::1] signatures, const double[::1] arm,
                 int grid, int patch):
    cdef Py_ssize_t n = obj_pos.shape[0], i, r, c, ar, ac, half = patch // 2, rr, cc
    view_arr = np.zeros(grid * grid)
    eye_arr = np.zeros(patch * patch)
    cdef double[::1] view = view_arr
    cdef double[::1] eye = eye_arr
    for i in range(n):
        r = <Py_ssize_t>(obj_pos[i, 1] * grid)
        c = <Py_ssize_t>(obj_pos[i, 0] * grid)
        if r > grid - 1:
            r = grid - 1
        if c > grid - 1:
            c = grid - 1
        view[r * grid + c] = signatures[i]
    ar = <Py_ssize_t>(arm[1] * grid)
    ac = <Py_ssize_t>(arm[0] * grid)
    if ar > grid - 1:
        ar = grid - 1
    if ac > grid - 1:
        ac = grid - 1
    if view[ar * grid + ac] != 0.0:
        view[ar * grid + ac] = -view[ar * grid + ac]
    else:
        view[ar * grid + ac] = -1.0
    for r in range(patch):
        rr = ar - half + r
        if rr < 0 or rr >= grid:
            continue
        for c in range(patch):
            cc = ac - half + c
            if cc < 0 or cc >= grid:
                continue
            eye[r * patch + c] = view[rr * grid + cc]
    return view_arr, eye_arr
