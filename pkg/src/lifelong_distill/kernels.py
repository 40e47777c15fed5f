"""Hot-loop kernels, compiled when available.

The Cython module ``_ckernels`` is preferred; setting
``LIFELONG_DISTILL_PURE_PYTHON=1`` (or a failed build) selects the numpy
implementations in ``_kernels_py``. ``BACKEND`` names the active choice.
"""

import os

import numpy as np

from . import _kernels_py

_py = _kernels_py
BACKEND = "python"
_c = None
if os.environ.get("LIFELONG_DISTILL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _c  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _c = None


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


if _c is not None:

    def gmm_logpdf(logits, means, log_scales, x):
        return _c.gmm_logpdf(_f64(logits), _f64(means), _f64(log_scales), _f64(x))

    def gmm_logpdf_grad(logits, means, log_scales, x, resp, g):
        return _c.gmm_logpdf_grad(_f64(logits), _f64(means), _f64(log_scales), _f64(x),
                                  _f64(resp), _f64(np.broadcast_to(g, (logits.shape[0],))))

    def render_grids(obj_pos, signatures, arm, grid=8, patch=5):
        return _c.render_grids(_f64(obj_pos).reshape(-1, 2), _f64(signatures), _f64(arm), grid, patch)

else:
    gmm_logpdf = _py.gmm_logpdf

    def gmm_logpdf_grad(logits, means, log_scales, x, resp, g):
        return _py.gmm_logpdf_grad(logits, means, log_scales, x, resp,
                                   np.broadcast_to(g, (logits.shape[0],)))

    def render_grids(obj_pos, signatures, arm, grid=8, patch=5):
        return _py.render_grids(np.asarray(obj_pos).reshape(-1, 2), signatures, arm, grid, patch)
