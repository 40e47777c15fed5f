"""Compiled vs numpy kernels: timing and agreement.

    python benchmarks/bench_kernels.py [--repeat N]

Sizes follow training use: GMM density over B*N rows (batch 8 exemplars x
16 KL samples, plus BC batches), grid rendering once per simulator step.
"""

import argparse
import timeit

import numpy as np

from lifelong_distill import _kernels_py as py

try:
    from lifelong_distill import _ckernels as cy
except ImportError:
    cy = None


def gmm_inputs(M, C=5, A=3, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(M, C)), rng.normal(size=(M, C, A)), rng.uniform(-3, 0.5, (M, C, A)),
            rng.normal(size=(M, A)))


def grid_inputs(n_obj=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, (n_obj, 2)), rng.uniform(0.25, 1.0, n_obj), rng.uniform(0, 1, 2)


def bench(fn, repeat):
    t = timeit.Timer(fn)
    n, _ = t.autorange()
    return min(t.repeat(repeat, n)) / n


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':<28} {'numpy':>12} {'cython':>12} {'speedup':>8} {'max |diff|':>11}")
    cases = []
    for M in (16, 128, 1024):
        args_ = gmm_inputs(M)
        cases.append((f"gmm_logpdf M={M}", lambda a=args_: py.gmm_logpdf(*a), lambda a=args_: cy.gmm_logpdf(*a),
                      lambda a=args_: (py.gmm_logpdf(*a)[0], cy.gmm_logpdf(*a)[0])))
        lp, resp = py.gmm_logpdf(*args_)
        g = np.ones(M)
        cases.append((f"gmm_logpdf_grad M={M}",
                      lambda a=args_, r=resp, g=g: py.gmm_logpdf_grad(*a, r, g),
                      lambda a=args_, r=resp, g=g: cy.gmm_logpdf_grad(*a, r, g),
                      lambda a=args_, r=resp, g=g: (np.concatenate([x.ravel() for x in py.gmm_logpdf_grad(*a, r, g)]),
                                                    np.concatenate([x.ravel() for x in cy.gmm_logpdf_grad(*a, r, g)]))))
    gi = grid_inputs()
    cases.append(("render_grids 3 objects", lambda: py.render_grids(*gi, 8, 5), lambda: cy.render_grids(*gi, 8, 5),
                  lambda: (np.concatenate(py.render_grids(*gi, 8, 5)), np.concatenate(cy.render_grids(*gi, 8, 5)))))
    for name, f_py, f_cy, pair in cases:
        t_py, t_cy = bench(f_py, args.repeat), bench(f_cy, args.repeat)
        a, b = pair()
        diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
        print(f"{name:<28} {t_py * 1e6:>10.1f}us {t_cy * 1e6:>10.1f}us {t_py / t_cy:>7.1f}x {diff:>11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
