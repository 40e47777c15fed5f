import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lifelong_distill import autodiff as ad
from lifelong_distill.gmm import (GaussianDiag, gaussian_kl_closed_form, gmm_log_pdf, gmm_sample, mc_kl,
                                  sample_components, single_component)
from lifelong_distill.policy import GmmParams

from oracles import mixture_pdf, quadrature_kl_1d, softmax


def mix1d(w_logits, mu, sd):
    return GmmParams.from_arrays(np.asarray(w_logits, float), np.asarray(mu, float)[:, None],
                                 np.log(np.asarray(sd, float))[:, None])


def test_standard_normal_at_zero():
    v = float(gmm_log_pdf(single_component([0.0], [1.0]), [0.0]).data)
    assert v == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    assert v == pytest.approx(-0.918939, abs=1e-6)


def test_symmetric_mixture_at_symmetry_point():
    p = mix1d([0.0, 0.0], [-1.0, 1.0], [0.5, 0.5])
    one = math.exp(-0.5 * 4) / (0.5 * math.sqrt(2 * math.pi))
    assert float(gmm_log_pdf(p, [0.0]).data) == pytest.approx(math.log(one), abs=1e-12)


def test_density_normalises_on_grid():
    p = mix1d([0.3, -0.2, 1.0], [-2.0, 0.5, 3.0], [0.7, 1.2, 0.4])
    x = np.linspace(-10, 10, 20001)
    n = len(x)
    lp = ad.gmm_log_prob(np.repeat(p.logits.data[None], n, 0), np.repeat(p.means.data[None], n, 0),
                         np.repeat(p.log_scales.data[None], n, 0), x[:, None])
    assert abs(np.trapezoid(np.exp(lp.data), x) - 1.0) <= 1e-3


def test_log_pdf_matches_oracle():
    rng = np.random.default_rng(0)
    lg, mu, sd = rng.standard_normal(3), rng.standard_normal(3), rng.uniform(0.3, 2, 3)
    x = rng.uniform(-3, 3, 7)
    ours = [float(gmm_log_pdf(mix1d(lg, mu, sd), [xi]).data) for xi in x]
    assert np.allclose(ours, np.log(mixture_pdf(x, softmax(lg), mu, sd)), atol=1e-12)


@given(st.floats(-30, 30), st.integers(0, 2**31))
def test_logit_shift_invariance(c, seed):
    rng = np.random.default_rng(seed)
    lg, mu, ls = rng.standard_normal(3), rng.standard_normal((3, 2)), rng.uniform(-1, 1, (3, 2))
    a = rng.standard_normal(2)
    base = float(gmm_log_pdf(GmmParams.from_arrays(lg, mu, ls), a).data)
    shifted = float(gmm_log_pdf(GmmParams.from_arrays(lg + c, mu, ls), a).data)
    assert shifted == pytest.approx(base, abs=1e-10)


def test_degenerate_scale_samples_at_mean():
    p = single_component([0.3, -0.2, 0.9], [1e-4] * 3)
    s = gmm_sample(p, 50, np.random.default_rng(0)).data
    assert np.abs(s - [0.3, -0.2, 0.9]).max() <= 1e-3


def test_sampling_deterministic_and_lln():
    p = single_component([2.0], [1.0])
    a = gmm_sample(p, 100_000, np.random.default_rng(5)).data
    b = gmm_sample(p, 100_000, np.random.default_rng(5)).data
    assert a.tobytes() == b.tobytes()
    assert abs(a.mean() - 2.0) <= 0.02


def test_component_frequencies():
    lg = np.log(np.array([[0.2, 0.5, 0.3]]))
    comp = sample_components(lg, np.random.default_rng(1).random((1, 60_000)))
    freq = np.bincount(comp[0], minlength=3) / 60_000
    assert np.allclose(freq, [0.2, 0.5, 0.3], atol=0.01)


def test_pathwise_sample_gradients():
    p = GmmParams.from_arrays(np.zeros((1, 2)), np.zeros((1, 2, 1)), np.zeros((1, 2, 1)), requires_grad=True)
    s = gmm_sample(p, 8, np.random.default_rng(0), pathwise=True)
    g = ad.backprop(ad.sum_(s), [p.means, p.log_scales, p.logits])
    assert g[0].sum() == pytest.approx(8.0)  # d/dmu of each sample is 1 for its component
    assert not g[2].any()  # selection is gradient-free
    frozen = gmm_sample(p, 8, np.random.default_rng(0), pathwise=False)
    assert not frozen.requires_grad and np.array_equal(frozen.data, s.data)


def test_closed_form_examples():
    assert gaussian_kl_closed_form(GaussianDiag([0.3], [0.7]), GaussianDiag([0.3], [0.7])) == 0.0
    assert gaussian_kl_closed_form(GaussianDiag([1.0], [1.0]), GaussianDiag([0.0], [1.0])) == pytest.approx(0.5)
    assert gaussian_kl_closed_form(GaussianDiag([0.0], [2.0]), GaussianDiag([0.0], [1.0])) == \
        pytest.approx(0.806853, abs=1e-6)
    with pytest.raises(ValueError):
        gaussian_kl_closed_form(GaussianDiag([0.0], [1.0]), GaussianDiag([0.0, 0.0], [1.0, 1.0]))
    with pytest.raises(ValueError):
        GaussianDiag([0.0], [1e-5])


@given(st.integers(0, 2**31), st.integers(1, 8))
def test_mc_kl_self_is_exactly_zero(seed, n):
    rng = np.random.default_rng(seed)
    p = GmmParams.from_arrays(rng.standard_normal((2, 3)), rng.standard_normal((2, 3, 2)),
                              rng.uniform(-2, 1, (2, 3, 2)))
    est = mc_kl(p, p, n, np.random.default_rng(seed + 1))
    assert float(est) == 0.0 and not est.terms.any()
    assert est.terms.shape == (2, n) and float(est) == est.terms.mean()


def test_mc_kl_single_component_matches_closed_form():
    mu_p, sd_p, mu_q, sd_q = [0.5, -0.3], [0.8, 1.1], [0.0, 0.2], [1.0, 0.9]
    want = gaussian_kl_closed_form(GaussianDiag(mu_p, sd_p), GaussianDiag(mu_q, sd_q))
    got = float(mc_kl(single_component(mu_p, sd_p), single_component(mu_q, sd_q), 200_000,
                      np.random.default_rng(0)))
    assert abs(got - want) <= 0.01


def test_mc_kl_mixture_matches_quadrature():
    p = (softmax(np.array([0.2, -0.4])), np.array([-1.0, 1.5]), np.array([0.6, 0.9]))
    q = (softmax(np.array([0.0, 0.0])), np.array([-0.5, 1.0]), np.array([1.0, 1.0]))
    want = quadrature_kl_1d(p, q)
    got = float(mc_kl(mix1d(np.log(p[0]), p[1], p[2]), mix1d(np.log(q[0]), q[1], q[2]), 200_000,
                      np.random.default_rng(1)))
    assert abs(got - want) <= 0.02


def test_mc_kl_rejects_dimension_mismatch():
    with pytest.raises(ValueError, match="disagree"):
        mc_kl(single_component([0.0], [1.0]), single_component([0.0, 0.0], [1.0, 1.0]), 4,
              np.random.default_rng(0))


def test_mc_kl_mean_over_seeds_converges():
    p, q = mix1d([0.0, 1.0], [-1.0, 1.0], [0.5, 0.8]), mix1d([0.0], [0.0], [1.5])
    want = quadrature_kl_1d((softmax(np.array([0.0, 1.0])), np.array([-1.0, 1.0]), np.array([0.5, 0.8])),
                            (np.array([1.0]), np.array([0.0]), np.array([1.5])))
    vals = [float(mc_kl(p, q, 64, np.random.default_rng(s))) for s in range(400)]
    se = np.std(vals) / math.sqrt(len(vals))
    assert abs(np.mean(vals) - want) <= 4 * se + 1e-3


def test_mc_kl_gradient_matches_fd_with_frozen_noise():
    rng = np.random.default_rng(3)
    p = GmmParams.from_arrays(rng.standard_normal((2, 3)), rng.standard_normal((2, 3, 2)),
                              rng.uniform(-0.5, 0.3, (2, 3, 2)), requires_grad=True)
    q = GmmParams.from_arrays(rng.standard_normal((2, 3)), rng.standard_normal((2, 3, 2)),
                              rng.uniform(-0.5, 0.3, (2, 3, 2)))
    f = lambda: mc_kl(p, q, 6, np.random.default_rng(11)).value
    assert ad.finite_diff_check(f, [p.logits, p.means, p.log_scales], eps=1e-5) <= 1e-4
