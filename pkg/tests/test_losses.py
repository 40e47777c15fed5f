import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lifelong_distill import autodiff as ad
from lifelong_distill.autodiff import Tensor
from lifelong_distill.gmm import GaussianDiag, gaussian_kl_closed_form, single_component
from lifelong_distill.losses import (LossWeights, WindowBatch, bc_nll, distill_features, l_distill, l_policy,
                                     modality_l2, total_loss)
from lifelong_distill.policy import GmmParams, Policy, PolicyConfig

from conftest import SMALL, random_obs

W_ALL = LossWeights(0.3, 0.2, 0.15, 0.4)


def batch(rng, B, L=2):
    return WindowBatch(random_obs(rng, B, L), rng.uniform(-1, 1, (B, 3)))


def test_weights_presets_and_validation():
    assert LossWeights.preset("object") == LossWeights(0.05, 0.05, 0.05, 0.05)
    assert LossWeights.preset("spatial") == LossWeights(0.05, 0.05, 0.05, 0.05)
    assert LossWeights.preset("goal") == LossWeights(0.25, 0.05, 0.05, 0.25)
    assert LossWeights.zeros().is_zero()
    with pytest.raises(ValueError):
        LossWeights(lambda_p=-0.1)


def test_bc_nll_examples():
    g = single_component([0.4], [1.0])
    batched = GmmParams(ad.reshape(g.logits, (1, 1)), ad.reshape(g.means, (1, 1, 1)),
                        ad.reshape(g.log_scales, (1, 1, 1)))
    assert float(bc_nll(batched, [[0.4]]).data) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    vals = [float(bc_nll(batched, [[0.4 + d]]).data) for d in (0.0, 0.1, 0.5, 1.0, 2.0)]
    assert vals == sorted(vals) and len(set(vals)) == len(vals)
    with pytest.raises(ValueError, match="non-empty"):
        bc_nll(GmmParams.from_arrays(np.zeros((0, 1)), np.zeros((0, 1, 1)), np.zeros((0, 1, 1))), np.zeros((0, 1)))


def test_bc_nll_is_mean_of_rows(rng):
    pol = Policy.create(SMALL, 0)
    b = batch(rng, 5)
    whole = float(bc_nll(pol.forward(b.obs), b.actions).data)
    rows = [float(bc_nll(pol.forward(b.obs[i:i + 1]), b.actions[i:i + 1]).data) for i in range(5)]
    assert whole == pytest.approx(np.mean(rows), abs=1e-12)


def test_modality_l2_examples():
    f = Tensor(np.random.default_rng(0).standard_normal((3, 2, 64)))
    assert float(modality_l2(f, f).data) == 0.0
    assert float(modality_l2(Tensor(np.ones((1, 1, 64))), np.zeros((1, 1, 64))).data) == 64.0
    d = np.random.default_rng(1).standard_normal((2, 3, 64))
    one = float(modality_l2(Tensor(d), np.zeros_like(d)).data)
    assert float(modality_l2(Tensor(2 * d), np.zeros_like(d)).data) == pytest.approx(4 * one, rel=1e-14)
    with pytest.raises(ValueError, match="disagree"):
        modality_l2(Tensor(np.ones((1, 2, 64))), np.ones((1, 3, 64)))


def test_distill_features_identical_and_teacher_gradient(rng):
    student = Policy.create(SMALL, 1)
    teacher = student.snapshot()
    obs = random_obs(rng, 3, 2)
    assert all(float(t.data) == 0.0 for t in distill_features(student.encode(obs), teacher.encode(obs)))
    student.params["enc.agentview.w0"].data += 0.05
    image, text, extra = distill_features(student.encode(obs), teacher.encode(obs))
    assert float(image.data) > 0 and float(text.data) == 0.0
    loss = ad.add(ad.add(image, text), extra)
    g = ad.backprop(loss, list(teacher.params.values()))
    assert not any(x.any() for x in g)


def test_distill_features_gradient_fd(rng):
    cfg = PolicyConfig(latent_dim=4, context_len=2, gmm_components=2, encoder_hidden=4, ffn_hidden=4)
    student = Policy.create(cfg, 2)
    teacher = Policy.create(cfg, 3).snapshot()
    obs = random_obs(rng, 2, 2)
    t_lat = teacher.encode(obs)

    def f():
        i, t, e = distill_features(student.encode(obs), t_lat)
        return ad.add(ad.add(i, t), e)

    enc = {k: v for k, v in student.params.items() if k.startswith("enc.")}
    assert ad.finite_diff_check(f, enc, eps=1e-5) <= 1e-5


def test_l_policy_examples(rng):
    p = GmmParams.from_arrays(rng.standard_normal((3, 2)), rng.standard_normal((3, 2, 3)),
                              rng.uniform(-1, 0, (3, 2, 3)))
    assert float(l_policy(p, p, 8, np.random.default_rng(0)).data) == 0.0
    want = gaussian_kl_closed_form(GaussianDiag([0.2, 0.0, -0.1], [0.9, 1.0, 0.7]),
                                   GaussianDiag([0.0, 0.3, 0.0], [1.0, 1.2, 0.8]))
    got = float(l_policy(single_component([0.2, 0.0, -0.1], [0.9, 1.0, 0.7]),
                         single_component([0.0, 0.3, 0.0], [1.0, 1.2, 0.8]), 200_000,
                         np.random.default_rng(1)).data)
    assert abs(got - want) <= 0.01


def test_l_policy_gradient_fd_and_teacher_constant(rng):
    s = GmmParams.from_arrays(rng.standard_normal((2, 2)), rng.standard_normal((2, 2, 3)),
                              rng.uniform(-0.5, 0.2, (2, 2, 3)), requires_grad=True)
    t = GmmParams.from_arrays(rng.standard_normal((2, 2)), rng.standard_normal((2, 2, 3)),
                              rng.uniform(-0.5, 0.2, (2, 2, 3)), requires_grad=True)
    f = lambda: l_policy(s, t, 5, np.random.default_rng(4))
    assert ad.finite_diff_check(f, [s.logits, s.means, s.log_scales], eps=1e-5) <= 1e-4
    g = ad.backprop(f(), [t.logits, t.means, t.log_scales])
    assert not any(x.any() for x in g)


def test_l_distill_examples(rng):
    student = Policy.create(SMALL, 4)
    teacher = Policy.create(SMALL, 5).snapshot()
    ex = batch(rng, 4)
    assert l_distill(student, teacher, ex, LossWeights.zeros(), 4, np.random.default_rng(0)).total == 0.0
    same = l_distill(student, student.snapshot(), ex, W_ALL, 4, np.random.default_rng(0))
    assert same.total == 0.0 and same.l_policy == 0.0 and same.l_image == 0.0
    parts = l_distill(student, teacher, ex, W_ALL, 4, np.random.default_rng(0))
    assert parts.total == pytest.approx(parts.distill_value(W_ALL), abs=1e-12)
    # each term computed on its own gives the same components
    i, t, e = (float(x.data) for x in distill_features(student.encode(ex.obs), teacher.encode(ex.obs)))
    p = float(l_policy(student.forward(ex.obs), teacher.forward(ex.obs), 4, np.random.default_rng(0)).data)
    assert (parts.l_image, parts.l_text, parts.l_extra, parts.l_policy) == pytest.approx((i, t, e, p), abs=1e-12)


def test_total_loss_first_step_is_bc(rng):
    pol = Policy.create(SMALL, 6)
    cur = batch(rng, 4)
    lb = total_loss(pol, None, cur, None, W_ALL, 4, np.random.default_rng(0))
    assert lb.total == lb.bc_nll == float(bc_nll(pol.forward(cur.obs), cur.actions).data)
    empty = WindowBatch.empty(2, cur.obs.shape[2], 3)
    assert total_loss(pol, pol.snapshot(), cur, empty, W_ALL, 4, np.random.default_rng(0)).total == lb.total
    with pytest.raises(ValueError):
        total_loss(pol, None, empty, None, W_ALL, 4, np.random.default_rng(0))


def test_total_loss_zero_weights_is_union_bc(rng):
    pol = Policy.create(SMALL, 7)
    teacher = Policy.create(SMALL, 8).snapshot()
    cur, ex = batch(rng, 3), batch(rng, 5)
    lb = total_loss(pol, teacher, cur, ex, LossWeights.zeros(), 4, np.random.default_rng(0))
    union = bc_nll(pol.forward(np.concatenate([cur.obs, ex.obs])), np.concatenate([cur.actions, ex.actions]))
    assert lb.total == lb.bc_nll
    assert lb.total == pytest.approx(float(union.data), abs=1e-12)


def test_zero_point_student_equals_teacher(rng):
    pol = Policy.create(SMALL, 9)
    cur, ex = batch(rng, 3), batch(rng, 3)
    lb = total_loss(pol, pol.snapshot(), cur, ex, W_ALL, 8, np.random.default_rng(0))
    assert (lb.l_agentview, lb.l_handeye, lb.l_text, lb.l_extra, lb.l_policy) == (0.0,) * 5
    assert lb.total == lb.bc_nll


def test_total_loss_full_gradient_fd(rng):
    cfg = PolicyConfig(latent_dim=4, context_len=2, gmm_components=2, encoder_hidden=4, ffn_hidden=4)
    student = Policy.create(cfg, 10)
    teacher = Policy.create(cfg, 11).snapshot()
    cur, ex = batch(rng, 2), batch(rng, 2)
    f = lambda: total_loss(student, teacher, cur, ex, W_ALL, 4, np.random.default_rng(3)).loss
    assert ad.finite_diff_check(f, student.params, eps=1e-3, order=4) <= 1e-4


@given(st.integers(0, 2**31), st.tuples(*[st.floats(0, 2)] * 4), st.integers(0, 3))
def test_linearity_and_recomposition(seed, lam, drop):
    rng = np.random.default_rng(seed)
    student = Policy.create(SMALL, seed % 5)
    teacher = Policy.create(SMALL, seed % 5 + 1).snapshot()
    cur, ex = batch(rng, 2), batch(rng, 3)
    w = LossWeights(*lam)
    full = total_loss(student, teacher, cur, ex, w, 4, np.random.default_rng(seed))
    assert abs(full.total - (full.bc_nll + full.distill_value(w))) <= 1e-10
    assert min(full.l_agentview, full.l_handeye, full.l_text, full.l_extra) >= 0.0
    name = ("lambda_i", "lambda_t", "lambda_e", "lambda_p")[drop]
    cut = total_loss(student, teacher, cur, ex, dataclasses.replace(w, **{name: 0.0}), 4,
                     np.random.default_rng(seed))
    comp = {"lambda_i": full.l_image, "lambda_t": full.l_text, "lambda_e": full.l_extra,
            "lambda_p": full.l_policy}[name]
    assert abs((full.total - cut.total) - getattr(w, name) * comp) <= 1e-10


def test_teacher_never_receives_gradient(rng):
    student = Policy.create(SMALL, 12)
    teacher = Policy.create(SMALL, 13).trainable_copy()  # even a trainable teacher stays constant
    cur, ex = batch(rng, 2), batch(rng, 3)
    lb = total_loss(student, teacher, cur, ex, W_ALL, 4, np.random.default_rng(0))
    g = ad.backprop(lb.loss, teacher.params)
    assert not any(v.any() for v in g.values())
