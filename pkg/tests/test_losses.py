import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avloc import autodiff as ad
from avloc.autodiff import Tensor, grad_check
from avloc.losses import (LossConfig, avpm_loss, scaled_sq_dist, spatial_distribution, sra_loss, ssl_loss,
                          total_loss, triplet_term)

CFG = LossConfig()


def unit_rows(rng, n, c):
    x = np.abs(rng.normal(size=(n, c)))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def avpm_loop(v_att, v, a, tau, delta):
    """Direct double sum over ordered pairs."""
    def d(x, y):
        return float(np.sum(((x - y) / tau) ** 2))
    n = len(v_att)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            total += d(v_att[i], a[i]) + max(delta - d(v_att[i], a[j]), 0.0)
            total += d(v_att[i], v[i]) + max(delta - d(v_att[i], v[j]), 0.0)
    return total / (n * (n - 1))


# ---- triplet / avpm ------------------------------------------------------

def test_triplet_vanishes_when_anchor_is_positive_and_negative_far():
    a = np.array([1.0, 0.0])
    assert triplet_term(a, a, np.array([0.0, 1.0]), tau=1.0, delta=1.0).item() == 0.0
    assert triplet_term(a, a, np.array([-1.0, 0.0]), tau=0.03, delta=25.0).item() == 0.0


def test_triplet_saturates_at_margin():
    a = np.array([0.6, 0.8])
    assert triplet_term(a, a, a, tau=0.03, delta=25.0).item() == 25.0


def test_scaled_distance_uses_tau_inside_the_norm():
    # (0.03, 0) / 0.03 = (1, 0)
    assert scaled_sq_dist(np.array([0.03, 0.0]), np.zeros(2), 0.03).item() == pytest.approx(1.0, abs=1e-15)


def test_avpm_identical_rows_cost_two_margins():
    v = np.tile([[0.6, 0.8]], (5, 1))
    assert avpm_loss(v, v, v, CFG).item() == pytest.approx(2 * CFG.delta, abs=1e-12)


def test_avpm_two_orthogonal_samples_by_hand():
    cfg = LossConfig(tau=1.0, delta=0.5)
    e1, e2 = np.eye(2)
    v_att = np.stack([e1, e2])
    a = np.stack([e2, e1])  # each anchor is orthogonal to its audio: D = 2
    v = v_att.copy()  # visual positive coincides: D = 0
    # negatives: D(v_att_i, a_j) = 0 -> hinge 0.5 each; D(v_att_i, v_j) = 2 -> hinge 0
    # per ordered pair: 2 + 0.5 + 0 + 0; two pairs, divided by 2
    assert avpm_loss(v_att, v, a, cfg).item() == pytest.approx(2.5, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_avpm_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n, c = 6, 5
    v_att, v, a = (unit_rows(rng, n, c) for _ in range(3))
    cfg = LossConfig(tau=0.5, delta=4.0)  # mix of active and inactive hinges
    assert avpm_loss(v_att, v, a, cfg).item() == pytest.approx(avpm_loop(v_att, v, a, 0.5, 4.0), rel=1e-12)


def test_avpm_batch_permutation_invariant():
    rng = np.random.default_rng(3)
    v_att, v, a = (unit_rows(rng, 7, 4) for _ in range(3))
    p = rng.permutation(7)
    assert avpm_loss(v_att[p], v[p], a[p], CFG).item() == pytest.approx(avpm_loss(v_att, v, a, CFG).item(),
                                                                        rel=1e-12, abs=1e-12)


def test_avpm_single_sample_warns_and_returns_zero(caplog):
    v = np.array([[1.0, 0.0]])
    with caplog.at_level(logging.WARNING):
        assert avpm_loss(v, v, v, CFG).item() == 0.0
    assert "no negatives" in caplog.text


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-1, 1)))
def test_avpm_nonnegative(x):
    assert avpm_loss(x, x[::-1], np.roll(x, 1, axis=0), CFG).item() >= 0.0


# ---- spatial distribution / sra ----------------------------------------------

def test_spatial_distribution_of_constant_map_is_uniform():
    f = np.full((2, 3, 3, 4), 0.7)
    np.testing.assert_allclose(spatial_distribution(f).data, np.full((2, 9), 1 / 9), rtol=0, atol=1e-15)


def test_spatial_distribution_two_cells():
    f = np.array([0.0, 1.0]).reshape(1, 1, 2, 1) * np.ones((1, 1, 2, 3))
    e = math.e
    np.testing.assert_allclose(spatial_distribution(f).data[0], [1 / (1 + e), e / (1 + e)], rtol=1e-7)


def test_spatial_distribution_argmax_and_rows():
    rng = np.random.default_rng(0)
    f = rng.random((3, 4, 4, 2))
    f[1, 2, 3] += 5.0
    g = spatial_distribution(f).data
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(g > 0)
    assert np.argmax(g[1]) == 2 * 4 + 3


def test_sra_scalar_example():
    p = np.array([[0.75, 0.25]])
    q = np.array([[0.5, 0.5]])
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert sra_loss(p, q).item() == pytest.approx(expected, abs=1e-15)
    assert sra_loss(p, q).item() == pytest.approx(0.13081, abs=1e-5)


def test_sra_zero_for_identical():
    rng = np.random.default_rng(1)
    p = rng.random((4, 9)) + 0.1
    p /= p.sum(axis=1, keepdims=True)
    assert abs(sra_loss(p, p).item()) < 1e-12


def test_sra_target_gets_no_gradient():
    p = Tensor(np.array([[0.7, 0.3]]), requires_grad=True)
    q = Tensor(np.array([[0.4, 0.6]]), requires_grad=True)
    with ad.Tape() as tape:
        loss = sra_loss(p, q)
    grads = tape.backward(loss)
    assert p not in grads
    np.testing.assert_allclose(grads[q], -p.data / q.data)


def test_sra_rejects_nonpositive():
    with pytest.raises(ValueError, match="strictly positive"):
        sra_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-8, 8)), arrays(np.float64, (3, 6), elements=st.floats(-8, 8)))
def test_sra_nonnegative(x, y):
    p = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    q = np.exp(y) / np.exp(y).sum(axis=1, keepdims=True)
    assert sra_loss(p, q).item() >= -1e-12


# ---- ssl -------------------------------------------------------------------

def _aligned_scene(audio_dirs, h=3, w=3):
    """Images aligned with their audio vector except a left column on a spare axis."""
    n, c = audio_dirs.shape
    f = np.repeat(audio_dirs[:, None, None, :], h, axis=1).repeat(w, axis=2)
    f = np.concatenate([f, np.zeros((n, h, w, 1))], axis=-1)
    f[:, :, 0] = 0.0
    f[:, :, 0, -1] = 1.0
    return f, np.concatenate([audio_dirs, np.zeros((n, 1))], axis=1)


def test_ssl_identical_pairs_give_ln2():
    f, a = _aligned_scene(np.array([[1.0, 0.0], [1.0, 0.0]]))
    # positive and negative pooled responses are equal; background is ~0
    assert ssl_loss(f, a, CFG).item() == pytest.approx(math.log(2), abs=1e-6)


def test_ssl_vanishes_when_positive_dominates():
    f, a = _aligned_scene(np.eye(3))
    assert ssl_loss(f, a, CFG).item() < 1e-5
    assert ssl_loss(f, a, LossConfig(ssl_temp=0.02)).item() < 1e-15


def test_ssl_needs_two_samples():
    with pytest.raises(ValueError, match="at least 2"):
        ssl_loss(np.ones((1, 2, 2, 3)), np.ones((1, 3)), CFG)


def test_ssl_batch_permutation_invariant():
    rng = np.random.default_rng(5)
    f = rng.random((4, 3, 3, 5))
    a = unit_rows(rng, 4, 5)
    p = rng.permutation(4)
    assert ssl_loss(f[p], a[p], CFG).item() == pytest.approx(ssl_loss(f, a, CFG).item(), rel=1e-12)


# ---- total -----------------------------------------------------------------

def test_total_loss_arithmetic():
    assert total_loss(1.0, 2.0, 0.5, CFG).item() == 8.0


def test_total_loss_ablation_identity():
    cfg = LossConfig(lambda1=0.0, lambda2=0.0)
    assert total_loss(1.2345, 99.0, 7.0, cfg).item() == 1.2345


@pytest.mark.parametrize("bad", ["ssl", "avpm", "sra"])
def test_total_loss_names_nonfinite_term(bad):
    parts = {"ssl": 1.0, "avpm": 1.0, "sra": 1.0, bad: float("nan")}
    with pytest.raises(FloatingPointError, match=bad):
        total_loss(parts["ssl"], parts["avpm"], parts["sra"], CFG)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5))
def test_total_loss_monotone_in_lambdas(l1, l2, b1, b2):
    parts = (0.3, 2.0, 0.4)
    lo = total_loss(*parts, LossConfig(lambda1=l1, lambda2=l2)).item()
    hi = total_loss(*parts, LossConfig(lambda1=l1 + b1, lambda2=l2 + b2)).item()
    assert hi >= lo


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
    with pytest.raises(ValueError):
        LossConfig(delta=-1.0)
    with pytest.raises(ValueError):
        LossConfig(ssl_pos_thresh=0.3, ssl_neg_thresh=0.4)


# ---- gradients ---------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    n, h, w, c = 3, 3, 3, 4
    feat = Tensor(rng.random((n, h, w, c)) + 0.05)
    feat_att = Tensor(rng.random((n, h, w, c)) + 0.05)
    feat_a = Tensor(rng.random((n, h, w, c)) + 0.05)
    vecs = [Tensor(rng.normal(size=(n, c))) for _ in range(3)]
    cfg = LossConfig(tau=0.5, delta=6.0)

    def unit(x):
        return ad.l2_normalize(x, axis=-1)

    assert grad_check(lambda x, y, z: avpm_loss(unit(x), unit(y), unit(z), cfg), vecs) < 1e-4
    # the attentive-visual side is a detached target, so only the audio side is probed
    target = spatial_distribution(feat_att).data
    assert grad_check(lambda y: sra_loss(target, spatial_distribution(y)), feat_a) < 1e-4
    # softer masks keep the finite differences away from the sigmoid's steep region
    assert grad_check(lambda f, a: ssl_loss(f, a, LossConfig(ssl_mask_temp=0.2)), [feat, vecs[0]]) < 1e-4
    assert grad_check(lambda f, a: ssl_loss(f, a, CFG), [feat, vecs[0]]) < 1e-4
