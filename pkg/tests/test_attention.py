import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avloc import autodiff as ad
from avloc.attention import (cosine_map, fuse_features, integrate_maps, minmax_normalize, similarity_map,
                             softmax_map, stage1_forward)
from avloc.autodiff import Tensor, grad_check
from avloc.encoders import build_audio_encoder, build_visual_encoder


def test_similarity_constant_features_equal_to_vector():
    v = np.array([[0.2, 0.5, 0.1]])
    f = np.broadcast_to(v[:, None, None, :], (1, 4, 4, 3))
    np.testing.assert_allclose(similarity_map(f, v).data, np.full((1, 4, 4), 1 / 16), rtol=1e-15)


def test_similarity_two_cells():
    f = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])  # 1 x 1 x 2 x 2
    v = np.array([[1.0, 0.0]])
    np.testing.assert_array_equal(similarity_map(f, v).data, [[[1.0, 0.0]]])


def test_similarity_zero_cosines_fall_back_to_uniform():
    f = np.zeros((2, 3, 3, 4))
    v = np.ones((2, 4))
    np.testing.assert_array_equal(similarity_map(f, v).data, np.full((2, 3, 3), 1 / 9))


def test_similarity_rejects_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        similarity_map(np.ones((1, 2, 2, 3)), np.ones((1, 4)))


def test_similarity_scale_invariance():
    rng = np.random.default_rng(0)
    f = rng.random((2, 5, 5, 6))
    v = rng.random((2, 6))
    ref = similarity_map(f, v).data
    # power-of-two scales are exact in floating point
    for a, b in [(2.0, 0.25), (1024.0, 8.0)]:
        np.testing.assert_array_equal(similarity_map(a * f, b * v).data, ref)
    np.testing.assert_allclose(similarity_map(3.7 * f, 0.3 * v).data, ref, rtol=1e-13)


def test_cosine_of_zero_feature_is_zero():
    f = np.zeros((1, 1, 2, 3))
    f[0, 0, 1] = [1.0, 0.0, 0.0]
    np.testing.assert_array_equal(cosine_map(f, np.array([[1.0, 0.0, 0.0]])).data, [[[0.0, 1.0]]])


def test_softmax_map_examples():
    np.testing.assert_allclose(softmax_map(np.array([[[0.0, math.log(2)]]])).data, [[[1 / 3, 2 / 3]]], rtol=1e-15)
    np.testing.assert_allclose(softmax_map(np.full((1, 3, 3), 0.2)).data, np.full((1, 3, 3), 1 / 9), rtol=1e-15)
    s = np.zeros((1, 5, 5))
    s[0, 3, 2] = 0.1
    m = softmax_map(s, temperature=0.5).data
    assert np.unravel_index(np.argmax(m[0]), (5, 5)) == (3, 2)
    with pytest.raises(ValueError):
        softmax_map(s, temperature=0.0)


def test_minmax_examples():
    x = np.arange(11.0).reshape(1, 11, 1, 1)
    np.testing.assert_allclose(minmax_normalize(x).data.ravel(), np.arange(11) / 10, rtol=1e-8)
    np.testing.assert_array_equal(minmax_normalize(np.full((2, 3, 3, 2), 4.0)).data, 0.0)
    np.testing.assert_allclose(minmax_normalize(np.array([[2.0, 4.0, 6.0]])).data, [[0.0, 0.5, 1.0]], atol=1e-8)


def test_minmax_is_per_sample():
    x = np.stack([np.arange(4.0), 10 * np.arange(4.0)]).reshape(2, 2, 2, 1)
    out = minmax_normalize(x).data
    np.testing.assert_allclose(out[0], out[1], atol=1e-8)


def test_fuse_examples():
    f = np.array([2.0, 3.0])
    np.testing.assert_array_equal(fuse_features(f, np.ones(2)).data, f)
    np.testing.assert_array_equal(fuse_features(f, np.zeros(2)).data, 0.0)
    np.testing.assert_array_equal(fuse_features(f, np.array([0.5, 1.0])).data, [1.0, 3.0])
    with pytest.raises(ad.ShapeError):
        fuse_features(np.ones(2), np.ones(3))


def test_integrate_examples():
    m = np.array([[[0.9, 0.1]]])
    u = np.array([[[0.5, 0.5]]])
    np.testing.assert_allclose(integrate_maps(m, u).data, [[[0.7, 0.3]]], rtol=1e-15)
    np.testing.assert_array_equal(integrate_maps(m, m).data, m)
    np.testing.assert_array_equal(integrate_maps(m, u).data, integrate_maps(u, m).data)


def test_argmax_transfer_under_uniform_audio_gate():
    rng = np.random.default_rng(2)
    f_v = rng.random((3, 6, 6, 5))
    v = rng.random((3, 5))
    m_v = softmax_map(similarity_map(f_v, v)).data
    m_a = softmax_map(similarity_map(fuse_features(f_v, np.full(f_v.shape, 0.37)), v)).data
    for i in range(3):
        assert np.argmax(m_a[i]) == np.argmax(m_v[i])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (2, 3, 3, 4), elements=st.floats(0, 10)),
       arrays(np.float64, (2, 4), elements=st.floats(0.01, 10)),
       st.floats(0.05, 5.0))
def test_maps_are_distributions(f, v, temp):
    m = softmax_map(similarity_map(f, v), temp).data
    np.testing.assert_allclose(m.sum(axis=(1, 2)), 1.0, atol=1e-12)
    assert np.all(m > 0)


def _tiny_encoders(seed=0, c=4):
    rng = np.random.default_rng(seed)
    return (build_visual_encoder(16, 3, [4], c, rng), build_audio_encoder((16, 16), 3, [4], c, rng))


def test_stage1_shapes_and_normalization():
    visual, audio = _tiny_encoders()
    rng = np.random.default_rng(1)
    out = stage1_forward(rng.random((2, 16, 16, 3)), rng.normal(size=(2, 16, 16, 1)), visual, audio)
    for m in (out.map_v, out.map_a, out.map_av):
        assert m.shape == (2, 3, 3)
        np.testing.assert_allclose(m.data.sum(axis=(1, 2)), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(out.vec_a.data, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_stage1_gradient(seed):
    visual, audio = _tiny_encoders(seed)
    rng = np.random.default_rng(seed)
    img = Tensor(rng.random((2, 16, 16, 3)))
    spec = Tensor(rng.normal(size=(2, 16, 16, 1)))

    def f(i, s):
        out = stage1_forward(i, s, visual, audio)
        # the map sum is identically 1; weight cells so the gradient is not trivially zero
        return ad.sum_(out.map_av * np.arange(9.0).reshape(1, 3, 3))

    assert grad_check(f, [img, spec], coords=40, rng=rng) < 1e-4
