import numpy as np
import pytest

from avloc import autodiff as ad
from avloc.attention import stage1_forward
from avloc.autodiff import Tensor, grad_check
from avloc.config import RunConfig
from avloc.encoders import build_audio_encoder, build_visual_encoder
from avloc.model import LocalizationModel
from avloc.recursion import FinalMapWeights, attend_image, final_map, resize_map, stage2_forward


def encoders(seed=0):
    rng = np.random.default_rng(seed)
    return build_visual_encoder(32, 7, [8, 8], 8, rng), build_audio_encoder((32, 32), 7, [8], 8, rng)


def test_uniform_gate_reproduces_stage_one_map():
    visual, audio = encoders()
    rng = np.random.default_rng(1)
    images = rng.random((3, 32, 32, 3))
    s1 = stage1_forward(images, rng.normal(size=(3, 32, 32, 1)), visual, audio)
    uniform = np.full((3, 7, 7), 1 / 49)
    s2 = stage2_forward(images, uniform, s1.vec_a, visual)
    np.testing.assert_array_equal(s2.images_att.data, images)
    np.testing.assert_array_equal(s2.map_v_att.data, s1.map_v.data)


def test_resize_of_constant_is_exact():
    m = np.full((2, 7, 7), 1 / 49)
    np.testing.assert_array_equal(resize_map(m, 64, 64).data, 1 / 49)


def test_attend_image_peak_is_one():
    rng = np.random.default_rng(0)
    images = np.ones((2, 8, 8, 3))
    gate = rng.random((2, 8, 8)) + 0.1
    out = attend_image(images, gate).data
    np.testing.assert_allclose(out.max(axis=(1, 2, 3)), 1.0, rtol=1e-15)
    np.testing.assert_allclose(out[..., 0], gate / gate.max(axis=(1, 2), keepdims=True), rtol=1e-15)


def test_attend_image_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        attend_image(np.ones((1, 8, 8, 3)), np.ones((1, 4, 4)))


def test_final_map_sums_to_weight_total():
    rng = np.random.default_rng(0)
    maps = []
    for _ in range(3):
        m = rng.random((4, 7, 7))
        maps.append(m / m.sum(axis=(1, 2), keepdims=True))
    np.testing.assert_allclose(final_map(*maps).data.sum(axis=(1, 2)), 3.0, atol=1e-12)
    w = FinalMapWeights(1, 2, 4)
    np.testing.assert_allclose(final_map(*maps, w).data, maps[0] + 2 * maps[1] + 4 * maps[2], rtol=1e-15)


def test_final_map_weights_validation():
    with pytest.raises(ValueError):
        FinalMapWeights(-1, 1, 1)
    with pytest.raises(ValueError):
        FinalMapWeights(0, 0, 0)


def test_extra_recursion_steps():
    visual, audio = encoders()
    rng = np.random.default_rng(2)
    images = rng.random((2, 32, 32, 3))
    s1 = stage1_forward(images, rng.normal(size=(2, 32, 32, 1)), visual, audio)
    one = stage2_forward(images, s1.map_av, s1.vec_a, visual, steps=1, map_a=s1.map_a)
    two = stage2_forward(images, s1.map_av, s1.vec_a, visual, steps=2, map_a=s1.map_a)
    np.testing.assert_allclose(two.map_v_att.data.sum(axis=(1, 2)), 1.0, atol=1e-12)
    assert not np.array_equal(one.map_v_att.data, two.map_v_att.data)
    with pytest.raises(ValueError):
        stage2_forward(images, s1.map_av, s1.vec_a, visual, steps=0)


def test_visual_encoder_is_shared_between_stages():
    cfg = RunConfig(channels=8, visual_widths=[8], audio_widths=[8])
    model = LocalizationModel(cfg)
    assert sum(1 for k in model.parameters() if k.startswith("visual.")) == 2 * len(model.visual.layers)
    rng = np.random.default_rng(0)
    images, specs = rng.random((2, 64, 64, 3)), rng.normal(size=(2, 64, 64, 1))
    with ad.Tape() as tape:
        out = model.forward(images, specs)
        loss = ad.sum_(out.feat_v_att)
    grads = tape.backward(loss)
    # the attentive features alone reach the visual kernels: one shared parameter set
    assert all(np.any(grads[p] != 0) for k, p in model.parameters().items() if k.startswith("visual.") and
               k.endswith("kernel"))


def test_final_map_gradient_wrt_raw_inputs():
    visual, audio = encoders(3)
    rng = np.random.default_rng(3)
    weights = np.arange(49.0).reshape(1, 7, 7)

    def f(img, spec):
        s1 = stage1_forward(img, spec, visual, audio)
        s2 = stage2_forward(img, s1.map_av, s1.vec_a, visual, map_a=s1.map_a)
        return ad.sum_(final_map(s1.map_v, s1.map_a, s2.map_v_att) * weights)

    x = [Tensor(rng.random((2, 32, 32, 3))), Tensor(rng.normal(size=(2, 32, 32, 1)))]
    assert grad_check(f, x, coords=30, rng=rng) < 1e-4
