import numpy as np
import pytest
from conftest import central_diff, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.color import rgb2lab

from splatslam.datasets import FrameObservation
from splatslam.gaussian_map import GaussianMap
from splatslam.geometry import CameraPose
from splatslam.losses import (
    LossWeights,
    depth_residual,
    l1_image,
    lab_to_rgb,
    mapping_loss,
    regularization_loss,
    rgb_to_ab,
    rgb_to_lab,
    ssim,
    tracking_loss,
)
from splatslam.renderer import RenderOutput


def fake_render(color, depth, opacity):
    H, W = depth.shape
    return RenderOutput(color, depth, opacity, np.zeros((H, W), int), np.zeros(0))


def test_l1_examples():
    a = np.zeros((4, 4))
    assert l1_image(a, a)[0] == 0.0
    loss, g = l1_image(a + 0.5, a)
    assert loss == 0.5
    np.testing.assert_allclose(g, 1 / 16)


def test_l1_empty_mask():
    loss, g = l1_image(np.ones((3, 3)), np.zeros((3, 3)), np.zeros((3, 3), bool))
    assert loss == 0.0 and not g.any()


def test_l1_gradient_fd(rng):
    a, b = rng.uniform(size=(6, 5, 3)), rng.uniform(size=(6, 5, 3))
    mask = rng.uniform(size=(6, 5)) > 0.3
    _, g = l1_image(a, b, mask)
    fd = central_diff(lambda: l1_image(a, b, mask)[0], a, h=1e-7)
    np.testing.assert_allclose(g, fd, atol=1e-6)


def test_ssim_identical_and_opposite():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert ssim(img, img)[0] == pytest.approx(1.0, abs=1e-12)
    assert ssim(np.zeros((16, 16)), np.ones((16, 16)))[0] < 0.01


def test_ssim_small_image():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 20)), np.zeros((8, 20)))


def test_ssim_matches_skimage_interior():
    # skimage with the same Gaussian window; compare away from the borders,
    # where the padding conventions differ.
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(1)
    a = rng.uniform(size=(40, 40))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    _, _, smap = ssim(a, b, return_map=True)
    _, ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                   data_range=1.0, full=True)
    np.testing.assert_allclose(smap[5:-5, 5:-5], ref[5:-5, 5:-5], atol=1e-10)


def test_ssim_gradient_fd(rng):
    a, b = rng.uniform(size=(14, 13, 3)), rng.uniform(size=(14, 13, 3))
    _, g = ssim(a, b)
    fd = central_diff(lambda: ssim(a, b)[0], a, h=1e-5)
    assert rel_err(g, fd) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_one_minus_ssim_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12))
    assert 1 - ssim(a, b)[0] >= 0


def test_lab_matches_skimage(rng):
    img = rng.uniform(size=(20, 20, 3))
    img[0, 0] = [1, 1, 1]
    img[0, 1] = [0, 0, 0]
    img[0, 2] = [0.01, 0.02, 0.03]  # linear sRGB branch
    np.testing.assert_allclose(rgb_to_lab(img), rgb2lab(img), atol=1e-4)
    np.testing.assert_allclose(rgb_to_ab(img), rgb2lab(img)[..., 1:], atol=1e-4)


def test_lab_neutral_axis_and_red():
    grays = np.linspace(0, 1, 11)[:, None].repeat(3, axis=1)
    # standard sRGB matrix and D65 white disagree in the 5th digit
    assert np.abs(rgb_to_ab(grays)).max() < 1e-2
    a, b = rgb_to_ab(np.array([1.0, 0, 0]))
    assert a > 0 and b > 0


def test_lab_inverse(rng):
    img = rng.uniform(0.05, 0.95, size=(10, 3))
    np.testing.assert_allclose(lab_to_rgb(rgb_to_lab(img)), img, atol=1e-10)


def test_ab_vjp_fd(rng):
    img = rng.uniform(0.02, 0.98, size=(4, 5, 3))
    img[0, 0] = [0.01, 0.02, 0.03]
    w = rng.normal(size=(4, 5, 2))
    _, vjp = rgb_to_ab(img, return_vjp=True)
    fd = central_diff(lambda: float((rgb_to_ab(img) * w).sum()), img, h=1e-6)
    assert rel_err(vjp(w), fd) < 1e-6


def _frame(rng, H=16, W=16):
    return FrameObservation(rng.uniform(size=(H, W, 3)), rng.uniform(1, 3, (H, W)), 0.0, 0)


def test_mapping_loss_zero_on_match(rng):
    f = _frame(rng)
    r = fake_render(f.rgb.copy(), f.depth.copy(), np.ones((16, 16)))
    loss, dc, dd, do, _ = mapping_loss(r, f, LossWeights())
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_mapping_loss_ignores_depth_when_weight_zero(rng):
    f = _frame(rng)
    w = LossWeights(lambda_depth=0.0)
    r1 = fake_render(rng.uniform(size=(16, 16, 3)), rng.uniform(1, 3, (16, 16)), np.ones((16, 16)))
    r2 = fake_render(r1.color, rng.uniform(1, 3, (16, 16)), np.ones((16, 16)))
    l1, _, dd, do, _ = mapping_loss(r1, f, w)
    assert mapping_loss(r2, f, w)[0] == l1
    assert not dd.any() and not do.any()


def test_mapping_loss_gradient_fd(rng):
    f = _frame(rng)
    color = rng.uniform(size=(16, 16, 3))
    depth = rng.uniform(1, 3, (16, 16))
    opac = rng.uniform(size=(16, 16))
    w = LossWeights()
    opac[np.abs(opac - 0.5) < 1e-3] = 0.7  # keep clear of the mask threshold
    _, dc, dd, do, _ = mapping_loss(fake_render(color, depth, opac), f, w)
    loss = lambda: mapping_loss(fake_render(color, depth, opac), f, w)[0]  # noqa: E731
    assert rel_err(dc, central_diff(loss, color, h=1e-6)) < 1e-3
    assert rel_err(dd, central_diff(loss, depth, h=1e-6)) < 1e-3
    assert rel_err(do, central_diff(loss, opac, h=1e-7)) < 1e-3


def test_depth_mask_uses_opacity_and_sensor(rng):
    f = _frame(rng)
    f.depth[0, 0] = 0.0
    opac = np.ones((16, 16))
    opac[1, 1] = 0.4
    depth = f.depth + 1.0
    _, _, dd, _, terms = mapping_loss(fake_render(f.rgb, depth, opac), f, LossWeights())
    assert dd[0, 0] == 0 and dd[1, 1] == 0 and dd[2, 2] > 0
    assert terms["depth"] == pytest.approx(1.0)


def test_tracking_loss_zero_on_match(rng):
    f = _frame(rng)
    assert tracking_loss(fake_render(f.rgb, f.depth, np.ones((16, 16))), f, LossWeights())[0] == 0.0


def test_tracking_loss_ignores_lightness():
    rng = np.random.default_rng(3)
    f = FrameObservation(rng.uniform(0.3, 0.7, (16, 16, 3)), np.ones((16, 16)), 0.0, 0)
    w = LossWeights(lambda_depth_track=0.0)
    color = np.clip(f.rgb + rng.normal(scale=0.05, size=f.rgb.shape), 0, 1)
    lab = rgb_to_lab(color)
    lab[..., 0] += 5.0
    brighter = lab_to_rgb(lab)
    assert brighter.min() >= 0 and brighter.max() <= 1
    base = tracking_loss(fake_render(color, f.depth, np.ones((16, 16))), f, w)[0]
    shifted = tracking_loss(fake_render(brighter, f.depth, np.ones((16, 16))), f, w)[0]
    assert shifted == pytest.approx(base, abs=1e-3)


def test_tracking_loss_gradient_fd(rng):
    f = _frame(rng)
    color = rng.uniform(0.05, 0.95, (16, 16, 3))
    depth = rng.uniform(1, 3, (16, 16))
    opac = np.ones((16, 16))
    w = LossWeights(lambda_depth_track=3.0)
    opac = rng.uniform(0.6, 1.0, (16, 16))
    _, dc, dd, do, _ = tracking_loss(fake_render(color, depth, opac), f, w)
    loss = lambda: tracking_loss(fake_render(color, depth, opac), f, w)[0]  # noqa: E731
    assert rel_err(dc, central_diff(loss, color, h=1e-7)) < 1e-3
    assert rel_err(dd, central_diff(loss, depth, h=1e-7)) < 1e-3
    assert rel_err(do, central_diff(loss, opac, h=1e-7)) < 1e-3


def test_depth_residual_is_coverage_weighted(rng):
    f = _frame(rng)
    opac = np.full((16, 16), 0.8)
    r = fake_render(f.rgb, 0.8 * f.depth, opac)
    assert depth_residual(r, f)[0] == 0.0
    # the raw difference reads partial coverage as geometry that is too close
    raw = depth_residual(r, f, coverage=False)[0]
    assert raw == pytest.approx(0.2 * f.depth.mean())
    assert mapping_loss(r, f, LossWeights(depth_coverage=False))[4]["depth"] == pytest.approx(raw)


def test_loss_weights_nonnegative():
    with pytest.raises(ValueError):
        LossWeights(lambda_color=-1.0)


def _reg_map():
    m = GaussianMap()
    m.insert_arrays(np.array([[0, 0, 2.0], [0.5, 0, 3.0]]), np.full((2, 3), 0.1),
                    np.tile([1.0, 0, 0, 0], (2, 1)), np.full((2, 3), 0.5), np.full(2, 0.5))
    return m


def test_regularizer_examples():
    m = _reg_map()
    pose = CameraPose.identity()
    m.n_seen[0] = 1
    m.grad_sum_c[0] = 1.0
    m.snapshot_anchors(pose)
    assert regularization_loss(m, [0, 1], pose)[0] == 0.0
    m.colors[0] += [0.1, 0, 0]
    assert regularization_loss(m, [0, 1], pose)[0] == pytest.approx(0.1)
    # Gaussian 1 was never seen: any change is free
    m.colors[1] += 0.3
    m.means[1] += 1.0
    assert regularization_loss(m, [0, 1], pose)[0] == pytest.approx(0.1)


def test_regularizer_ignores_untouched(rng):
    m = _reg_map()
    pose = CameraPose.identity()
    m.n_seen[:] = 1
    m.grad_sum_s[:] = m.grad_sum_c[:] = 1.0
    m.grad_sum_d[:] = 1.0
    m.snapshot_anchors(pose)
    m.colors[1] += 0.2
    loss, grads = regularization_loss(m, [0], pose)
    assert loss == 0.0 and not grads["colors"][1].any()


def test_regularizer_gradient_fd(rng):
    m = _reg_map()
    m.n_seen[:] = 2
    m.grad_sum_s[:] = rng.uniform(size=(2, 3))
    m.grad_sum_c[:] = rng.uniform(size=(2, 3))
    m.grad_sum_d[:] = rng.uniform(size=2)
    pose = CameraPose([0.1, 0, 0], [0.99, 0.1, 0.05, 0])
    m.snapshot_anchors(pose)
    m.means += rng.normal(scale=0.05, size=m.means.shape)
    m.log_scales += rng.normal(scale=0.1, size=m.log_scales.shape)
    m.colors += rng.normal(scale=0.05, size=m.colors.shape)
    _, grads = regularization_loss(m, [0, 1], pose)
    for name in ("means", "log_scales", "colors"):
        fd = central_diff(lambda: regularization_loss(m, [0, 1], pose)[0], getattr(m, name), h=1e-7)
        assert rel_err(grads[name], fd) < 1e-6, name


def test_extended_regularizer_gradient_fd(rng):
    m = _reg_map()
    m.n_seen[:] = 3
    for name, shape in [("grad_sum_s", (2, 3)), ("grad_sum_c", (2, 3)), ("grad_sum_d", 2),
                        ("grad_sum_o", 2), ("grad_sum_r", (2, 4)), ("grad_sum_xy", (2, 2))]:
        getattr(m, name)[:] = rng.uniform(size=shape)
    pose = CameraPose([0.1, -0.2, 0], [0.98, 0.1, -0.1, 0.05])
    m.snapshot_anchors(pose)
    m.means += rng.normal(scale=0.05, size=m.means.shape)
    m.rotations += rng.normal(scale=0.05, size=m.rotations.shape)
    m.opacity_logits += rng.normal(scale=0.3, size=2)
    loss, grads = regularization_loss(m, [0, 1], pose, extended=True)
    assert loss > regularization_loss(m, [0, 1], pose)[0]
    for name in ("means", "rotations", "opacity_logits"):
        fd = central_diff(lambda: regularization_loss(m, [0, 1], pose, extended=True)[0],
                          getattr(m, name), h=1e-7)
        assert rel_err(grads[name], fd) < 1e-6, name


def test_extended_terms_vanish_at_anchor_and_are_opt_in(rng):
    m = _reg_map()
    m.n_seen[:] = 1
    m.grad_sum_o[:] = m.grad_sum_r[:] = 1.0
    pose = CameraPose.identity()
    m.snapshot_anchors(pose)
    assert regularization_loss(m, [0, 1], pose, extended=True)[0] == 0.0
    m.opacity_logits[0] += 1.0
    m.rotations[1] = [0.0, 1.0, 0, 0]
    assert regularization_loss(m, [0, 1], pose)[0] == 0.0
    assert regularization_loss(m, [0, 1], pose, extended=True)[0] > 1.0
