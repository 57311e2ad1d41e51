import math

import numpy as np
import pytest
from conftest import K32, SMOOTH, central_diff, random_map, random_pose, rel_err

from splatslam.gaussian_map import GaussianMap
from splatslam.geometry import COV2D_FLOOR, CameraPose, InvalidInputError, Projected2DGaussian
from splatslam.renderer import (
    ALPHA_MAX,
    composite_pixel,
    eval_alpha,
    render,
    render_backward,
    render_bruteforce,
    save_debug_images,
    sort_by_depth,
)


def test_composite_single_clamped():
    C, D, O = composite_pixel([(ALPHA_MAX, (1, 0, 0), 2.0)])
    np.testing.assert_allclose(C, [0.99, 0, 0])
    assert D == pytest.approx(1.98)
    assert O == pytest.approx(0.99)


def test_composite_two_halves():
    c1, c2 = np.array([0.2, 0.4, 0.6]), np.array([1.0, 0.5, 0.0])
    C, D, O = composite_pixel([(0.5, c1, 1.0), (0.5, c2, 2.0)])
    np.testing.assert_allclose(C, 0.5 * c1 + 0.25 * c2)
    assert O == pytest.approx(0.75)
    assert D == pytest.approx(0.5 + 0.5)


def test_composite_empty():
    C, D, O = composite_pixel([])
    assert not C.any() and D == 0 and O == 0


def test_composite_unsorted_detected():
    with pytest.raises(ValueError):
        composite_pixel([(0.5, (0, 0, 0), 2.0), (0.5, (0, 0, 0), 1.0)], check_sorted=True)


def _g(cov, mu=(0.0, 0.0)):
    cov = np.asarray(cov, float)
    return Projected2DGaussian(np.array(mu), cov, 1.0, 3 * math.sqrt(np.linalg.eigvalsh(cov).max()))


def test_eval_alpha_examples():
    assert eval_alpha(_g(np.eye(2)), 0.5, [0.0, 0.0]) == 0.5
    assert eval_alpha(_g(np.eye(2)), 1.0, [1.0, 1.0]) == pytest.approx(math.exp(-1))
    assert eval_alpha(_g(np.eye(2)), 1.0, [0.0, 0.0]) == ALPHA_MAX
    assert eval_alpha(_g(np.eye(2)), 1.0, [3.1, 0.0]) == 0.0


def test_sort_by_depth():
    np.testing.assert_array_equal(sort_by_depth([3, 1, 2]), [1, 2, 0])
    np.testing.assert_array_equal(sort_by_depth([1, 1, 1]), [0, 1, 2])
    np.testing.assert_array_equal(sort_by_depth(np.arange(10, 0, -1)), np.arange(9, -1, -1))


def test_empty_map_is_background():
    out = render(GaussianMap(), CameraPose.identity(), K32)
    assert not out.opacity.any() and not out.color.any() and not out.depth.any()


def test_single_opaque_gaussian_on_axis():
    m = GaussianMap()
    c = np.array([0.3, 0.6, 0.9])
    m.insert_arrays(np.array([[0, 0, 2.0]]), np.full((1, 3), 0.2), np.array([[1.0, 0, 0, 0]]),
                    c[None], np.array([0.999]))
    out = render(m, CameraPose.identity(), K32)
    # the centre lies between four pixels, half a pixel off in each axis
    var = (K32.fx * 0.2 / 2.0) ** 2 + COV2D_FLOOR
    v = out.color[15, 15]
    np.testing.assert_allclose(v, c * 0.999 * np.exp(-0.25 / var), rtol=1e-9)


def test_matches_bruteforce(rng):
    for _ in range(5):
        m = random_map(rng, n=20, opacity=(0.3, 0.99))
        pose = random_pose(rng)
        out = render(m, pose, K32)
        c, d, o = render_bruteforce(m, pose, K32)
        assert np.abs(out.color - c).max() < 1e-5
        assert np.abs(out.depth - d).max() < 1e-5 * 5
        assert np.abs(out.opacity - o).max() < 1e-5


def test_output_invariants_and_determinism(rng):
    m = random_map(rng, n=30)
    pose = random_pose(rng)
    a = render(m, pose, K32)
    b = render(m, pose, K32)
    for name in ("color", "depth", "opacity", "per_gaussian_weight"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.opacity.min() >= 0 and a.opacity.max() <= 1
    assert a.depth.min() >= 0 and np.isfinite(a.color).all()
    assert a.contrib_count.max() > 0


def test_opacity_monotone_in_gaussian_opacity(rng):
    m = random_map(rng, n=15)
    pose = random_pose(rng)
    base = render(m, pose, K32).opacity
    for i in rng.choice(15, 5, replace=False):
        m2 = m.copy()
        m2.opacity_logits[i] += 0.5
        assert (render(m2, pose, K32).opacity >= base - 1e-12).all()


def test_zero_upstream_zero_gradients(rng):
    m = random_map(rng)
    g = render_backward(m, CameraPose.identity(), K32, np.zeros((32, 32, 3)), np.zeros((32, 32)),
                        want_pose_grads=True)
    for arr in (g.d_mu, g.d_log_scale, g.d_rot, g.d_color, g.d_opacity_logit, g.d_t, g.d_q):
        assert not np.any(arr)


def test_color_gradient_single_gaussian():
    m = GaussianMap()
    m.insert_arrays(np.array([[0, 0, 2.0]]), np.full((1, 3), 0.1), np.array([[1.0, 0, 0, 0]]),
                    np.full((1, 3), 0.5), np.array([0.6]))
    K = K32
    out = render(m, CameraPose.identity(), K)
    dC = np.zeros((32, 32, 3))
    dC[15, 15, 0] = 1.0
    g = render_backward(m, CameraPose.identity(), K, dC, np.zeros((32, 32)), forward=out)
    alpha = out.opacity[15, 15]
    assert g.d_color[0, 0] == pytest.approx(alpha, rel=1e-12)


def test_untouched_gaussians_have_zero_gradient(rng):
    m = random_map(rng, n=5)
    # one Gaussian far outside the frustum
    m.insert_arrays(np.array([[50.0, 0, 3]]), np.full((1, 3), 0.1), np.array([[1.0, 0, 0, 0]]),
                    np.full((1, 3), 0.5), np.array([0.5]))
    g = render_backward(m, CameraPose.identity(), K32, rng.normal(size=(32, 32, 3)),
                        rng.normal(size=(32, 32)))
    assert not g.d_mu[-1].any() and not g.d_color[-1].any() and not g.d_opacity_logit[-1]


def test_backward_shape_mismatch():
    m = GaussianMap()
    with pytest.raises(InvalidInputError):
        render_backward(m, CameraPose.identity(), K32, np.zeros((8, 8, 3)), np.zeros((8, 8)))


def test_gradients_match_finite_differences(rng):
    m = random_map(rng)
    pose = random_pose(rng)
    wc, wd, wo = rng.normal(size=(32, 32, 3)), rng.normal(size=(32, 32)), rng.normal(size=(32, 32))

    def loss(pose=pose):
        o = render(m, pose, K32, SMOOTH)
        return (o.color * wc).sum() + (o.depth * wd).sum() + (o.opacity * wo).sum()

    g = render_backward(m, pose, K32, wc, wd, wo, want_pose_grads=True, settings=SMOOTH)
    for name, an in g.as_dict().items():
        assert rel_err(an, central_diff(loss, getattr(m, name))) < 1e-3, name
    t, q = pose.t.copy(), pose.q.copy()
    assert rel_err(g.d_t, central_diff(lambda: loss(CameraPose(t, q)), t)) < 1e-3
    assert rel_err(g.d_q, central_diff(lambda: loss(CameraPose(t, q)), q)) < 1e-3


def test_debug_images(tmp_path, rng):
    out = render(random_map(rng), CameraPose.identity(), K32)
    save_debug_images(out, tmp_path / "x")
    for suffix in ("color", "depth", "opacity"):
        assert (tmp_path / f"x_{suffix}.png").stat().st_size > 0
