import itertools

import numpy as np
import pytest

from splatslam.gaussian_map import (
    Gaussian,
    GaussianMap,
    InvalidParameterError,
    importance_weights,
    insert_gaussians,
    snapshot_anchors,
    update_importance,
)
from splatslam.geometry import CameraPose
from splatslam.losses import regularization_loss

IDENT = np.array([1.0, 0, 0, 0])


def seed(mu=(0, 0, 1), s=0.1, c=0.5, o=0.5):
    return Gaussian(np.array(mu, float), np.full(3, s), IDENT.copy(), np.full(3, c), o)


def test_insert_into_empty_map():
    m = GaussianMap()
    r = insert_gaussians(m, [seed(), seed(), seed()])
    assert list(r) == [0, 1, 2]
    assert len(m) == 3
    om_s, om_c, om_d = importance_weights(m)
    assert not om_s.any() and not om_c.any() and not om_d.any()


def test_insert_nothing():
    m = GaussianMap()
    insert_gaussians(m, [seed()])
    before = m.state_hash()
    r = insert_gaussians(m, [])
    assert len(r) == 0 and len(m) == 1 and m.state_hash() == before


@pytest.mark.parametrize("bad", [
    dict(o=1.5), dict(o=0.0), dict(s=-0.1), dict(c=1.2),
])
def test_insert_rejects_invalid(bad):
    with pytest.raises(InvalidParameterError):
        insert_gaussians(GaussianMap(), [seed(**bad)])


def test_insert_rejects_non_unit_rotation():
    g = seed()
    g.r = np.array([2.0, 0, 0, 0])
    with pytest.raises(InvalidParameterError):
        insert_gaussians(GaussianMap(), [g])


def test_exposed_values_round_trip():
    m = GaussianMap()
    insert_gaussians(m, [seed(s=0.25, o=0.3)])
    g = m.gaussian(0)
    np.testing.assert_allclose(g.s, 0.25)
    assert g.o == pytest.approx(0.3)


def test_importance_single_and_double_update():
    m = GaussianMap()
    insert_gaussians(m, [seed()])
    g1 = np.array([[0.4, -0.2, 0.0]])
    update_importance(m, [0], g1, g1, [-3.0])
    om_s, _, om_d = importance_weights(m, [0])
    np.testing.assert_allclose(om_s, np.abs(g1))
    assert om_d[0] == 3.0
    g2 = np.array([[0.2, 0.6, 1.0]])
    update_importance(m, [0], g2, g2, [1.0])
    om_s, om_c, om_d = importance_weights(m, [0])
    np.testing.assert_allclose(om_s, (np.abs(g1) + np.abs(g2)) / 2)
    assert om_d[0] == 2.0


def test_importance_division_example():
    m = GaussianMap()
    insert_gaussians(m, [seed()])
    m.grad_sum_s[0] = [4.0, 2.0, 0.0]
    m.n_seen[0] = 2
    np.testing.assert_array_equal(importance_weights(m, [0])[0], [[2.0, 1.0, 0.0]])


def test_untouched_unchanged():
    m = GaussianMap()
    insert_gaussians(m, [seed(), seed()])
    update_importance(m, [1], np.ones((1, 3)), np.ones((1, 3)), [1.0])
    assert m.n_seen[0] == 0 and not m.grad_sum_s[0].any()


def test_update_out_of_range():
    m = GaussianMap()
    insert_gaussians(m, [seed()])
    with pytest.raises(IndexError):
        update_importance(m, [3], np.ones((1, 3)), np.ones((1, 3)), [1.0])


def test_weights_are_mean_and_order_invariant(rng):
    history = [rng.normal(size=(1, 3)) for _ in range(5)]
    results = []
    for perm in itertools.islice(itertools.permutations(history), 6):
        m = GaussianMap()
        insert_gaussians(m, [seed()])
        for g in perm:
            update_importance(m, [0], g, g, g[:, 0])
        results.append(importance_weights(m, [0])[0])
    expected = np.mean(np.abs(np.concatenate(history)), axis=0)
    for r in results:
        np.testing.assert_allclose(r[0], expected, rtol=1e-12)


def test_snapshot_then_regularizer_zero_and_color_delta():
    m = GaussianMap()
    insert_gaussians(m, [seed(mu=(0, 0, 2)), seed(mu=(0.1, 0, 3))])
    update_importance(m, [0, 1], np.ones((2, 3)), np.ones((2, 3)), [1.0, 1.0])
    pose = CameraPose.identity()
    snapshot_anchors(m, pose)
    assert regularization_loss(m, [0, 1], pose)[0] == 0.0
    m.colors[0, 0] += 0.1
    assert regularization_loss(m, [0, 1], pose)[0] == pytest.approx(0.1)


def test_snapshot_behind_camera():
    m = GaussianMap()
    insert_gaussians(m, [seed(mu=(0, 0, -2))])
    snapshot_anchors(m, CameraPose.identity())
    assert m.z_star[0] == -2.0


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    m = GaussianMap()
    n = 17
    q = rng.normal(size=(n, 4))
    m.insert_arrays(rng.normal(size=(n, 3)), rng.uniform(0.01, 1, (n, 3)),
                    q / np.linalg.norm(q, axis=1, keepdims=True), rng.uniform(0, 1, (n, 3)),
                    rng.uniform(0.01, 0.99, n))
    update_importance(m, np.arange(0, n, 2), rng.normal(size=(9, 3)), rng.normal(size=(9, 3)),
                      rng.normal(size=9), grad_o=rng.normal(size=9), grad_r=rng.normal(size=(9, 4)),
                      grad_xy=rng.normal(size=(9, 2)))
    snapshot_anchors(m, CameraPose([0.1, 0.2, 0.3], [0.9, 0.1, 0.2, 0.3]))
    path = tmp_path / "map.gsmp"
    m.save(path)
    back = GaussianMap.load(path)
    for k, v in vars(m).items():
        w = getattr(back, k)
        assert v.dtype == w.dtype and v.tobytes() == w.tobytes(), k
    assert back.state_hash() == m.state_hash()


def test_checkpoint_version_1_loads(tmp_path):
    import struct

    from splatslam.gaussian_map import MAGIC, RECORD_DTYPE_V1

    m = GaussianMap()
    insert_gaussians(m, [seed(c=0.2, o=0.3), seed(mu=(1, 0, 2))])
    m.grad_sum_c[1] = 4.0
    rec = np.zeros(2, dtype=RECORD_DTYPE_V1)
    full = m.to_records()
    for name in RECORD_DTYPE_V1.names:
        rec[name] = full[name]
    p = tmp_path / "old.gsmp"
    p.write_bytes(MAGIC + struct.pack("<IQ", 1, 2) + rec.tobytes())
    back = GaussianMap.load(p)
    np.testing.assert_array_equal(back.means, m.means)
    np.testing.assert_array_equal(back.grad_sum_c, m.grad_sum_c)
    np.testing.assert_allclose(back.o_star, [0.3, 0.5])
    assert not back.grad_sum_r.any() and back.xy_star.shape == (2, 2)


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.gsmp"
    p.write_bytes(b"nope" + bytes(20))
    with pytest.raises(ValueError):
        GaussianMap.load(p)


def test_ply_export(tmp_path):
    m = GaussianMap()
    insert_gaussians(m, [seed(c=1.0), seed()])
    m.export_ply(tmp_path / "m.ply")
    lines = (tmp_path / "m.ply").read_text().splitlines()
    assert "element vertex 2" in lines
    assert lines[-2].endswith("255 255 255")
