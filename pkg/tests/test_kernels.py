import numpy as np
import pytest

from boxpseudo import kernels

BACKENDS = kernels.backends()


def test_compiled_backend_available():
    # the package is built with the extension; the fallback is for bare checkouts
    assert "compiled" in BACKENDS
    assert kernels.BACKEND == "compiled"


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_points_in_boxes_closed_boundary(name):
    k = BACKENDS[name]
    centers = np.array([[0.0, 0.0, 0.0]])
    dims = np.array([[2.0, 2.0, 2.0]])
    pts = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, 0.0], [1.0000001, 0, 0], [0, 0, 0]])
    assert k.points_in_boxes(pts, centers, dims)[:, 0].tolist() == [True, True, False, True]


def test_points_in_boxes_backends_agree():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2, 2, size=(3000, 3))
    # snap some points onto faces to exercise the boundary
    pts[:300, 0] = 0.5
    centers = rng.uniform(-1, 1, size=(7, 3))
    centers[0] = [0.0, 0.0, 0.0]
    dims = rng.uniform(0.2, 2, size=(7, 3))
    dims[0] = [1.0, 4.0, 4.0]
    results = [b.points_in_boxes(pts, centers, dims) for b in BACKENDS.values()]
    brute = np.array([[all(abs(p[i] - c[i]) <= d[i] / 2 for i in range(3)) for c, d in zip(centers, dims)]
                      for p in pts])
    for r in results:
        np.testing.assert_array_equal(r, brute)
    assert brute[:300, 0].all()


def test_points_in_boxes_no_boxes():
    for b in BACKENDS.values():
        assert b.points_in_boxes(np.zeros((4, 3)), np.zeros((0, 3)), np.zeros((0, 3))).shape == (4, 0)


def test_voxel_keys_order_and_agreement():
    rng = np.random.default_rng(1)
    pts = rng.normal(0, 3, size=(2000, 3))
    keys = {n: b.voxel_keys(pts, 0.1) for n, b in BACKENDS.items()}
    ref = keys["python"]
    for v in keys.values():
        np.testing.assert_array_equal(v, ref)
    coords = np.floor(pts / 0.1).astype(np.int64)
    by_key = np.argsort(ref, kind="stable")
    by_lex = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    np.testing.assert_array_equal(coords[by_key], coords[by_lex])


def test_voxel_keys_out_of_range():
    for b in BACKENDS.values():
        with pytest.raises(ValueError):
            b.voxel_keys(np.array([[1e9, 0, 0]]), 0.01)


def test_neighbor_table_matches_brute_force():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 0.5, size=(400, 3))
    _, keys = kernels.voxel_cluster(pts, 0.1)
    coords = np.unique(np.floor(pts / 0.1).astype(np.int64), axis=0)
    lookup = {tuple(c): i for i, c in enumerate(coords)}
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    brute = np.array([[lookup.get((c[0] + o[0], c[1] + o[1], c[2] + o[2]), -1) for o in offsets] for c in coords])
    for b in BACKENDS.values():
        np.testing.assert_array_equal(b.neighbor_table(keys), brute)


def test_segment_sum_and_mean():
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(500, 4))
    ids = rng.integers(0, 9, size=500)
    ids[:9] = np.arange(9)
    expected = np.stack([vals[ids == i].sum(0) for i in range(9)])
    for b in BACKENDS.values():
        np.testing.assert_allclose(b.segment_sum(vals, ids, 9), expected, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(kernels.segment_mean(vals, ids, 9),
                               np.stack([vals[ids == i].mean(0) for i in range(9)]), atol=1e-12)
    with pytest.raises(ValueError):
        kernels.segment_mean(vals, ids, 10)


def test_trilinear_exact_on_linear_field():
    # trilinear interpolation reproduces affine fields exactly
    shape = (5, 6, 7)
    spacing = 0.25
    origin = np.array([-0.5, 0.0, 0.25])
    grid_pts = np.stack(np.meshgrid(*[origin[i] + spacing * np.arange(shape[i]) for i in range(3)],
                                    indexing="ij"), axis=-1)
    a = np.array([[1.0, -2.0, 0.5], [0.3, 0.0, 1.0]])
    field = np.stack([grid_pts @ a[0] + 1, grid_pts @ a[1] - 2, grid_pts[..., 0] * 0], axis=-1)
    rng = np.random.default_rng(4)
    pts = origin + rng.uniform(0, spacing * (np.array(shape) - 1), size=(300, 3))
    expected = np.stack([pts @ a[0] + 1, pts @ a[1] - 2, np.zeros(len(pts))], axis=1)
    for b in BACKENDS.values():
        np.testing.assert_allclose(b.trilinear(field, origin, spacing, pts), expected, atol=1e-12)


def test_trilinear_backends_agree_with_clamping():
    rng = np.random.default_rng(5)
    field = rng.normal(size=(4, 4, 4, 3))
    pts = rng.uniform(-1, 2, size=(500, 3))
    outs = [b.trilinear(field, np.zeros(3), 0.3, pts) for b in BACKENDS.values()]
    for o in outs[1:]:
        np.testing.assert_allclose(o, outs[0], atol=1e-12)


def test_co_occupied_voxels():
    a = np.array([[0.01, 0.01, 0.01], [1.0, 1.0, 1.0]])
    b = np.array([[0.02, 0.02, 0.02]])
    assert kernels.co_occupied_voxels(a, b, 0.03) == 1
    assert kernels.co_occupied_voxels(a, b + 0.5, 0.03) == 0
    assert kernels.co_occupied_voxels(a, np.zeros((0, 3)), 0.03) == 0
