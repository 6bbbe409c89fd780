import numpy as np
import pytest

from boxpseudo.overlap import (
    BACKGROUND, LABEL_A, LABEL_B, LABEL_BG, S1, S2, S3, ObjectBank, extract_object_bank,
    extract_overlap_samples, load_sample, refine_superpoints, save_sample, smaller_box_assign,
)

from conftest import box, make_scene


def _inside(p, b):
    return all(abs(float(p[i]) - float(b.center[i])) <= float(b.dims[i]) / 2 for i in range(3))


def brute_force_samples(scene, margin=0.1):
    """Per-point loops over every box pair; returns {(a, b): (crop, region)}."""
    pos = scene.cloud.positions
    out = {}
    k = len(scene.boxes)
    for a in range(k):
        for b in range(a + 1, k):
            ba, bb = scene.boxes[a], scene.boxes[b]
            if not any(_inside(p, ba) and _inside(p, bb) for p in pos):
                continue
            ga = box(ba.center, ba.dims + 2 * margin)
            gb = box(bb.center, bb.dims + 2 * margin)
            crop, region = [], []
            for i, p in enumerate(pos):
                ia, ib = _inside(p, ba), _inside(p, bb)
                if not (ia or ib or _inside(p, ga) or _inside(p, gb)):
                    continue
                crop.append(i)
                region.append(S3 if ia and ib else S1 if ia else S2 if ib else BACKGROUND)
            out[(a, b)] = (np.array(crop), np.array(region))
    return out


def test_disjoint_boxes_give_no_samples():
    s = make_scene([[0, 0, 0], [5, 5, 5]], [box([0, 0, 0], [1, 1, 1]), box([5, 5, 5], [1, 1, 1])])
    assert extract_overlap_samples(s) == []


def test_identical_boxes_full_overlap():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.4, 0.4, size=(30, 3))
    s = make_scene(pts, [box([0, 0, 0], [1, 1, 1]), box([0, 0, 0], [1, 1, 1], 1)])
    (sample,) = extract_overlap_samples(s)
    assert len(sample.region_s1) == 0 and len(sample.region_s2) == 0
    assert len(sample.region_s3) == 30


def test_box_overlap_without_shared_points_is_dropped():
    s = make_scene([[-0.4, 0, 0], [0.9, 0, 0]], [box([0, 0, 0], [1, 1, 1]), box([0.8, 0, 0], [1, 1, 1])])
    assert extract_overlap_samples(s) == []


def test_random_scenes_match_brute_force():
    rng = np.random.default_rng(1)
    for trial in range(5):
        pts = rng.uniform(0, 3, size=(400, 3))
        boxes = [box(rng.uniform(0.5, 2.5, 3), rng.uniform(0.4, 1.5, 3), int(rng.integers(5))) for _ in range(5)]
        s = make_scene(pts, boxes, scene_id=f"r{trial}")
        samples = extract_overlap_samples(s)
        oracle = brute_force_samples(s)
        assert {x.box_pair for x in samples} == set(oracle)
        for x in samples:
            crop, region = oracle[x.box_pair]
            np.testing.assert_array_equal(x.source_index, crop)
            np.testing.assert_array_equal(x.region, region)
            # partition: the four index lists cover the crop exactly once
            parts = np.concatenate([x.region_s1, x.region_s2, x.region_s3, x.background_pts])
            assert sorted(parts.tolist()) == list(range(len(crop)))
            a, b = x.box_pair
            assert all(_inside(p, s.boxes[a]) and _inside(p, s.boxes[b]) for p in x.positions[x.region_s3])


def test_shrinking_box_never_adds_s3_points():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 2, size=(500, 3))
    a = box([0.8, 1, 1], [1, 1, 1])
    prev = None
    for scale in (1.0, 0.8, 0.6, 0.4):
        b = box([1.3, 1, 1], np.array([1, 1, 1]) * scale)
        samples = extract_overlap_samples(make_scene(pts, [a, b]))
        s3 = set(samples[0].scene_indices(samples[0].region_s3).tolist()) if samples else set()
        if prev is not None:
            assert s3 <= prev
        prev = s3


def test_gt_mapping():
    pts = [[0, 0, 0], [0.3, 0, 0], [0.6, 0, 0], [0.3, 0.05, 0]]
    s = make_scene(pts, [box([0.15, 0, 0], [0.4, 0.2, 0.2]), box([0.45, 0, 0], [0.4, 0.2, 0.2], 1)],
                   gt=[0, 0, 1, -1])
    (x,) = extract_overlap_samples(s)
    assert x.region.tolist() == [S1, S3, S2, S3]
    assert x.gt_label.tolist() == [LABEL_A, LABEL_A, LABEL_B, LABEL_BG]
    assert x.gt_region3.tolist() == [LABEL_A, LABEL_BG]


def test_refined_superpoints_never_straddle_regions():
    sp = np.array([0, 0, 0, 1, 1, 2])
    region = np.array([S1, S3, S1, S2, S2, S3])
    ref = refine_superpoints(sp, region)
    for u in np.unique(ref):
        assert len(set(region[ref == u])) == 1
    assert len(np.unique(ref)) == 4


def test_smaller_box_rule():
    pts = [[0.4, 0, 0]]
    big, small = box([0, 0, 0], [1, 1, 2]), box([0.5, 0, 0], [1, 1, 1])
    (x,) = extract_overlap_samples(make_scene(pts, [small, big]))
    assert smaller_box_assign(x).tolist() == [LABEL_A]
    (x,) = extract_overlap_samples(make_scene(pts, [big, small]))
    assert smaller_box_assign(x).tolist() == [LABEL_B]
    (x,) = extract_overlap_samples(make_scene(pts, [small, box([0.5, 0, 0], [1, 1, 1])]))
    assert smaller_box_assign(x).tolist() == [LABEL_A]


def test_bank_cases():
    pts = np.array([[0, 0, 0], [0.2, 0, 0], [3, 0, 0], [3.6, 0, 0]])
    everything_overlaps = make_scene(pts, [box([0.1, 0, 0], [0.5, 1, 1]), box([0.3, 0, 0], [0.5, 1, 1])])
    assert len(extract_object_bank([everything_overlaps])) == 0
    s = make_scene(pts, [box([0.1, 0, 0], [0.5, 1, 1]), box([3.3, 0, 0], [1, 1, 1], 2)])
    bank = extract_object_bank([s])
    assert len(bank) == 2
    obj = bank.objects[1]
    assert obj.category == 2
    np.testing.assert_array_equal(obj.positions, pts[2:].astype(np.float32))


def test_bank_matches_pairwise_box_oracle(small_world):
    bank = extract_object_bank(small_world)
    expected = 0
    for sc in small_world:
        for i, bi in enumerate(sc.boxes):
            if not any(bi.intersects(bj) for j, bj in enumerate(sc.boxes) if j != i):
                expected += 1
    assert len(bank) == expected
    for obj in bank:
        assert obj.box.contains(obj.positions).all()


def test_bank_objects_inside_no_other_box(small_world):
    bank = extract_object_bank(small_world)
    by_scene = {sc.scene_id: sc for sc in small_world}
    for obj in bank:
        sid, k = obj.source.split(":")
        sc = by_scene[sid]
        for j, b in enumerate(sc.boxes):
            if j != int(k):
                assert not b.contains(obj.positions).any()


def test_sample_and_bank_roundtrip(tmp_path, small_samples, small_world):
    x = small_samples[0]
    save_sample(x, tmp_path / "x.npz")
    y = load_sample(tmp_path / "x.npz")
    np.testing.assert_array_equal(y.positions, x.positions)
    np.testing.assert_array_equal(y.region, x.region)
    np.testing.assert_array_equal(y.gt_label, x.gt_label)
    np.testing.assert_array_equal(y.source_index, x.source_index)
    assert y.box_pair == x.box_pair and y.scene_id == x.scene_id
    bank = extract_object_bank(small_world)
    bank.save(tmp_path / "bank.npz")
    back = ObjectBank.load(tmp_path / "bank.npz")
    assert len(back) == len(bank)
    for a, b in zip(bank, back):
        np.testing.assert_array_equal(a.positions, b.positions)
        assert a.category == b.category and a.source == b.source


def test_missing_sample_field(tmp_path):
    from boxpseudo.scene import FormatError, write_container

    write_container(tmp_path / "bad.npz", {"positions": np.zeros((1, 3), np.float32)}, {})
    with pytest.raises(FormatError, match="colors"):
        load_sample(tmp_path / "bad.npz")
