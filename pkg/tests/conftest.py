import numpy as np
import pytest
import torch

from boxpseudo.scene import BBox3D, PointCloud, Scene, SuperpointPartition
from boxpseudo.synth import WorldConfig, generate_world


def make_scene(positions, boxes, gt=None, colors=None, scene_id="s0", sp_size=0.05):
    positions = np.asarray(positions, dtype=np.float32)
    if colors is None:
        colors = np.full_like(positions, 0.5)
    sp = SuperpointPartition.from_voxels(positions, sp_size)
    return Scene(PointCloud(positions, colors), tuple(boxes), sp,
                 None if gt is None else np.asarray(gt, dtype=np.int32), scene_id=scene_id)


def box(center, dims, category=0):
    return BBox3D(np.asarray(center, dtype=np.float64), np.asarray(dims, dtype=np.float64), category)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(num_scenes=6, seed=3, superpoint_size=0.15))


@pytest.fixture(scope="session")
def small_samples(small_world):
    from boxpseudo.overlap import extract_overlap_samples

    return [s for sc in small_world for s in extract_overlap_samples(sc)]


@pytest.fixture(scope="session")
def sim_setup(small_world, small_samples):
    from boxpseudo.overlap import extract_object_bank
    from boxpseudo.simgen import SimConfig, harvest_stats

    bank = extract_object_bank(small_world)
    stats = harvest_stats(small_samples)
    return stats, bank, SimConfig(superpoint_size=0.15, floor_point_rate=100)


@pytest.fixture(scope="session")
def sim_samples(sim_setup):
    from boxpseudo.simgen import generate_corpus

    stats, bank, cfg = sim_setup
    return generate_corpus(stats, bank, 12, cfg)[0]
