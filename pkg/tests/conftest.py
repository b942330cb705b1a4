import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from deblurgs.geometry import Intrinsics, Pose
from deblurgs.grad import ParamStore
from deblurgs.scene import GaussianArrays, SceneModel


def random_pose(rng, angle=0.3, shift=0.5):
    rot = Rotation.from_rotvec(rng.normal(size=3) * angle).as_matrix()
    return Pose(rot, rng.normal(size=3) * shift)


def random_gaussians(rng, n, depth=(3.0, 5.0), spread=0.8, dynamic=None):
    z = rng.uniform(*depth, n)
    means = np.column_stack([rng.uniform(-spread, spread, (n, 2)) * z[:, None] / 4, z])
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianArrays(
        means, quats, np.log(rng.uniform(0.15, 0.4, (n, 3))),
        rng.normal(0.5, 0.8, n), rng.uniform(0.05, 0.95, (n, 3)), dynamic)


def small_intrinsics(size=16, focal=14.0):
    return Intrinsics(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size)


def small_scene(rng, n_static=5, n_dynamic=3, n_ctrl=5, n_frames=6, size=16):
    store = ParamStore()
    static = random_gaussians(rng, n_static)
    dyn = random_gaussians(rng, n_dynamic)
    ctrl = dyn.means[:, None, :] + rng.normal(0, 0.1, (n_dynamic, n_ctrl, 3))
    scene = SceneModel.create(store, small_intrinsics(size), n_frames, static, dyn, ctrl)
    return scene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
