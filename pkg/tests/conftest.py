import numpy as np
import pytest

from dualview.geometry import Intrinsics, RigidTransform


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng: np.random.Generator, t_scale: float = 5.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-t_scale, t_scale, 3))


def random_intrinsics(rng: np.random.Generator) -> Intrinsics:
    return Intrinsics(
        fx=float(rng.uniform(5, 50)), fy=float(rng.uniform(5, 50)),
        cx=float(rng.uniform(-5, 5)), cy=float(rng.uniform(-5, 5)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
