"""Frame math: lifting, unprojection, alignment, voxel assignment."""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import random_intrinsics, random_rotation, random_transform
from dualview.errors import BehindCamera, SingularIntrinsics
from dualview.geometry import (
    CameraRig,
    FrustumPoints,
    FrustumSpec,
    Intrinsics,
    RigidTransform,
    VoxelGridSpec,
    align_historical,
    build_voxel_coords,
    lift_pixels,
    project_ego_to_pixel,
    unproject_to_ego,
    voxelize,
)


def make_rig(rng, n_cameras=2, h=4, w=5):
    cams = tuple((random_intrinsics(rng), random_transform(rng)) for _ in range(n_cameras))
    return CameraRig(cameras=cams, image_h=h, image_w=w)


class TestIntrinsics:
    def test_matrix_round_trip(self, rng):
        intr = random_intrinsics(rng)
        again = Intrinsics.from_matrix(intr.matrix)
        assert again == intr

    @pytest.mark.parametrize("fx,fy", [(0.0, 1.0), (1.0, -2.0)])
    def test_nonpositive_focal_rejected(self, fx, fy):
        with pytest.raises(SingularIntrinsics):
            Intrinsics(fx=fx, fy=fy, cx=0.0, cy=0.0)


class TestRigidTransform:
    def test_compose_matches_matrix_product(self, rng):
        a, b = random_transform(rng), random_transform(rng)
        np.testing.assert_allclose(a.compose(b).matrix, a.matrix @ b.matrix, atol=1e-12)

    def test_inverse_round_trip(self, rng):
        t = random_transform(rng)
        p = rng.standard_normal((7, 3))
        np.testing.assert_allclose(t.inverse().apply(t.apply(p)), p, atol=1e-9)

    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))

    def test_reflection_rejected(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            RigidTransform(r, np.zeros(3))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_rigidity_preserves_distances(self, seed):
        rng = np.random.default_rng(seed)
        t = random_transform(rng)
        p = rng.standard_normal((5, 3))
        q = t.apply(p)
        d_before = np.linalg.norm(p[:, None] - p[None, :], axis=-1)
        d_after = np.linalg.norm(q[:, None] - q[None, :], axis=-1)
        np.testing.assert_allclose(d_after, d_before, atol=1e-9)


class TestFrustumSpec:
    def test_uniform_endpoints(self):
        spec = FrustumSpec.uniform(1.0, 9.0, 5)
        np.testing.assert_allclose(spec.depth_bins, [1, 3, 5, 7, 9])

    @pytest.mark.parametrize("bins", [[], [0.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
    def test_bad_bins_rejected(self, bins):
        with pytest.raises(ValueError):
            FrustumSpec(np.asarray(bins))


class TestLiftPixels:
    def test_lattice_values(self, rng):
        rig = make_rig(rng, n_cameras=1, h=2, w=3)
        frustum = FrustumSpec(np.array([1.0, 4.0]))
        pts = lift_pixels(rig, frustum).coords
        assert pts.shape == (1, 2, 3, 2, 3)
        # pixel centers, every depth bin crossed with every pixel
        np.testing.assert_allclose(pts[0, 1, 2, 0], [2.5, 1.5, 1.0])
        np.testing.assert_allclose(pts[0, 0, 0, 1], [0.5, 0.5, 4.0])
        # depth varies only along the last lattice axis
        assert np.ptp(pts[..., 0], axis=3).max() == 0
        assert np.ptp(pts[..., 1], axis=3).max() == 0


class TestUnproject:
    def test_identity_camera_analytic(self):
        # fx=fy=1, principal point at pixel (0.5, 0.5), identity extrinsics:
        # the camera frame IS the ego frame and u,v offsets scale with depth.
        intr = Intrinsics(fx=1.0, fy=1.0, cx=0.5, cy=0.5)
        rig = CameraRig(cameras=((intr, RigidTransform.identity()),), image_h=2, image_w=2)
        frustum = FrustumSpec(np.array([2.0]))
        pts = unproject_to_ego(lift_pixels(rig, frustum), rig)
        np.testing.assert_allclose(pts[0, 0, 0, 0], [0.0, 0.0, 2.0])
        np.testing.assert_allclose(pts[0, 1, 1, 0], [2.0, 2.0, 2.0])

    def test_round_trip_projection(self, rng):
        # Independent oracle: forward pinhole projection must recover the
        # exact (u, v, d) lattice fed into the unprojection.
        rig = make_rig(rng, n_cameras=3, h=4, w=6)
        frustum = FrustumSpec.uniform(1.0, 10.0, 5)
        lattice = lift_pixels(rig, frustum)
        pts = unproject_to_ego(lattice, rig)
        for i, cam in enumerate(rig.cameras):
            u, v, d = project_ego_to_pixel(pts[i], cam)
            np.testing.assert_allclose(u, lattice.coords[i, ..., 0], atol=1e-9)
            np.testing.assert_allclose(v, lattice.coords[i, ..., 1], atol=1e-9)
            np.testing.assert_allclose(d, lattice.coords[i, ..., 2], atol=1e-9)

    def test_depth_monotone_along_ray(self, rng):
        # Points at increasing candidate depths march away from the camera
        # center along a straight line.
        rig = make_rig(rng, n_cameras=1)
        frustum = FrustumSpec.uniform(1.0, 20.0, 8)
        pts = unproject_to_ego(lift_pixels(rig, frustum), rig)
        center = rig.cameras[0][1].translation
        dist = np.linalg.norm(pts[0] - center, axis=-1)
        assert np.all(np.diff(dist, axis=-1) > 0)
        # colinearity: unit directions identical for all depths on a ray
        dirs = (pts[0] - center) / dist[..., None]
        assert np.abs(dirs - dirs[..., :1, :]).max() < 1e-9

    def test_behind_camera_raises(self):
        intr = Intrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
        cam = (intr, RigidTransform.identity())
        with pytest.raises(BehindCamera):
            project_ego_to_pixel(np.array([0.0, 0.0, -1.0]), cam)


class TestAlignHistorical:
    def test_two_path_oracle(self, rng):
        # Oracle: map prev-ego -> world, then world -> curr-ego in two
        # explicit steps and compare with the fused composition.
        prev, curr = random_transform(rng), random_transform(rng)
        p = rng.standard_normal((11, 3))
        world = prev.apply(p)
        expected = curr.inverse().apply(world)
        np.testing.assert_allclose(align_historical(p, prev, curr), expected, atol=1e-9)

    def test_identical_poses_noop(self, rng):
        t = random_transform(rng)
        p = rng.standard_normal((4, 3))
        np.testing.assert_allclose(align_historical(p, t, t), p, atol=1e-9)

    def test_pure_translation(self):
        prev = RigidTransform(np.eye(3), np.array([1.0, 0.0, 0.0]))
        curr = RigidTransform(np.eye(3), np.array([3.0, 0.0, 0.0]))
        out = align_historical(np.zeros((1, 3)), prev, curr)
        np.testing.assert_allclose(out, [[-2.0, 0.0, 0.0]])


class TestVoxelize:
    GRID = VoxelGridSpec(nx=4, ny=4, nz=2, min_bound=[-2, -2, 0], max_bound=[2, 2, 2])

    @pytest.mark.parametrize(
        "point,index,valid",
        [
            ([-2.0, -2.0, 0.0], [0, 0, 0], True),   # exactly on min bound
            ([-1.0 - 1e-12, 0.0, 0.5], [0, 2, 0], True),
            ([-1.0, 0.0, 0.5], [1, 2, 0], True),     # half-open edge
            ([1.999, 1.999, 1.999], [3, 3, 1], True),
            ([2.0, 0.0, 1.0], None, False),          # exactly on max bound
            ([0.0, 0.0, -0.001], None, False),
            ([5.0, 0.0, 1.0], None, False),
        ],
    )
    def test_scalar_oracle(self, point, index, valid):
        vc = voxelize(np.asarray([point]), self.GRID)
        assert bool(vc.valid[0]) is valid
        if valid:
            assert vc.indices[0].tolist() == index

    def test_cell_centers_round_trip(self):
        # Every cell center must voxelize back to its own index.
        centers = self.GRID.cell_centers_xy().reshape(-1, 2)
        for z in range(self.GRID.nz):
            zc = self.GRID.min_bound[2] + (z + 0.5) * self.GRID.cell_size[2]
            pts = np.hstack([centers, np.full((len(centers), 1), zc)])
            vc = voxelize(pts, self.GRID)
            assert vc.valid.all()
            expect = np.stack(np.meshgrid(np.arange(4), np.arange(4), indexing="ij"), -1).reshape(-1, 2)
            np.testing.assert_array_equal(vc.indices[:, :2], expect)
            np.testing.assert_array_equal(vc.indices[:, 2], z)

    @settings(max_examples=50, deadline=None)
    @given(
        x=st.floats(-10, 10), y=st.floats(-10, 10), z=st.floats(-10, 10),
    )
    def test_brute_force_membership(self, x, y, z):
        # Independent oracle: scan all cells for half-open containment.
        # Points within rounding distance of a cell face are ambiguous
        # between the two formulations, so skip those.
        g = self.GRID
        for val, lo, cs in zip((x, y, z), g.min_bound, g.cell_size):
            frac = ((val - lo) / cs) % 1.0
            assume(min(frac, 1.0 - frac) > 1e-9)
        vc = voxelize(np.array([[x, y, z]]), g)
        found = None
        cs = g.cell_size
        for ix in range(g.nx):
            for iy in range(g.ny):
                for iz in range(g.nz):
                    lo = g.min_bound + cs * [ix, iy, iz]
                    hi = lo + cs
                    if np.all([x, y, z] >= lo) and np.all([x, y, z] < hi):
                        found = [ix, iy, iz]
        if found is None:
            assert not vc.valid[0]
        else:
            assert vc.valid[0]
            assert vc.indices[0].tolist() == found

    def test_invalid_entries_zeroed(self):
        vc = voxelize(np.array([[99.0, 99.0, 99.0]]), self.GRID)
        assert not vc.valid[0]
        assert vc.indices[0].tolist() == [0, 0, 0]


class TestBuildVoxelCoords:
    def test_matches_manual_composition(self, rng):
        rig = make_rig(rng, n_cameras=2, h=3, w=3)
        frustum = FrustumSpec.uniform(1.0, 8.0, 4)
        grid = VoxelGridSpec(nx=8, ny=8, nz=4, min_bound=[-10, -10, -5], max_bound=[10, 10, 5])
        vc = build_voxel_coords(rig, frustum, grid)
        manual = voxelize(unproject_to_ego(lift_pixels(rig, frustum), rig), grid)
        np.testing.assert_array_equal(vc.indices, manual.indices)
        np.testing.assert_array_equal(vc.valid, manual.valid)

    def test_temporal_consistency(self, rng):
        # A historical frustum expressed with both poses equal must produce
        # the same voxel map as the pose-free path.
        rig = make_rig(rng, n_cameras=2, h=3, w=3)
        frustum = FrustumSpec.uniform(1.0, 8.0, 4)
        grid = VoxelGridSpec(nx=8, ny=8, nz=4, min_bound=[-10, -10, -5], max_bound=[10, 10, 5])
        pose = random_transform(rng)
        a = build_voxel_coords(rig, frustum, grid)
        b = build_voxel_coords(rig, frustum, grid, ego_pose_prev=pose, ego_pose_curr=pose)
        np.testing.assert_array_equal(a.indices, b.indices)
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_translation_shifts_cells(self):
        # Ego moved +1m in x between frames: a point fixed in the world
        # sits one 1m-cell lower along x in the current ego frame.
        intr = Intrinsics(fx=1.0, fy=1.0, cx=0.5, cy=0.5)
        rig = CameraRig(cameras=((intr, RigidTransform.identity()),), image_h=1, image_w=1)
        frustum = FrustumSpec(np.array([3.5]))
        grid = VoxelGridSpec(nx=8, ny=8, nz=8, min_bound=[-4, -4, -4], max_bound=[4, 4, 4])
        prev = RigidTransform(np.eye(3), np.array([0.0, 0.0, 0.0]))
        curr = RigidTransform(np.eye(3), np.array([1.0, 0.0, 0.0]))
        static = build_voxel_coords(rig, frustum, grid)
        moved = build_voxel_coords(rig, frustum, grid, ego_pose_prev=prev, ego_pose_curr=curr)
        assert static.valid.all() and moved.valid.all()
        diff = static.indices.astype(int) - moved.indices.astype(int)
        assert diff[0, 0, 0, 0].tolist() == [1, 0, 0]

    def test_mismatched_pose_args_rejected(self, rng):
        rig = make_rig(rng, 1, 2, 2)
        frustum = FrustumSpec(np.array([1.0]))
        grid = VoxelGridSpec(nx=2, ny=2, nz=2, min_bound=[-1, -1, -1], max_bound=[1, 1, 1])
        with pytest.raises(ValueError):
            build_voxel_coords(rig, frustum, grid, ego_pose_prev=RigidTransform.identity())
