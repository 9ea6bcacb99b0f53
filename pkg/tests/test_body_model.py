import numpy as np
import pytest
import torch

from occmocap.body_model import (
    NUM_BETAS,
    NUM_JOINTS,
    BodyModel,
    ShapeParams,
    _topological_order,
    load_body_archive,
)
from occmocap.errors import ConfigError, ShapeMismatchError, SingularRotationError
from occmocap.motion_repr import axis_angle_to_matrix, rot6d_to_matrix


@pytest.fixture(scope="module")
def body():
    return BodyModel(dtype=torch.float64)


def identity_pose(batch=()):
    return torch.eye(3, dtype=torch.float64).expand(*batch, NUM_JOINTS, 3, 3).clone()


def random_pose(rng, batch=(), scale=0.6):
    aa = torch.as_tensor(rng.standard_normal((*batch, NUM_JOINTS, 3)) * scale)
    return axis_angle_to_matrix(aa)


class TestConstruction:
    def test_shapes(self, body):
        assert body.template_vertices.shape == (120, 3)
        assert body.shape_dirs.shape == (120, 3, 10)
        assert body.joint_regressor.shape == (24, 120)
        assert body.lsp_regressor.shape == (14, 120)
        assert body.skinning_weights.shape == (120, 24)

    def test_rows_sum_to_one(self, body):
        for mat in (body.joint_regressor, body.lsp_regressor, body.skinning_weights):
            assert torch.abs(mat.sum(-1) - 1.0).max() < 1e-6
            assert mat.min() >= 0

    def test_tree_single_root(self):
        assert _topological_order([-1, 0, 1])[0] == 0
        with pytest.raises(ConfigError):
            _topological_order([-1, 0, -1])
        with pytest.raises(ConfigError):
            _topological_order([1, 0])  # cycle, no root

    def test_shape_params_validation(self):
        ShapeParams(np.zeros(10))
        with pytest.raises(ShapeMismatchError):
            ShapeParams(np.zeros(9))
        with pytest.raises(ConfigError):
            ShapeParams(np.full(10, np.nan))


class TestForward:
    def test_identity_pose_zero_beta_is_rest(self, body):
        verts, joints = body(identity_pose(), torch.zeros(10, dtype=torch.float64))
        assert torch.abs(verts - body.template_vertices).max() < 1e-12
        rest = body.joint_regressor @ body.template_vertices
        assert torch.abs(joints - rest).max() < 1e-12

    def test_beta_e1_adds_first_shape_dir(self, body):
        beta = torch.zeros(10, dtype=torch.float64)
        beta[0] = 1.0
        verts, _ = body(identity_pose(), beta)
        expected = body.template_vertices + body.shape_dirs[:, :, 0]
        assert torch.abs(verts - expected).max() < 1e-12

    def test_root_rotation_rotates_everything(self, body):
        """90 degrees about z at the root: closed-form rigid rotation of rest."""
        pose = identity_pose()
        rz = axis_angle_to_matrix(torch.tensor([0.0, 0.0, np.pi / 2], dtype=torch.float64))
        pose[0] = rz
        beta = torch.zeros(10, dtype=torch.float64)
        verts, joints = body(pose, beta)
        verts0, joints0 = body(identity_pose(), beta)
        assert torch.abs(verts - verts0 @ rz.T).max() < 1e-12
        assert torch.abs(joints - joints0 @ rz.T).max() < 1e-12

    def test_root_stays_at_origin(self, body):
        rng = np.random.default_rng(0)
        for beta_scale in (0.0, 2.0):
            beta = torch.as_tensor(rng.standard_normal(10) * beta_scale)
            _, joints = body(random_pose(rng), beta)
            assert torch.abs(joints[0]).max() < 1e-12

    def test_batched_matches_loop(self, body):
        rng = np.random.default_rng(1)
        pose = random_pose(rng, batch=(3,))
        beta = torch.as_tensor(rng.standard_normal((3, 10)) * 0.5)
        verts_b, joints_b = body(pose, beta)
        for i in range(3):
            v, j = body(pose[i], beta[i])
            assert torch.abs(verts_b[i] - v).max() < 1e-12
            assert torch.abs(joints_b[i] - j).max() < 1e-12

    def test_invalid_rotation_rejected(self, body):
        pose = identity_pose()
        pose[3] *= 1.5
        with pytest.raises(SingularRotationError):
            body(pose, torch.zeros(10, dtype=torch.float64))

    def test_shape_params_accepted(self, body):
        verts, _ = body(identity_pose(), ShapeParams(np.zeros(10)))
        assert torch.abs(verts - body.template_vertices).max() < 1e-12


class TestInvariants:
    def test_rigid_equivariance(self, body):
        rng = np.random.default_rng(7)
        for _ in range(5):
            pose = random_pose(rng)
            beta = torch.as_tensor(rng.standard_normal(10) * 0.5)
            r0 = axis_angle_to_matrix(torch.as_tensor(rng.standard_normal(3)))
            rotated = pose.clone()
            rotated[0] = r0 @ pose[0]
            verts_r, joints_r = body(rotated, beta)
            verts, joints = body(pose, beta)
            assert torch.abs(verts_r - verts @ r0.T).max() < 1e-9
            assert torch.abs(joints_r - joints @ r0.T).max() < 1e-9

    def test_bone_lengths_pose_invariant(self, body):
        rng = np.random.default_rng(3)
        beta = torch.as_tensor(rng.standard_normal(10) * 0.5)
        _, rest = body(identity_pose(), beta)
        for _ in range(5):
            _, joints = body(random_pose(rng), beta)
            for i, p in enumerate(body.parents):
                if p < 0:
                    continue
                posed = torch.linalg.norm(joints[i] - joints[p])
                ref = torch.linalg.norm(rest[i] - rest[p])
                assert torch.abs(posed - ref) < 1e-9

    def test_gradients_match_finite_differences(self, body):
        """d joints / d (6D pose, beta) vs central differences, 10 random configs."""
        rng = np.random.default_rng(11)
        h = 1e-4
        for _ in range(10):
            rot6d = torch.as_tensor(rng.standard_normal(NUM_JOINTS * 6))
            beta = torch.as_tensor(rng.standard_normal(10) * 0.3)
            x = torch.cat([rot6d, beta]).requires_grad_(True)

            def joints_sum(x):
                pose = rot6d_to_matrix(x[: NUM_JOINTS * 6].reshape(NUM_JOINTS, 6))
                _, joints = body(pose, x[NUM_JOINTS * 6:], validate=False)
                return (joints * joints).sum()

            joints_sum(x).backward()
            grad = x.grad.numpy()
            fd = np.zeros_like(grad)
            with torch.no_grad():
                for i in range(len(fd)):
                    e = torch.zeros_like(x)
                    e[i] = h
                    fd[i] = ((joints_sum(x + e) - joints_sum(x - e)) / (2 * h)).item()
            denom = max(np.abs(fd).max(), 1e-8)
            assert np.abs(grad - fd).max() / denom < 1e-3


class TestLspRegressor:
    def test_zero_vertices(self, body):
        out = body.regress_joints_lsp(torch.zeros(120, 3, dtype=torch.float64))
        assert torch.abs(out).max() == 0

    def test_translation_equivariance(self, body):
        rng = np.random.default_rng(5)
        verts = torch.as_tensor(rng.standard_normal((120, 3)))
        t = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
        assert torch.abs(
            body.regress_joints_lsp(verts + t) - (body.regress_joints_lsp(verts) + t)
        ).max() < 1e-12

    def test_matches_explicit_weighted_sum(self, body):
        rng = np.random.default_rng(6)
        verts = rng.standard_normal((120, 3))
        out = body.regress_joints_lsp(torch.as_tensor(verts)).numpy()
        reg = body.lsp_regressor.numpy()
        expected = np.zeros((14, 3))
        for l in range(14):
            for v in range(120):
                expected[l] += reg[l, v] * verts[v]
        assert np.abs(out - expected).max() < 1e-12

    def test_shape_mismatch(self, body):
        with pytest.raises(ShapeMismatchError):
            body.regress_joints_lsp(torch.zeros(100, 3, dtype=torch.float64))

    def test_hips_are_left_right_symmetric_at_rest(self, body):
        lsp = body.regress_joints_lsp(body.template_vertices)
        # rows 2/3 are right/left hip; same height, mirrored x
        assert torch.abs(lsp[2, 1] - lsp[3, 1]) < 1e-9
        assert torch.abs(lsp[2, 0] + lsp[3, 0]) < 1e-9


class TestArchiveLoader:
    def test_round_trip(self, body, tmp_path):
        path = tmp_path / "body.npz"
        np.savez(
            path,
            template_vertices=body.template_vertices.numpy(),
            shape_dirs=body.shape_dirs.numpy(),
            parents=np.array(body.parents),
            joint_regressor=body.joint_regressor.numpy(),
            lsp_regressor=body.lsp_regressor.numpy(),
            skinning_weights=body.skinning_weights.numpy(),
        )
        loaded = load_body_archive(path, dtype=torch.float64)
        rng = np.random.default_rng(8)
        pose = random_pose(rng)
        beta = torch.as_tensor(rng.standard_normal(10) * 0.5)
        va, ja = body(pose, beta)
        vb, jb = loaded(pose, beta)
        assert torch.abs(va - vb).max() < 1e-12
        assert torch.abs(ja - jb).max() < 1e-12

    def test_missing_array(self, tmp_path):
        path = tmp_path / "bad.npz"
        np.savez(path, template_vertices=np.zeros((10, 3)))
        with pytest.raises(ConfigError, match="missing"):
            load_body_archive(path)

    def test_bad_regressor_rows(self, body, tmp_path):
        path = tmp_path / "bad2.npz"
        reg = body.joint_regressor.numpy().copy()
        reg[0] *= 2.0
        np.savez(
            path,
            template_vertices=body.template_vertices.numpy(),
            shape_dirs=body.shape_dirs.numpy(),
            parents=np.array(body.parents),
            joint_regressor=reg,
            lsp_regressor=body.lsp_regressor.numpy(),
            skinning_weights=body.skinning_weights.numpy(),
        )
        with pytest.raises(ConfigError, match="sum to 1"):
            load_body_archive(path)
