import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from occmocap.errors import DataError, NumericalError, ShapeMismatchError
from occmocap.metrics import (
    accel_error,
    format_report,
    mpjpe,
    pa_mpjpe,
    parse_report,
    pve,
    similarity_procrustes,
)


def random_joints(rng, frames=4, joints=14):
    return rng.standard_normal((frames, joints, 3)) * 0.3


class TestMpjpe:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(0)
        x = random_joints(rng)
        assert mpjpe(x, x) == 0.0

    def test_constant_offset_is_zero(self):
        rng = np.random.default_rng(1)
        gt = random_joints(rng)
        assert mpjpe(gt + np.array([0.3, -0.1, 0.2]), gt) < 1e-9

    def test_single_displaced_joint(self):
        """One joint 50 mm off, J=14, F=1: hips untouched so root alignment
        is a no-op and the mean is 50/14 mm."""
        rng = np.random.default_rng(2)
        gt = random_joints(rng, frames=1)
        pred = gt.copy()
        pred[0, 7, 0] += 0.050
        assert mpjpe(pred, gt) == pytest.approx(50.0 / 14.0, abs=1e-9)

    def test_root_inference_24_joints(self):
        rng = np.random.default_rng(3)
        gt = random_joints(rng, joints=24)
        pred = gt + np.array([1.0, 2.0, 3.0])
        assert mpjpe(pred, gt) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            mpjpe(np.zeros((2, 14, 3)), np.zeros((2, 13, 3)))


class TestPaMpjpe:
    def test_similarity_transform_is_zero(self):
        rng = np.random.default_rng(4)
        gt = random_joints(rng)
        r = Rotation.from_rotvec(rng.standard_normal(3)).as_matrix()
        pred = 1.7 * gt @ r.T + np.array([0.5, -0.2, 0.9])
        assert pa_mpjpe(pred, gt) < 1e-9

    def test_identical_is_zero(self):
        rng = np.random.default_rng(5)
        x = random_joints(rng)
        assert pa_mpjpe(x, x) < 1e-12

    def test_matches_brute_force_oracle(self):
        """Nonlinear optimization over (s, rotvec, t) from 20 restarts."""
        rng = np.random.default_rng(6)
        gt = random_joints(rng, frames=1)[0]
        pred = gt + rng.standard_normal(gt.shape) * 0.05

        def objective(x):
            s, rotvec, t = x[0], x[1:4], x[4:7]
            r = Rotation.from_rotvec(rotvec).as_matrix()
            return (((s * pred @ r.T + t) - gt) ** 2).sum()

        best = np.inf
        best_x = None
        for _ in range(20):
            x0 = np.concatenate([[rng.uniform(0.5, 1.5)], rng.standard_normal(3),
                                 rng.standard_normal(3) * 0.1])
            res = minimize(objective, x0, method="L-BFGS-B",
                           options={"ftol": 1e-18, "gtol": 1e-14, "maxiter": 10000})
            if res.fun < best:
                best, best_x = res.fun, res.x
        s, rotvec, t = best_x[0], best_x[1:4], best_x[4:7]
        r = Rotation.from_rotvec(rotvec).as_matrix()
        oracle_mm = np.linalg.norm((s * pred @ r.T + t) - gt, axis=-1).mean() * 1000.0
        ours = pa_mpjpe(pred[None], gt[None])
        assert ours == pytest.approx(oracle_mm, abs=1e-6)

    def test_never_exceeds_mpjpe(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            gt = random_joints(rng)
            pred = gt + rng.standard_normal(gt.shape) * rng.uniform(0.01, 0.2)
            assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9

    def test_collinear_degenerate(self):
        line = np.zeros((1, 14, 3))
        line[0, :, 0] = np.arange(14)
        with pytest.raises(NumericalError):
            pa_mpjpe(line, line + 0.01)

    def test_procrustes_recovers_planted_transform(self):
        rng = np.random.default_rng(8)
        src = rng.standard_normal((14, 3))
        r_true = Rotation.from_rotvec(rng.standard_normal(3)).as_matrix()
        s_true, t_true = 0.8, np.array([0.1, 0.2, -0.3])
        dst = s_true * src @ r_true.T + t_true
        s, r, t = similarity_procrustes(src, dst)
        assert s == pytest.approx(s_true, abs=1e-9)
        assert np.abs(r - r_true).max() < 1e-9
        assert np.abs(t - t_true).max() < 1e-9


class TestPve:
    def test_identical_meshes(self):
        rng = np.random.default_rng(9)
        v = rng.standard_normal((2, 120, 3))
        assert pve(v, v) == 0.0

    def test_translation_removed_with_roots(self):
        rng = np.random.default_rng(10)
        gt = rng.standard_normal((2, 120, 3))
        root = rng.standard_normal((2, 3))
        shift = np.array([0.4, 0.0, -0.4])
        assert pve(gt + shift, gt, pred_root=root + shift, gt_root=root) < 1e-9

    def test_single_vertex_off(self):
        rng = np.random.default_rng(11)
        gt = rng.standard_normal((1, 120, 3))
        pred = gt.copy()
        pred[0, 50, 2] += 0.010
        root = np.zeros((1, 3))
        assert pve(pred, gt, pred_root=root, gt_root=root) == pytest.approx(10.0 / 120.0, abs=1e-9)

    def test_one_sided_root_rejected(self):
        v = np.zeros((1, 120, 3))
        with pytest.raises(DataError):
            pve(v, v, pred_root=np.zeros((1, 3)))


class TestAccel:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(12)
        x = random_joints(rng, frames=8)
        assert accel_error(x, x) == 0.0

    def test_linear_drift_is_zero(self):
        rng = np.random.default_rng(13)
        gt = random_joints(rng, frames=8)
        v = rng.standard_normal(3) * 0.1
        t = np.arange(8, dtype=np.float64)[:, None, None]
        pred = gt + t * v
        assert accel_error(pred, gt) < 1e-9

    def test_quadratic_drift_exact(self):
        rng = np.random.default_rng(14)
        gt = random_joints(rng, frames=8)
        a = np.array([0.002, -0.001, 0.0005])
        t = np.arange(8, dtype=np.float64)[:, None, None]
        pred = gt + 0.5 * t ** 2 * a
        assert accel_error(pred, gt) == pytest.approx(np.linalg.norm(a) * 1000.0, abs=1e-9)

    def test_too_few_frames(self):
        with pytest.raises(DataError):
            accel_error(np.zeros((2, 14, 3)), np.zeros((2, 14, 3)))


class TestReport:
    def test_round_trip(self):
        per_seq = {
            "seq001": {"mpjpe": 58.2, "pa_mpjpe": 40.1, "pve": 70.25, "accel": 23.2},
            "seq000": {"mpjpe": 60.0, "pa_mpjpe": 41.0, "pve": 71.0, "accel": 25.0},
        }
        agg = {"mpjpe": 59.1, "pa_mpjpe": 40.55, "pve": 70.625, "accel": 24.1}
        text = format_report(per_seq, agg)
        back_seq, back_agg = parse_report(text)
        for name, vals in per_seq.items():
            for m, v in vals.items():
                assert back_seq[name][m] == pytest.approx(v, abs=1e-6)
        for m, v in agg.items():
            assert back_agg[m] == pytest.approx(v, abs=1e-6)

    def test_malformed_line(self):
        with pytest.raises(DataError):
            parse_report("sequence x: mpjpe\n")
