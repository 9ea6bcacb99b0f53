"""Global translation recovery from 2D evidence.

Solves, per sequence, for camera-frame translations T (one 3-vector per
frame) minimizing a confidence-weighted reprojection error plus a
translation smoothness term:

    sum_t sum_j w_tj ||project(J_tj + T_t) - P_tj||^2
      + lambda^2 sum_t ||T_{t+1} - T_t||^2

The smoothness weight lambda (px/m) balances pixel-unit reprojection
residuals against meter-unit translation differences; residuals are squared
inside a Gauss-Newton iteration with backtracking line search. Joints with
zero confidence contribute no residual rows, so their pixel values cannot
influence the solution; a frame with no confident joints is carried by the
smoothness term alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ProjectionError,
    ShapeMismatchError,
    TranslationSolveError,
)

DEFAULT_SMOOTHNESS = 100.0  # px/m
MIN_DEPTH = 1e-3            # meters; iterates may not put joints behind the camera


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: tuple[float, float]
    principal_point: tuple[float, float]

    def __post_init__(self):
        if not (self.focal[0] > 0 and self.focal[1] > 0):
            raise ConfigError(f"focal lengths must be positive, got {self.focal}")


@dataclass(frozen=True)
class TranslationTrack:
    """Per-frame camera-frame translation, (F, 3) meters, subject in front
    of the camera."""

    T: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.T, dtype=np.float64)
        if t.ndim != 2 or t.shape[1] != 3:
            raise ShapeMismatchError(f"T must be (F, 3), got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise TranslationSolveError("translation track contains non-finite values")
        if np.any(t[:, 2] <= 0):
            raise TranslationSolveError("translation track has nonpositive depths")
        object.__setattr__(self, "T", t)


@dataclass
class SolveResult:
    track: TranslationTrack
    converged: bool
    iterations: int
    objective_trace: list = field(default_factory=list)


def project(camera: CameraIntrinsics, points):
    """Pinhole projection of (..., 3) camera-frame points to (..., 2) pixels."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (..., 3) points, got {points.shape}")
    z = points[..., 2]
    if np.any(z <= 0):
        raise ProjectionError(f"nonpositive depth in projection (min z = {z.min():.4g})")
    fx, fy = camera.focal
    cx, cy = camera.principal_point
    u = fx * points[..., 0] / z + cx
    v = fy * points[..., 1] / z + cy
    return np.stack([u, v], axis=-1)


def _weak_perspective_init(joints, pixels, conf, camera):
    """Per-frame initial translation from a weak-perspective depth estimate,
    z0 = f * skeleton_size_3d / skeleton_size_2d, with the lateral offset
    chosen so projected and detected centroids agree. Frames without
    confident joints borrow the nearest confident frame's estimate."""
    frames = joints.shape[0]
    f_mean = 0.5 * (camera.focal[0] + camera.focal[1])
    cx, cy = camera.principal_point
    init = np.zeros((frames, 3))
    have = np.zeros(frames, dtype=bool)
    for t in range(frames):
        w = conf[t]
        idx = np.nonzero(w > 0)[0]
        if len(idx) < 2:
            continue
        ww = w[idx] / w[idx].sum()
        x3 = joints[t, idx]
        p2 = pixels[t, idx]
        c3 = (ww[:, None] * x3).sum(0)
        c2 = (ww[:, None] * p2).sum(0)
        size3 = np.sqrt((ww * ((x3 - c3) ** 2).sum(-1)).sum())
        size2 = np.sqrt((ww * ((p2 - c2) ** 2).sum(-1)).sum())
        if size2 < 1e-6 or size3 < 1e-9:
            continue
        z0 = f_mean * size3 / size2
        init[t, 2] = z0
        init[t, 0] = (c2[0] - cx) * z0 / camera.focal[0] - c3[0]
        init[t, 1] = (c2[1] - cy) * z0 / camera.focal[1] - c3[1]
        have[t] = True
    if not have.any():
        raise TranslationSolveError(
            "no frame has two or more confident joints; translation is unobservable"
        )
    # fill gaps from the nearest initialized frame
    known = np.nonzero(have)[0]
    for t in range(frames):
        if not have[t]:
            nearest = known[np.argmin(np.abs(known - t))]
            init[t] = init[nearest]
    # keep depths safely positive
    init[:, 2] = np.maximum(init[:, 2], 10 * MIN_DEPTH)
    return init


def _residuals_and_jacobian(T, joints, pixels, conf, camera, smooth, want_jac=True):
    frames = joints.shape[0]
    fx, fy = camera.focal
    obs = [(t, j) for t in range(frames) for j in np.nonzero(conf[t] > 0)[0]]
    n_res = 2 * len(obs) + 3 * (frames - 1)
    r = np.zeros(n_res)
    jac = np.zeros((n_res, 3 * frames)) if want_jac else None
    row = 0
    for t, j in obs:
        x, y, z = joints[t, j] + T[t]
        if z <= MIN_DEPTH:
            return None, None
        sw = np.sqrt(conf[t, j])
        r[row] = sw * (fx * x / z + camera.principal_point[0] - pixels[t, j, 0])
        r[row + 1] = sw * (fy * y / z + camera.principal_point[1] - pixels[t, j, 1])
        if want_jac:
            col = 3 * t
            jac[row, col] = sw * fx / z
            jac[row, col + 2] = -sw * fx * x / z ** 2
            jac[row + 1, col + 1] = sw * fy / z
            jac[row + 1, col + 2] = -sw * fy * y / z ** 2
        row += 2
    for t in range(frames - 1):
        diff = T[t + 1] - T[t]
        r[row:row + 3] = smooth * diff
        if want_jac:
            jac[row:row + 3, 3 * (t + 1):3 * (t + 1) + 3] = smooth * np.eye(3)
            jac[row:row + 3, 3 * t:3 * t + 3] = -smooth * np.eye(3)
        row += 3
    return r, jac


def solve_translation(joints, pixels, conf, camera,
                      smoothness_weight=DEFAULT_SMOOTHNESS,
                      max_iters=50, step_tol=1e-6, max_backtracks=10):
    """Gauss-Newton fit of per-frame translations.

    joints: (F, J, 3) root-relative 3D joints (meters); pixels: (F, J, 2)
    detected positions; conf: (F, J) nonnegative weights (zero excludes the
    joint); camera: CameraIntrinsics. Returns a SolveResult whose
    objective_trace is the sequence of accepted objective values.
    """
    joints = np.asarray(joints, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    if joints.ndim != 3 or joints.shape[-1] != 3:
        raise ShapeMismatchError(f"joints must be (F, J, 3), got {joints.shape}")
    if pixels.shape != joints.shape[:2] + (2,):
        raise ShapeMismatchError(f"pixels must be (F, J, 2), got {pixels.shape}")
    if conf.shape != joints.shape[:2]:
        raise ShapeMismatchError(f"conf must be (F, J), got {conf.shape}")
    if np.any(conf < 0):
        raise ConfigError("confidences must be nonnegative")
    if not np.any(conf > 0):
        raise TranslationSolveError("all confidences are zero; nothing to fit")

    T = _weak_perspective_init(joints, pixels, conf, camera)
    smooth = float(smoothness_weight)

    def objective(candidate):
        r, _ = _residuals_and_jacobian(candidate, joints, pixels, conf, camera,
                                       smooth, want_jac=False)
        return np.inf if r is None else float(r @ r)

    trace = [objective(T)]
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        r, jac = _residuals_and_jacobian(T, joints, pixels, conf, camera, smooth)
        if r is None:
            break
        delta, *_ = np.linalg.lstsq(jac, -r, rcond=None)
        delta = delta.reshape(T.shape)
        alpha = 1.0
        accepted = False
        for _ in range(max_backtracks + 1):
            cand = T + alpha * delta
            obj = objective(cand)
            if obj < trace[-1]:
                T = cand
                trace.append(obj)
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no decreasing step: either at a (local) optimum or diverging
            converged = np.linalg.norm(delta) < 1.0
            break
        if alpha * np.linalg.norm(delta) < step_tol:
            converged = True
            break
    else:
        converged = True  # ran the full budget with monotone progress

    T[:, 2] = np.maximum(T[:, 2], MIN_DEPTH)
    return SolveResult(track=TranslationTrack(T=T), converged=converged,
                       iterations=iterations, objective_trace=trace)
