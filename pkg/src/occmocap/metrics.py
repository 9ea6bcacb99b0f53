"""Evaluation metrics for 3D pose and mesh recovery.

All positional inputs are in meters; results are reported in millimeters
(mm, mm, mm, and mm/frame^2 respectively). Joint arrays are (F, J, 3).
Root alignment follows the usual Human3.6M protocol: subtract the pelvis
per frame. For 14-joint LSP input the pelvis is the midpoint of the two
hips (rows 2 and 3); for other joint sets row 0 is treated as the root
unless an explicit index is given.

Acceleration error is per frame^2 at the native frame rate; at 10 FPS one
frame is 0.1 s, so mm/frame^2 values divide by 0.01 to become mm/s^2.

PVE accepts optional explicit per-frame root positions (e.g. pelvis joints
from the body model); without them vertices are compared unaligned, since a
mesh carries no canonical pelvis vertex. Whether to root-align PVE at all
is a convention choice; this module aligns when roots are supplied.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, NumericalError, ShapeMismatchError

LSP_HIP_ROWS = (2, 3)  # right hip, left hip in LSP order


def _check_pair(pred, gt, name):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"{name}: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeMismatchError(f"{name}: expected (F, J, 3), got {pred.shape}")
    return pred, gt


def _root(joints, root):
    if root is None:
        if joints.shape[1] == 14:
            hips = joints[:, LSP_HIP_ROWS, :]
            return hips.mean(axis=1, keepdims=True)
        return joints[:, :1, :]
    return joints[:, root:root + 1, :]


def mpjpe(pred, gt, root=None):
    """Mean per-joint position error in mm after per-frame root alignment."""
    pred, gt = _check_pair(pred, gt, "mpjpe")
    pred = pred - _root(pred, root)
    gt = gt - _root(gt, root)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def similarity_procrustes(pred, gt):
    """Best similarity transform (scale, R, t) aligning one frame of joints
    to another in the least-squares sense. pred, gt: (J, 3)."""
    mu1 = pred.mean(axis=0)
    mu2 = gt.mean(axis=0)
    x1 = pred - mu1
    x2 = gt - mu2
    var1 = (x1 ** 2).sum()
    if var1 < 1e-12:
        raise NumericalError("degenerate pose: all joints coincide")
    k = x1.T @ x2
    u, s, vh = np.linalg.svd(k)
    if s[1] < 1e-10 * max(s[0], 1e-30):
        raise NumericalError("degenerate pose: joints are collinear")
    z = np.eye(3)
    z[-1, -1] = np.sign(np.linalg.det(u @ vh))
    r = (u @ z @ vh).T
    scale = np.trace(r @ k) / var1
    t = mu2 - scale * (r @ mu1)
    return scale, r, t


def pa_mpjpe(pred, gt):
    """MPJPE in mm after per-frame similarity Procrustes alignment of the
    prediction onto the ground truth."""
    pred, gt = _check_pair(pred, gt, "pa_mpjpe")
    if pred.shape[1] < 3:
        raise DataError("pa_mpjpe needs at least 3 joints")
    errs = []
    for f in range(pred.shape[0]):
        scale, r, t = similarity_procrustes(pred[f], gt[f])
        aligned = scale * (pred[f] @ r.T) + t
        errs.append(np.linalg.norm(aligned - gt[f], axis=-1).mean())
    return float(np.mean(errs) * 1000.0)


def pve(pred_vertices, gt_vertices, pred_root=None, gt_root=None):
    """Mean per-vertex error in mm.

    pred_root / gt_root: optional (F, 3) per-frame root positions subtracted
    before comparison (pass pelvis joints to follow the root-aligned
    convention). Both or neither must be given.
    """
    pred, gt = _check_pair(pred_vertices, gt_vertices, "pve")
    if (pred_root is None) != (gt_root is None):
        raise DataError("pve: pass both roots or neither")
    if pred_root is not None:
        pred_root = np.asarray(pred_root, dtype=np.float64)
        gt_root = np.asarray(gt_root, dtype=np.float64)
        if pred_root.shape != (pred.shape[0], 3) or gt_root.shape != (gt.shape[0], 3):
            raise ShapeMismatchError("pve roots must be (F, 3)")
        pred = pred - pred_root[:, None, :]
        gt = gt - gt_root[:, None, :]
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def accel_error(pred, gt):
    """Mean acceleration difference in mm/frame^2.

    The per-joint acceleration is the second difference
    a_t = x_{t+1} - 2 x_t + x_{t-1}; the error averages the Euclidean norm
    of (a_pred - a_gt) over the F-2 interior frames and all joints.
    """
    pred, gt = _check_pair(pred, gt, "accel_error")
    if pred.shape[0] < 3:
        raise DataError(f"accel_error needs at least 3 frames, got {pred.shape[0]}")
    a_pred = pred[2:] - 2 * pred[1:-1] + pred[:-2]
    a_gt = gt[2:] - 2 * gt[1:-1] + gt[:-2]
    return float(np.linalg.norm(a_pred - a_gt, axis=-1).mean() * 1000.0)


METRIC_NAMES = ("mpjpe", "pa_mpjpe", "pve", "accel")


def format_report(per_sequence, aggregate):
    """Render an evaluation report: one line per sequence, one aggregate line.

    per_sequence: {sequence_name: {metric: value}}; aggregate: {metric: value}.
    Values are written with 6 decimal places, space-separated
    ``name value`` pairs, which keeps the file trivially parseable.
    """
    lines = ["# evaluation report (mm; accel in mm/frame^2)"]
    for name in sorted(per_sequence):
        vals = per_sequence[name]
        pairs = " ".join(f"{m} {vals[m]:.6f}" for m in METRIC_NAMES if m in vals)
        lines.append(f"sequence {name}: {pairs}")
    pairs = " ".join(f"{m} {aggregate[m]:.6f}" for m in METRIC_NAMES if m in aggregate)
    lines.append(f"aggregate: {pairs}")
    return "\n".join(lines) + "\n"


def parse_report(text):
    """Inverse of :func:`format_report`: returns (per_sequence, aggregate)."""
    per_sequence = {}
    aggregate = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        head, _, rest = line.partition(":")
        tokens = rest.split()
        if len(tokens) % 2 != 0:
            raise DataError(f"malformed report line: {line!r}")
        vals = {tokens[i]: float(tokens[i + 1]) for i in range(0, len(tokens), 2)}
        if head == "aggregate":
            aggregate = vals
        elif head.startswith("sequence "):
            per_sequence[head[len("sequence "):]] = vals
        else:
            raise DataError(f"malformed report line: {line!r}")
    return per_sequence, aggregate
