"""Motion-map primitives: bounding-box normalization, occlusion tokens, rotations.

A 2D motion map is an (F, K, 2) grid of bbox-normalized joint coordinates,
one row per frame. A 3D motion map is an (F, N, 6) grid of per-joint rotations
in the continuous 6D representation (first two columns of the rotation
matrix). Occluded joint-frame cells carry a shared token value instead of a
coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidBboxError, ShapeMismatchError, SingularRotationError

# Norm floor in the Gram-Schmidt decode; keeps near-degenerate training
# iterates finite without affecting well-conditioned inputs.
GS_EPS = 1e-8

# Tolerance for accepting a matrix as orthonormal when encoding to 6D.
ORTHONORMAL_TOL = 1e-5


@dataclass(frozen=True)
class Bbox:
    """Square-normalizing bounding box: ``center`` in pixels, ``scale`` = max(width, height)."""

    center: tuple[float, float]
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidBboxError(f"bbox scale must be positive, got {self.scale}")


def bbox_from_points(points, pad: float = 0.2) -> Bbox:
    """Tight bbox of (M, 2) pixel points, scale padded by ``pad`` (fraction)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[-1] != 2 or points.shape[0] == 0:
        raise ShapeMismatchError(f"expected (M, 2) points, got {points.shape}")
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = (lo + hi) / 2.0
    scale = float(max(hi[0] - lo[0], hi[1] - lo[1]) * (1.0 + pad))
    if scale <= 0:
        raise InvalidBboxError("degenerate bbox: all points coincide")
    return Bbox(center=(float(center[0]), float(center[1])), scale=scale)


def normalize_pose2d(joints, bbox: Bbox):
    """Map (..., 2) pixel joints into bbox units: (joints - center) / scale."""
    if bbox.scale <= 0:
        raise InvalidBboxError(f"bbox scale must be positive, got {bbox.scale}")
    center = _as_like(joints, bbox.center)
    return (joints - center) / bbox.scale


def denormalize_pose2d(joints, bbox: Bbox):
    """Inverse of :func:`normalize_pose2d`."""
    if bbox.scale <= 0:
        raise InvalidBboxError(f"bbox scale must be positive, got {bbox.scale}")
    center = _as_like(joints, bbox.center)
    return joints * bbox.scale + center


def _as_like(arr, values):
    if isinstance(arr, torch.Tensor):
        return torch.as_tensor(values, dtype=arr.dtype, device=arr.device)
    return np.asarray(values, dtype=np.asarray(arr).dtype)


def apply_occlusion_token(values, mask, token):
    """Replace masked joint-frame cells of a 2D motion map with a token value.

    ``values`` is (..., K, 2), ``mask`` a boolean (..., K) grid (true =
    occluded), ``token`` a 2-vector. Unmasked cells are returned bit-identical;
    the input is never mutated. Works on torch tensors (differentiable w.r.t.
    ``token``) and numpy arrays alike.
    """
    if tuple(values.shape[:-1]) != tuple(mask.shape) or values.shape[-1] != 2:
        raise ShapeMismatchError(
            f"map shape {tuple(values.shape)} does not match mask shape {tuple(mask.shape)}"
        )
    if isinstance(values, torch.Tensor):
        token = torch.as_tensor(token, dtype=values.dtype, device=values.device) \
            if not isinstance(token, torch.Tensor) else token.to(values.dtype)
        if token.shape != (2,):
            raise ShapeMismatchError(f"token must be a 2-vector, got {tuple(token.shape)}")
        mask_t = torch.as_tensor(mask, dtype=torch.bool, device=values.device)
        return torch.where(mask_t.unsqueeze(-1), token, values)
    values = np.asarray(values)
    token = np.asarray(token, dtype=values.dtype)
    if token.shape != (2,):
        raise ShapeMismatchError(f"token must be a 2-vector, got {token.shape}")
    return np.where(np.asarray(mask, dtype=bool)[..., None], token, values)


def rot6d_to_matrix(v):
    """Decode (..., 6) continuous rotation vectors to (..., 3, 3) matrices.

    The two 3-vector halves are treated as the first two matrix columns and
    orthonormalized by Gram-Schmidt; the third column is their cross product.
    Norms are floored at GS_EPS, so near-degenerate inputs stay finite.
    """
    v, to_numpy = _as_tensor(v)
    if v.shape[-1] != 6:
        raise ShapeMismatchError(f"expected (..., 6) input, got {tuple(v.shape)}")
    a1, a2 = v[..., :3], v[..., 3:]
    b1 = a1 / a1.norm(dim=-1, keepdim=True).clamp(min=GS_EPS)
    b2 = a2 - (b1 * a2).sum(dim=-1, keepdim=True) * b1
    b2 = b2 / b2.norm(dim=-1, keepdim=True).clamp(min=GS_EPS)
    b3 = torch.cross(b1, b2, dim=-1)
    out = torch.stack([b1, b2, b3], dim=-1)
    return out.numpy() if to_numpy else out


def matrix_to_rot6d(rotmat):
    """Encode (..., 3, 3) rotation matrices as (..., 6): the first two columns.

    Inputs must be orthonormal with positive determinant within
    ORTHONORMAL_TOL; anything else raises SingularRotationError.
    """
    rotmat, to_numpy = _as_tensor(rotmat)
    if rotmat.shape[-2:] != (3, 3):
        raise ShapeMismatchError(f"expected (..., 3, 3) input, got {tuple(rotmat.shape)}")
    with torch.no_grad():
        eye = torch.eye(3, dtype=rotmat.dtype)
        ortho_err = (rotmat.transpose(-1, -2) @ rotmat - eye).abs().max()
        det = torch.linalg.det(rotmat)
        if ortho_err > ORTHONORMAL_TOL or (det - 1.0).abs().max() > 1e-3:
            raise SingularRotationError(
                f"input is not a rotation matrix (orthonormality error {ortho_err:.2e}, "
                f"det range [{det.min():.4f}, {det.max():.4f}])"
            )
    out = torch.cat([rotmat[..., :, 0], rotmat[..., :, 1]], dim=-1)
    return out.numpy() if to_numpy else out


def axis_angle_to_matrix(aa):
    """Rodrigues formula: (..., 3) axis-angle to (..., 3, 3) rotation matrices."""
    aa, to_numpy = _as_tensor(aa)
    if aa.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (..., 3) input, got {tuple(aa.shape)}")
    theta = aa.norm(dim=-1, keepdim=True).clamp(min=GS_EPS)
    axis = aa / theta
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)
    theta = theta.unsqueeze(-1)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    out = eye + torch.sin(theta) * k + (1.0 - torch.cos(theta)) * (k @ k)
    return out.numpy() if to_numpy else out


def _as_tensor(arr):
    """Return (tensor, was_numpy). Numpy inputs round-trip back to numpy."""
    if isinstance(arr, torch.Tensor):
        return arr, False
    return torch.as_tensor(np.asarray(arr, dtype=np.float64)), True
