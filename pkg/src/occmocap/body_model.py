"""Simplified differentiable body model.

Shape blending, forward kinematics over a 24-joint kinematic tree, linear
blend skinning, and a 14-joint regressor in LSP order. The built-in mesh is
a procedural stick figure (5 vertices per joint, V = 120) so the package
ships without licensed assets; ``load_body_archive`` accepts user-supplied
parameter files with the same array layout.

Joint order follows the usual 24-joint body convention (0 = pelvis, ...,
23 = right hand). LSP order is:

    0 R ankle, 1 R knee, 2 R hip, 3 L hip, 4 L knee, 5 L ankle,
    6 R wrist, 7 R elbow, 8 R shoulder, 9 L shoulder, 10 L elbow,
    11 L wrist, 12 neck, 13 head
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeMismatchError, SingularRotationError

NUM_JOINTS = 24
NUM_BETAS = 10
NUM_LSP_JOINTS = 14
VERTS_PER_JOINT = 5

# parent index per joint; -1 marks the root (pelvis)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# LSP joint -> body joint
LSP_TO_BODY = (8, 5, 2, 1, 4, 7, 21, 19, 17, 16, 18, 20, 12, 15)

# T-pose rest joints in meters, pelvis at origin, y up, x to the body's left
_REST_JOINTS = np.array([
    [0.00, 0.00, 0.00],    # pelvis
    [0.09, -0.05, 0.00],   # L hip
    [-0.09, -0.05, 0.00],  # R hip
    [0.00, 0.11, 0.00],    # spine1
    [0.10, -0.45, 0.00],   # L knee
    [-0.10, -0.45, 0.00],  # R knee
    [0.00, 0.23, 0.00],    # spine2
    [0.11, -0.85, 0.00],   # L ankle
    [-0.11, -0.85, 0.00],  # R ankle
    [0.00, 0.29, 0.00],    # spine3
    [0.12, -0.93, 0.12],   # L foot
    [-0.12, -0.93, 0.12],  # R foot
    [0.00, 0.48, 0.00],    # neck
    [0.07, 0.42, 0.00],    # L collar
    [-0.07, 0.42, 0.00],   # R collar
    [0.00, 0.60, 0.02],    # head
    [0.17, 0.45, 0.00],    # L shoulder
    [-0.17, 0.45, 0.00],   # R shoulder
    [0.43, 0.45, 0.00],    # L elbow
    [-0.43, 0.45, 0.00],   # R elbow
    [0.68, 0.45, 0.00],    # L wrist
    [-0.68, 0.45, 0.00],   # R wrist
    [0.76, 0.45, 0.00],    # L hand
    [-0.76, 0.45, 0.00],   # R hand
])

_JOINT_RADII = np.array([
    0.07, 0.05, 0.05, 0.06, 0.04, 0.04, 0.06, 0.03, 0.03, 0.06, 0.02, 0.02,
    0.04, 0.04, 0.04, 0.08, 0.04, 0.04, 0.03, 0.03, 0.02, 0.02, 0.015, 0.015,
])


@dataclass(frozen=True)
class ShapeParams:
    """Shape coefficients, a B-vector; must be finite."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (NUM_BETAS,):
            raise ShapeMismatchError(f"beta must have shape ({NUM_BETAS},), got {beta.shape}")
        if not np.all(np.isfinite(beta)):
            raise ConfigError("beta contains non-finite values")
        object.__setattr__(self, "beta", beta)


def _perp_frame(d):
    """Two unit vectors spanning the plane perpendicular to unit vector d."""
    ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, ref)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    return u, w


def _build_toy_body():
    """Procedural body arrays: a ring of 4 vertices per joint plus one vertex
    at the bone midpoint. Joint regressors average each ring, so regressed
    joints reproduce the skeleton exactly."""
    n = NUM_JOINTS
    v = n * VERTS_PER_JOINT
    verts = np.zeros((v, 3))
    j_reg = np.zeros((n, v))
    skin = np.zeros((v, n))
    for i in range(n):
        p = _REST_JOINTS[i]
        parent = PARENTS[i]
        anchor = _REST_JOINTS[parent] if parent >= 0 else p + np.array([0.0, -0.1, 0.0])
        d = p - anchor
        norm = np.linalg.norm(d)
        d = d / norm if norm > 1e-9 else np.array([0.0, 1.0, 0.0])
        u, w = _perp_frame(d)
        r = _JOINT_RADII[i]
        base = i * VERTS_PER_JOINT
        verts[base + 0] = p + r * u
        verts[base + 1] = p - r * u
        verts[base + 2] = p + r * w
        verts[base + 3] = p - r * w
        verts[base + 4] = (p + anchor) / 2.0
        j_reg[i, base:base + 4] = 0.25
        skin[base:base + 4, i] = 1.0
        if parent >= 0:
            skin[base + 4, i] = 0.5
            skin[base + 4, parent] = 0.5
        else:
            skin[base + 4, i] = 1.0

    lsp_reg = np.zeros((NUM_LSP_JOINTS, v))
    for l, j in enumerate(LSP_TO_BODY):
        lsp_reg[l, j * VERTS_PER_JOINT:j * VERTS_PER_JOINT + 4] = 0.25

    dirs = np.zeros((v, 3, NUM_BETAS))
    dirs[:, 1, 0] = verts[:, 1] * 0.05   # overall height
    dirs[:, 0, 1] = verts[:, 0] * 0.04   # width
    dirs[:, 2, 2] = verts[:, 2] * 0.04   # depth
    rng = np.random.default_rng(20240616)
    for b in range(3, NUM_BETAS):
        per_joint = rng.normal(scale=0.01, size=(n, 3))
        dirs[:, :, b] = np.repeat(per_joint, VERTS_PER_JOINT, axis=0)
    # keep the pelvis ring fixed under shape so the rest root stays at the
    # origin for every beta (re-rooting then never shifts the toy mesh)
    dirs[0:4, :, :] = 0.0

    return {
        "template_vertices": verts,
        "shape_dirs": dirs,
        "parents": np.array(PARENTS, dtype=np.int64),
        "joint_regressor": j_reg,
        "lsp_regressor": lsp_reg,
        "skinning_weights": skin,
    }


def _topological_order(parents):
    parents = [int(p) for p in parents]
    n = len(parents)
    roots = [i for i, p in enumerate(parents) if p == -1]
    if len(roots) != 1:
        raise ConfigError(f"kinematic tree needs exactly one root, found {len(roots)}")
    order = [roots[0]]
    placed = {roots[0]}
    while len(order) < n:
        progressed = False
        for i in range(n):
            if i not in placed and parents[i] in placed:
                order.append(i)
                placed.add(i)
                progressed = True
        if not progressed:
            raise ConfigError("kinematic tree has a cycle or unreachable joints")
    return order


def _check_rows_sum_to_one(name, mat, tol=1e-6):
    if np.any(mat < -tol):
        raise ConfigError(f"{name} has negative entries")
    err = np.abs(mat.sum(axis=-1) - 1.0).max()
    if err > tol:
        raise ConfigError(f"{name} rows must sum to 1 (max deviation {err:.2e})")


class BodyModel(nn.Module):
    """Differentiable body: shaped rest pose -> forward kinematics -> skinning.

    All parameter arrays are registered as buffers and treated as immutable;
    forward keeps the root joint at the origin of the local frame.
    """

    def __init__(self, arrays=None, dtype=torch.float32):
        super().__init__()
        arrays = _build_toy_body() if arrays is None else arrays
        parents = np.asarray(arrays["parents"], dtype=np.int64)
        self.num_joints = len(parents)
        self.num_verts = arrays["template_vertices"].shape[0]
        self.num_betas = arrays["shape_dirs"].shape[2]

        if arrays["template_vertices"].shape != (self.num_verts, 3):
            raise ShapeMismatchError("template_vertices must be (V, 3)")
        if arrays["shape_dirs"].shape != (self.num_verts, 3, self.num_betas):
            raise ShapeMismatchError("shape_dirs must be (V, 3, B)")
        if arrays["joint_regressor"].shape != (self.num_joints, self.num_verts):
            raise ShapeMismatchError("joint_regressor must be (N, V)")
        if arrays["lsp_regressor"].shape != (NUM_LSP_JOINTS, self.num_verts):
            raise ShapeMismatchError(f"lsp_regressor must be ({NUM_LSP_JOINTS}, V)")
        if arrays["skinning_weights"].shape != (self.num_verts, self.num_joints):
            raise ShapeMismatchError("skinning_weights must be (V, N)")
        _check_rows_sum_to_one("joint_regressor", np.asarray(arrays["joint_regressor"]))
        _check_rows_sum_to_one("lsp_regressor", np.asarray(arrays["lsp_regressor"]))
        _check_rows_sum_to_one("skinning_weights", np.asarray(arrays["skinning_weights"]))

        self.parents = [int(p) for p in parents]
        self.topo_order = _topological_order(self.parents)
        self.root = self.topo_order[0]

        as_t = lambda key: torch.as_tensor(np.asarray(arrays[key], dtype=np.float64)).to(dtype)
        self.register_buffer("template_vertices", as_t("template_vertices"))
        self.register_buffer("shape_dirs", as_t("shape_dirs"))
        self.register_buffer("joint_regressor", as_t("joint_regressor"))
        self.register_buffer("lsp_regressor", as_t("lsp_regressor"))
        self.register_buffer("skinning_weights", as_t("skinning_weights"))

    def rest_pose(self, beta):
        """Shaped rest vertices and joints, re-rooted so the pelvis sits at the
        origin. beta: (..., B)."""
        beta = self._as_beta(beta)
        verts = self.template_vertices + torch.einsum("vcb,...b->...vc", self.shape_dirs, beta)
        joints = torch.einsum("nv,...vc->...nc", self.joint_regressor, verts)
        root = joints[..., self.root:self.root + 1, :]
        return verts - root, joints - root

    def forward(self, pose, beta, validate=True):
        """Pose the body.

        pose: (..., N, 3, 3) rotation matrices, one per joint (index 0 = root
        orientation). beta: (B,) or (..., B), or ShapeParams. Returns
        (vertices (..., V, 3), joints (..., N, 3)), differentiable w.r.t.
        both inputs. The root joint stays at the origin.
        """
        if not isinstance(pose, torch.Tensor):
            pose = torch.as_tensor(np.asarray(pose), dtype=self.template_vertices.dtype)
        if pose.shape[-3:] != (self.num_joints, 3, 3):
            raise ShapeMismatchError(
                f"pose must be (..., {self.num_joints}, 3, 3), got {tuple(pose.shape)}"
            )
        if validate:
            with torch.no_grad():
                eye = torch.eye(3, dtype=pose.dtype, device=pose.device)
                err = (pose.transpose(-1, -2) @ pose - eye).abs().max()
                if not torch.isfinite(pose).all() or err > 1e-4:
                    raise SingularRotationError(
                        f"pose entries are not rotation matrices (orthonormality error {err:.2e})"
                    )

        verts_rest, joints_rest = self.rest_pose(beta)
        batch = torch.broadcast_shapes(pose.shape[:-3], joints_rest.shape[:-2])
        pose = pose.expand(*batch, self.num_joints, 3, 3)
        joints_rest = joints_rest.expand(*batch, self.num_joints, 3)
        verts_rest = verts_rest.expand(*batch, self.num_verts, 3)
        rel = joints_rest.clone()
        for i in self.topo_order[1:]:
            rel[..., i, :] = joints_rest[..., i, :] - joints_rest[..., self.parents[i], :]

        # compose world transforms down the tree
        world_rot = [None] * self.num_joints
        world_t = [None] * self.num_joints
        world_rot[self.root] = pose[..., self.root, :, :]
        world_t[self.root] = rel[..., self.root, :]
        for i in self.topo_order[1:]:
            p = self.parents[i]
            world_rot[i] = world_rot[p] @ pose[..., i, :, :]
            world_t[i] = world_t[p] + (world_rot[p] @ rel[..., i, :, None]).squeeze(-1)
        rot = torch.stack(world_rot, dim=-3)
        joints = torch.stack(world_t, dim=-2)

        # skinning transforms carry points from the rest frame
        offset = joints - (rot @ joints_rest[..., None]).squeeze(-1)
        v_rot = torch.einsum("vn,...nij->...vij", self.skinning_weights, rot)
        v_off = torch.einsum("vn,...nc->...vc", self.skinning_weights, offset)
        verts = (v_rot @ verts_rest[..., None]).squeeze(-1) + v_off
        return verts, joints

    def regress_joints_lsp(self, vertices):
        """14 LSP-ordered joints from (..., V, 3) vertices."""
        if not isinstance(vertices, torch.Tensor):
            vertices = torch.as_tensor(np.asarray(vertices), dtype=self.lsp_regressor.dtype)
        if vertices.shape[-2:] != (self.num_verts, 3):
            raise ShapeMismatchError(
                f"vertices must be (..., {self.num_verts}, 3), got {tuple(vertices.shape)}"
            )
        return torch.einsum("lv,...vc->...lc", self.lsp_regressor, vertices)

    def _as_beta(self, beta):
        if isinstance(beta, ShapeParams):
            beta = beta.beta
        if not isinstance(beta, torch.Tensor):
            beta = torch.as_tensor(np.asarray(beta), dtype=self.template_vertices.dtype)
        beta = beta.to(self.template_vertices.dtype)
        if beta.shape[-1] != self.num_betas:
            raise ShapeMismatchError(
                f"beta must have trailing dim {self.num_betas}, got {tuple(beta.shape)}"
            )
        return beta


def load_body_archive(path, dtype=torch.float32):
    """Build a BodyModel from a user-supplied ``.npz`` parameter archive.

    Expected arrays: ``template_vertices`` (V, 3), ``shape_dirs`` (V, 3, B),
    ``parents`` (N,), ``joint_regressor`` (N, V), ``lsp_regressor`` (14, V),
    ``skinning_weights`` (V, N).
    """
    try:
        data = np.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read body archive {path}: {exc}") from exc
    required = ["template_vertices", "shape_dirs", "parents", "joint_regressor",
                "lsp_regressor", "skinning_weights"]
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"body archive {path} is missing arrays: {missing}")
    return BodyModel({k: data[k] for k in required}, dtype=dtype)
