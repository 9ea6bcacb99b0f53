"""Data plumbing: synthetic motion sequences, archives, detector ingestion.

A MotionSample is one F-frame sequence: bbox-normalized 2D motion maps
(K = 14 joints, LSP order), the occlusion mask, ground-truth 3D motion as
per-joint 6D rotations (N = 24), shape coefficients, camera intrinsics and
per-frame translations. Generated samples satisfy a projection round trip:
pushing the body through intrinsics + translation and denormalizing the
stored 2D map agree within 1e-6 pixels.

Bounding boxes are per frame (the padded box of that frame's joints), so
normalization follows the subject; the occluded 2D map stored in archives
uses a zero token, and models substitute their own learned token from the
mask at run time.

Detection files are line-delimited text: a small header followed by K
"x y conf" lines per frame. A confidence strictly below the threshold
(default 0.6) marks the joint occluded; 0.6 exactly is visible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .body_model import NUM_BETAS, NUM_JOINTS, NUM_LSP_JOINTS, BodyModel
from .errors import ConfigError, DataError, DetectionParseError, ShapeMismatchError
from .global_fit import CameraIntrinsics, TranslationTrack, project
from .motion_repr import (
    Bbox,
    apply_occlusion_token,
    axis_angle_to_matrix,
    bbox_from_points,
    denormalize_pose2d,
    matrix_to_rot6d,
    normalize_pose2d,
    rot6d_to_matrix,
)
from .occlusion_synth import OcclusionConfig, calibrate_tracks

import torch

SAMPLE_SCHEMA = "motion-sample/v1"
DETECTION_SCHEMA = "detections/v1"
DEFAULT_THRESHOLD = 0.6
BBOX_PAD = 0.2


@dataclass
class MotionSample:
    """One synthetic or ingested motion sequence."""

    clean2d: np.ndarray          # (F, K, 2) normalized
    occluded2d: np.ndarray       # (F, K, 2) normalized, zero token at masked cells
    mask: np.ndarray             # (F, K) bool, true = occluded
    gt3d: np.ndarray             # (F, N, 6)
    beta: np.ndarray             # (B,)
    intrinsics: CameraIntrinsics
    translations: TranslationTrack
    bboxes: list                 # F Bbox
    frame_rate: float = 10.0
    name: str = ""

    @property
    def num_frames(self):
        return self.clean2d.shape[0]


@dataclass
class GenerationConfig:
    """Synthetic motion generator settings.

    Joint angles follow a constant offset plus at most ``max_sinusoids``
    sinusoids per axis; translations drift sinusoidally around a base point
    in front of the camera.
    """

    num_frames: int = 16
    frame_rate: float = 10.0
    max_sinusoids: int = 3
    amplitude_range: tuple = (0.05, 0.25)
    frequency_range: tuple = (0.25, 2.0)   # cycles per window
    pose_offset_scale: float = 0.15        # radians
    beta_std: float = 0.5
    translation_amplitude: float = 0.15    # meters
    depth_range: tuple = (2.5, 4.0)
    focal: tuple = (1000.0, 1000.0)
    principal_point: tuple = (500.0, 500.0)
    occlusion: OcclusionConfig = None

    def __post_init__(self):
        if self.num_frames < 1:
            raise ConfigError(f"num_frames must be >= 1, got {self.num_frames}")
        if self.max_sinusoids < 0 or self.max_sinusoids > 3:
            raise ConfigError("max_sinusoids must be in [0, 3]")
        if self.amplitude_range[0] < 0 or self.amplitude_range[0] > self.amplitude_range[1]:
            raise ConfigError(f"bad amplitude_range {self.amplitude_range}")
        if self.depth_range[0] <= 0 or self.depth_range[0] > self.depth_range[1]:
            raise ConfigError(f"bad depth_range {self.depth_range}")
        if self.occlusion is None:
            self.occlusion = OcclusionConfig()


def _sinusoid_bank(rng, shape, cfg):
    """Per-entry smooth trajectories over the window: offset + sinusoids.
    Returns (F, *shape)."""
    f = cfg.num_frames
    t = np.arange(f)[:, None] / max(f, 1)
    flat = int(np.prod(shape))
    out = rng.uniform(-cfg.pose_offset_scale, cfg.pose_offset_scale, size=flat)[None].repeat(f, 0)
    count = cfg.max_sinusoids
    for _ in range(count):
        amp = rng.uniform(*cfg.amplitude_range, size=flat) / max(count, 1)
        freq = rng.uniform(*cfg.frequency_range, size=flat)
        phase = rng.uniform(0, 2 * np.pi, size=flat)
        out = out + amp * np.sin(2 * np.pi * freq * t + phase)
    return out.reshape(f, *shape)


def generate_synthetic_motion(cfg: GenerationConfig, rng, body: BodyModel = None,
                              name: str = "") -> MotionSample:
    """Sample one sequence: smooth joint-angle curves, a drifting camera-frame
    translation, projected 2D maps, and a calibrated occlusion mask.
    Deterministic given the rng state."""
    if body is None:
        body = _default_body()
    f = cfg.num_frames

    aa = _sinusoid_bank(rng, (NUM_JOINTS, 3), cfg)
    rotmats = axis_angle_to_matrix(torch.as_tensor(aa))
    gt3d = matrix_to_rot6d(rotmats).numpy()

    beta = rng.normal(scale=cfg.beta_std, size=NUM_BETAS)

    base = np.array([
        rng.uniform(-0.3, 0.3),
        rng.uniform(-0.2, 0.2),
        rng.uniform(*cfg.depth_range),
    ])
    drift_cfg = replace(cfg, pose_offset_scale=0.0,
                        amplitude_range=(0.0, cfg.translation_amplitude))
    trans = base[None] + _sinusoid_bank(rng, (3,), drift_cfg)
    trans[:, 2] = np.maximum(trans[:, 2], 0.5)

    camera = CameraIntrinsics(focal=cfg.focal, principal_point=cfg.principal_point)
    verts, _ = body(rotmats.to(body.template_vertices.dtype),
                    torch.as_tensor(beta, dtype=body.template_vertices.dtype))
    lsp3d = body.regress_joints_lsp(verts).numpy().astype(np.float64)
    pixels = project(camera, lsp3d + trans[:, None, :])

    bboxes = [bbox_from_points(pixels[i], pad=BBOX_PAD) for i in range(f)]
    clean2d = np.stack([normalize_pose2d(pixels[i], bboxes[i]) for i in range(f)])

    _, mask = calibrate_tracks(clean2d, cfg.occlusion, rng)
    occluded2d = apply_occlusion_token(clean2d, mask, np.zeros(2))

    return MotionSample(
        clean2d=clean2d, occluded2d=occluded2d, mask=mask, gt3d=gt3d,
        beta=beta, intrinsics=camera,
        translations=TranslationTrack(T=trans), bboxes=bboxes,
        frame_rate=cfg.frame_rate, name=name,
    )


_BODY_CACHE = {}


def _default_body():
    if "f64" not in _BODY_CACHE:
        _BODY_CACHE["f64"] = BodyModel(dtype=torch.float64)
    return _BODY_CACHE["f64"]


def generate_dataset(cfg: GenerationConfig, num_samples: int, seed: int,
                     body: BodyModel = None):
    """num_samples independent sequences; sample i draws from rng([seed, i])."""
    if num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {num_samples}")
    body = body or _default_body()
    return [
        generate_synthetic_motion(cfg, np.random.default_rng([seed, i]), body,
                                  name=f"seq{i:05d}")
        for i in range(num_samples)
    ]


def validate_motion_sample(sample: MotionSample, body: BodyModel = None, tol=1e-6):
    """Shape consistency plus the projection round trip: denormalized clean2d
    must match projecting the posed body within tol pixels."""
    f = sample.num_frames
    if sample.clean2d.shape != (f, NUM_LSP_JOINTS, 2):
        raise ShapeMismatchError(f"clean2d has shape {sample.clean2d.shape}")
    if sample.occluded2d.shape != sample.clean2d.shape:
        raise ShapeMismatchError("occluded2d/clean2d shape mismatch")
    if sample.mask.shape != (f, NUM_LSP_JOINTS):
        raise ShapeMismatchError(f"mask has shape {sample.mask.shape}")
    if sample.gt3d.shape != (f, NUM_JOINTS, 6):
        raise ShapeMismatchError(f"gt3d has shape {sample.gt3d.shape}")
    if sample.beta.shape != (NUM_BETAS,):
        raise ShapeMismatchError(f"beta has shape {sample.beta.shape}")
    if len(sample.bboxes) != f:
        raise ShapeMismatchError("need one bbox per frame")
    if sample.translations.T.shape != (f, 3):
        raise ShapeMismatchError("translations/frames mismatch")

    body = body or _default_body()
    rotmats = rot6d_to_matrix(torch.as_tensor(sample.gt3d, dtype=torch.float64))
    verts, _ = body(rotmats, torch.as_tensor(sample.beta, dtype=torch.float64))
    lsp3d = body.regress_joints_lsp(verts).numpy()
    pixels = project(sample.intrinsics, lsp3d + sample.translations.T[:, None, :])
    for i in range(f):
        recon = denormalize_pose2d(sample.clean2d[i], sample.bboxes[i])
        err = np.abs(recon - pixels[i]).max()
        if err > tol:
            raise DataError(f"projection self-consistency violated at frame {i}: {err:.3g} px")
    return True


def save_motion_sample(path, sample: MotionSample):
    """One sequence per .npz archive; schema embedded for format checks."""
    path = Path(path)
    np.savez(
        path,
        schema=np.array(SAMPLE_SCHEMA),
        clean2d=sample.clean2d.astype(np.float64),
        occluded2d=sample.occluded2d.astype(np.float64),
        mask=sample.mask.astype(bool),
        gt3d=sample.gt3d.astype(np.float64),
        beta=sample.beta.astype(np.float64),
        focal=np.asarray(sample.intrinsics.focal, dtype=np.float64),
        principal_point=np.asarray(sample.intrinsics.principal_point, dtype=np.float64),
        translations=sample.translations.T,
        bbox_center=np.array([b.center for b in sample.bboxes], dtype=np.float64),
        bbox_scale=np.array([b.scale for b in sample.bboxes], dtype=np.float64),
        frame_rate=np.float64(sample.frame_rate),
        name=np.array(sample.name),
    )


def load_motion_sample(path) -> MotionSample:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read motion archive {path}: {exc}") from exc
    if "schema" not in data or str(data["schema"]) != SAMPLE_SCHEMA:
        raise DataError(f"{path} is not a {SAMPLE_SCHEMA} archive")
    bboxes = [
        Bbox(center=tuple(c), scale=float(s))
        for c, s in zip(data["bbox_center"], data["bbox_scale"])
    ]
    return MotionSample(
        clean2d=data["clean2d"], occluded2d=data["occluded2d"],
        mask=data["mask"].astype(bool), gt3d=data["gt3d"], beta=data["beta"],
        intrinsics=CameraIntrinsics(focal=tuple(data["focal"]),
                                    principal_point=tuple(data["principal_point"])),
        translations=TranslationTrack(T=data["translations"]),
        bboxes=bboxes, frame_rate=float(data["frame_rate"]), name=str(data["name"]),
    )


def save_dataset(directory, samples):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        stem = sample.name or f"seq{i:05d}"
        save_motion_sample(directory / f"{stem}.npz", sample)


def load_dataset(directory):
    directory = Path(directory)
    paths = sorted(directory.glob("*.npz"))
    if not paths:
        raise DataError(f"no .npz archives found in {directory}")
    return [load_motion_sample(p) for p in paths]


def split_samples(samples, eval_fraction=0.1, seed=0):
    """Deterministic shuffle then split into (train, eval) lists."""
    if not samples:
        raise DataError("cannot split an empty sample list")
    if not 0.0 <= eval_fraction < 1.0:
        raise ConfigError(f"eval_fraction must be in [0, 1), got {eval_fraction}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_eval = int(round(eval_fraction * len(samples)))
    eval_idx = set(order[:n_eval].tolist())
    train = [samples[i] for i in range(len(samples)) if i not in eval_idx]
    held = [samples[i] for i in range(len(samples)) if i in eval_idx]
    return train, held


def make_batches(samples, batch_size=32, shuffle_seed=None):
    """Fixed-size batches, last partial batch kept; deterministic given seed."""
    if not samples:
        raise DataError("cannot batch an empty sample list")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    idx = np.arange(len(samples))
    if shuffle_seed is not None:
        idx = np.random.default_rng(shuffle_seed).permutation(idx)
    return [
        [samples[i] for i in idx[start:start + batch_size]]
        for start in range(0, len(samples), batch_size)
    ]


def collate_batch(samples, dtype=torch.float32):
    """Stack sample fields into training tensors (no token substitution;
    models fill masked cells themselves)."""
    return {
        "clean2d": torch.as_tensor(np.stack([s.clean2d for s in samples])).to(dtype),
        "mask": torch.as_tensor(np.stack([s.mask for s in samples])),
        "gt3d": torch.as_tensor(np.stack([s.gt3d for s in samples])).to(dtype),
        "beta": torch.as_tensor(np.stack([s.beta for s in samples])).to(dtype),
    }


@dataclass
class DetectionData:
    """Parsed detector output plus its normalized, token-filled motion map."""

    pixels: np.ndarray        # (F, K, 2)
    confidence: np.ndarray    # (F, K)
    intrinsics: CameraIntrinsics
    bboxes: list              # F Bbox
    occluded2d: np.ndarray    # (F, K, 2) normalized, token at occluded cells
    mask: np.ndarray          # (F, K) bool, true = occluded
    threshold: float


def write_detection_file(path, pixels, confidence, intrinsics, bboxes=None):
    """Serialize detections in the text format ``ingest_detections`` reads."""
    pixels = np.asarray(pixels, dtype=np.float64)
    confidence = np.asarray(confidence, dtype=np.float64)
    frames, joints = confidence.shape
    lines = [
        f"# {DETECTION_SCHEMA}",
        f"joints {joints}",
        f"frames {frames}",
        f"focal {intrinsics.focal[0]:.10g} {intrinsics.focal[1]:.10g}",
        f"principal {intrinsics.principal_point[0]:.10g} {intrinsics.principal_point[1]:.10g}",
        f"bbox {'provided' if bboxes is not None else 'detected'}",
    ]
    for f in range(frames):
        if bboxes is not None:
            b = bboxes[f]
            lines.append(f"bbox {b.center[0]:.10g} {b.center[1]:.10g} {b.scale:.10g}")
        for k in range(joints):
            lines.append(
                f"{pixels[f, k, 0]:.10g} {pixels[f, k, 1]:.10g} {confidence[f, k]:.10g}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header_line(lines, idx, key, count, path):
    if idx >= len(lines):
        raise DetectionParseError(f"{path}: truncated header, expected '{key}' line")
    parts = lines[idx].split()
    if not parts or parts[0] != key or len(parts) != count + 1:
        raise DetectionParseError(
            f"{path}:{idx + 1}: expected '{key}' with {count} values, got {lines[idx]!r}"
        )
    try:
        return [float(v) for v in parts[1:]]
    except ValueError as exc:
        raise DetectionParseError(f"{path}:{idx + 1}: non-numeric value: {exc}") from exc


def ingest_detections(path, threshold=DEFAULT_THRESHOLD, token=(0.0, 0.0)) -> DetectionData:
    """Parse a detection file and build the occluded normalized map.

    A joint is occluded iff its confidence is strictly lower than
    ``threshold``; a confidence equal to the threshold counts as visible.
    Per-frame bboxes come from the visible joints (padded 20%) unless the
    file provides them; a frame with no visible joint falls back to all of
    its joints.
    """
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read detection file {path}: {exc}") from exc
    lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
    if not lines or not lines[0].lstrip("# ").startswith(DETECTION_SCHEMA):
        raise DetectionParseError(f"{path}: missing '# {DETECTION_SCHEMA}' header")

    joints = int(_parse_header_line(lines, 1, "joints", 1, path)[0])
    frames = int(_parse_header_line(lines, 2, "frames", 1, path)[0])
    focal = _parse_header_line(lines, 3, "focal", 2, path)
    principal = _parse_header_line(lines, 4, "principal", 2, path)
    if joints < 1 or frames < 1:
        raise DetectionParseError(f"{path}: joints and frames must be positive")
    bbox_parts = lines[5].split() if len(lines) > 5 else []
    if (len(bbox_parts) != 2 or bbox_parts[0] != "bbox"
            or bbox_parts[1] not in ("provided", "detected")):
        raise DetectionParseError(f"{path}:6: expected 'bbox provided|detected'")
    provided = bbox_parts[1] == "provided"

    idx = 6
    pixels = np.zeros((frames, joints, 2))
    conf = np.zeros((frames, joints))
    bboxes = []
    for f in range(frames):
        if provided:
            vals = _parse_header_line(lines, idx, "bbox", 3, path)
            if vals[2] <= 0:
                raise DetectionParseError(f"{path}:{idx + 1}: bbox scale must be positive")
            bboxes.append(Bbox(center=(vals[0], vals[1]), scale=vals[2]))
            idx += 1
        for k in range(joints):
            if idx >= len(lines):
                raise DetectionParseError(
                    f"{path}: truncated at frame {f}, joint {k} (line {idx + 1})"
                )
            parts = lines[idx].split()
            if len(parts) != 3:
                raise DetectionParseError(
                    f"{path}:{idx + 1} (frame {f}, joint {k}): expected 'x y conf', "
                    f"got {lines[idx]!r}"
                )
            try:
                x, y, c = (float(v) for v in parts)
            except ValueError as exc:
                raise DetectionParseError(
                    f"{path}:{idx + 1} (frame {f}, joint {k}): {exc}"
                ) from exc
            if not 0.0 <= c <= 1.0:
                raise DetectionParseError(
                    f"{path}:{idx + 1} (frame {f}, joint {k}): confidence {c} outside [0, 1]"
                )
            pixels[f, k] = (x, y)
            conf[f, k] = c
            idx += 1
    if idx != len(lines):
        raise DetectionParseError(f"{path}: {len(lines) - idx} unexpected trailing lines")

    mask = conf < threshold
    if not provided:
        for f in range(frames):
            visible = pixels[f, ~mask[f]]
            pts = visible if len(visible) >= 1 else pixels[f]
            try:
                bboxes.append(bbox_from_points(pts, pad=BBOX_PAD))
            except Exception as exc:
                raise DataError(f"frame {f}: cannot form a bbox: {exc}") from exc

    normalized = np.stack(
        [normalize_pose2d(pixels[f], bboxes[f]) for f in range(frames)]
    )
    occluded2d = apply_occlusion_token(normalized, mask, np.asarray(token, dtype=np.float64))
    return DetectionData(
        pixels=pixels, confidence=conf,
        intrinsics=CameraIntrinsics(focal=tuple(focal), principal_point=tuple(principal)),
        bboxes=bboxes, occluded2d=occluded2d, mask=mask, threshold=threshold,
    )
