"""Synthetic occlusion of 2D motion maps.

Occluders are axis-aligned rectangles in normalized coordinate space that
live for a contiguous run of frames and drift linearly. A joint-frame cell
is occluded when its clean coordinate falls inside an active rectangle, so
occlusions are temporally coherent rather than per-frame salt-and-pepper.
Masking is geometric: the maps never carry image appearance, so covering a
coordinate is the whole story.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .motion_repr import apply_occlusion_token

# occluder centers are drawn from this square; bbox-normalized joints live
# comfortably inside it (padding keeps them within about +/-0.42)
CENTER_RANGE = 0.5


@dataclass(frozen=True)
class OccluderTrack:
    """A drifting rectangle active on frames [start_frame, end_frame]."""

    start_frame: int
    end_frame: int
    center0: np.ndarray         # center at start_frame, 2-vector
    half_extent: np.ndarray     # 2-vector, componentwise > 0
    drift_velocity: np.ndarray  # per-frame center increment, 2-vector

    def __post_init__(self):
        if not (0 <= self.start_frame <= self.end_frame):
            raise ConfigError(
                f"invalid track lifetime [{self.start_frame}, {self.end_frame}]"
            )
        for name in ("center0", "half_extent", "drift_velocity"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (2,):
                raise ShapeMismatchError(f"{name} must be a 2-vector, got {arr.shape}")
            object.__setattr__(self, name, arr)
        if not np.all(self.half_extent > 0):
            raise ConfigError(f"half_extent must be positive, got {self.half_extent}")

    @property
    def center_path(self):
        """(L, 2) centers over the active frames."""
        steps = np.arange(self.end_frame - self.start_frame + 1)
        return self.center0[None] + steps[:, None] * self.drift_velocity[None]

    def active_at(self, frame):
        return self.start_frame <= frame <= self.end_frame

    def contains(self, frame, points, size_scale=1.0):
        """Boolean mask over (..., 2) points inside the rectangle at ``frame``."""
        if not self.active_at(frame):
            return np.zeros(np.asarray(points).shape[:-1], dtype=bool)
        center = self.center0 + (frame - self.start_frame) * self.drift_velocity
        delta = np.abs(np.asarray(points) - center)
        return np.all(delta <= self.half_extent * size_scale, axis=-1)


@dataclass(frozen=True)
class OcclusionConfig:
    """Sampling ranges for occluder tracks.

    target_ratio is the desired fraction of occluded joint-frame cells;
    lifetime_range is in fractions of the window length; drift_range bounds
    the per-frame, per-component drift magnitude.
    """

    target_ratio: float = 0.2
    occluder_count_range: tuple = (1, 3)
    size_range: tuple = (0.1, 0.4)
    lifetime_range: tuple = (0.25, 1.0)
    drift_range: tuple = (0.0, 0.02)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_ratio <= 0.5:
            raise ConfigError(f"target_ratio must be in [0, 0.5], got {self.target_ratio}")
        for name in ("occluder_count_range", "size_range", "lifetime_range", "drift_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: ({lo}, {hi})")
        if self.occluder_count_range[0] < 0:
            raise ConfigError("occluder counts must be nonnegative")
        if self.size_range[0] <= 0:
            raise ConfigError("occluder sizes must be positive")
        if not 0 < self.lifetime_range[1] <= 1.0 or self.lifetime_range[0] < 0:
            raise ConfigError("lifetime_range must lie within (0, 1]")


def sample_occluders(cfg: OcclusionConfig, num_frames: int, rng=None):
    """Draw a list of OccluderTrack deterministically from cfg (or ``rng``)."""
    if num_frames < 1:
        raise ConfigError(f"num_frames must be >= 1, got {num_frames}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    count = int(rng.integers(cfg.occluder_count_range[0], cfg.occluder_count_range[1] + 1))
    tracks = []
    for _ in range(count):
        frac = rng.uniform(*cfg.lifetime_range)
        length = max(1, min(num_frames, int(round(frac * num_frames))))
        start = int(rng.integers(0, num_frames - length + 1))
        half_extent = rng.uniform(*cfg.size_range, size=2)
        center0 = rng.uniform(-CENTER_RANGE, CENTER_RANGE, size=2)
        drift = rng.uniform(*cfg.drift_range, size=2) * rng.choice([-1.0, 1.0], size=2)
        tracks.append(OccluderTrack(
            start_frame=start,
            end_frame=start + length - 1,
            center0=center0,
            half_extent=half_extent,
            drift_velocity=drift,
        ))
    return tracks


def occlusion_mask(map2d, tracks, size_scale=1.0):
    """(F, K) boolean mask: cell (f, k) is true when the clean coordinate of
    joint k at frame f lies inside some active rectangle."""
    map2d = np.asarray(map2d)
    if map2d.ndim != 3 or map2d.shape[-1] != 2:
        raise ShapeMismatchError(f"expected (F, K, 2) map, got {map2d.shape}")
    num_frames = map2d.shape[0]
    mask = np.zeros(map2d.shape[:2], dtype=bool)
    for track in tracks:
        lo = max(track.start_frame, 0)
        hi = min(track.end_frame, num_frames - 1)
        for f in range(lo, hi + 1):
            mask[f] |= track.contains(f, map2d[f], size_scale=size_scale)
    return mask


def synthesize_occlusion(map2d, tracks, token):
    """Apply tracks to a clean normalized map: returns (occluded_map, mask).

    Masked cells carry ``token``; unmasked cells are returned unchanged.
    """
    mask = occlusion_mask(map2d, tracks)
    return apply_occlusion_token(np.asarray(map2d), mask, token), mask


def calibrate_tracks(map2d, cfg: OcclusionConfig, rng=None, max_iters=40):
    """Sample tracks, then rescale their sizes so the realized occluded-cell
    ratio on this map is as close to cfg.target_ratio as the discrete grid
    allows. Returns (tracks, mask).

    The occluded ratio is monotone in a global size multiplier (growing a
    rectangle only adds covered points), so a bisection on the multiplier
    finds the crossing.
    """
    map2d = np.asarray(map2d)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    tracks = sample_occluders(cfg, map2d.shape[0], rng)
    if cfg.target_ratio == 0.0 or not tracks:
        return [], np.zeros(map2d.shape[:2], dtype=bool)

    def ratio(scale):
        return occlusion_mask(map2d, tracks, size_scale=scale).mean()

    lo, hi = 1e-3, 1.0
    while ratio(hi) < cfg.target_ratio and hi < 64.0:
        hi *= 2.0
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        if ratio(mid) < cfg.target_ratio:
            lo = mid
        else:
            hi = mid
    scale = min((lo, hi), key=lambda s: abs(ratio(s) - cfg.target_ratio))
    scaled = [
        OccluderTrack(
            start_frame=t.start_frame,
            end_frame=t.end_frame,
            center0=t.center0,
            half_extent=t.half_extent * scale,
            drift_velocity=t.drift_velocity,
        )
        for t in tracks
    ]
    return scaled, occlusion_mask(map2d, scaled)
