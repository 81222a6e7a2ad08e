"""Rectified query coordinates and positional encoding for the MLP.

Rectification replaces the winning point of each occupied pixel with the
point on that pixel's ray at the recorded camera-space depth: with cos(theta)
the component of the unit ray direction along the camera viewing axis,
x = o + (z / cos(theta)) * d. The result lies exactly on the ray and has
camera-space depth equal to the z-buffer, which keeps distinct pixels at
distinct query coordinates even when one point wins many pixels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

COS_GUARD = 1e-6


@dataclass
class EncodingConfig:
    """Frequency counts and the scene box used to normalize coordinates."""

    f_x: int = 10
    f_d: int = 4
    include_raw: bool = True
    bbox: np.ndarray = None

    def __post_init__(self):
        if self.f_x < 0 or self.f_d < 0:
            raise ValidationError("frequency counts must be >= 0")
        if self.bbox is not None:
            self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)

    @property
    def coord_width(self):
        return (3 if self.include_raw else 0) + 6 * self.f_x

    @property
    def dir_width(self):
        return (3 if self.include_raw else 0) + 6 * self.f_d


@dataclass
class QueryBatch:
    """Rectified and encoded per-pixel queries, in row-major pixel order."""

    pixel_ids: np.ndarray       # (N,) flat row-major indices into H*W
    coords_world: np.ndarray    # (N, 3)
    dirs_world: np.ndarray      # (N, 3) unit
    coords_encoded: np.ndarray  # (N, coord_width)
    dirs_encoded: np.ndarray    # (N, dir_width)

    def __len__(self):
        return self.pixel_ids.shape[0]


def rectify(frag):
    """Move each occupied pixel's query onto its ray at the stored depth.

    Returns (coords (N,3), pixel_ids (N,), n_dropped). Pixels whose ray is
    nearly perpendicular to the viewing axis (cos(theta) <= 1e-6, impossible
    for pinhole rays but guarded) are dropped and counted.
    """
    occ = frag.occupied.reshape(-1)
    ids = np.nonzero(occ)[0]
    if ids.size == 0:
        return np.zeros((0, 3)), ids, 0
    dirs = frag.ray_dirs.reshape(-1, 3)[ids]
    zs = frag.z.reshape(-1)[ids]
    cos_theta = dirs @ frag.view_axis
    keep = cos_theta > COS_GUARD
    n_dropped = int((~keep).sum())
    if n_dropped:
        logger.warning("rectify: dropped %d grazing pixels", n_dropped)
        ids, dirs, zs, cos_theta = ids[keep], dirs[keep], zs[keep], cos_theta[keep]
    t = zs / cos_theta
    coords = frag.ray_origin[None, :] + t[:, None] * dirs
    return coords, ids, n_dropped


def raw_winner_coords(frag, cloud):
    """Raw positions of the winning points (the no-rectification baseline)."""
    occ = frag.occupied.reshape(-1)
    ids = np.nonzero(occ)[0]
    idx = frag.point_index.reshape(-1)[ids]
    return cloud.positions[idx], ids


def normalize_coords(coords, bbox):
    """Map bbox to [-1, 1] per axis; degenerate axes collapse to 0."""
    lo, hi = bbox[0], bbox[1]
    span = hi - lo
    safe = np.where(span > 1e-12, span, 1.0)
    out = 2.0 * (coords - lo) / safe - 1.0
    return np.where(span > 1e-12, out, 0.0)


def positional_encode(vectors, freqs, include_raw=True):
    """Sinusoids at octave-spaced frequencies, grouped per frequency.

    Output per row: [raw components,] then for k in 0..freqs-1 the block
    sin(2^k pi v) followed by cos(2^k pi v), each over all components.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    squeeze = vectors.ndim == 1
    if squeeze:
        vectors = vectors[None, :]
    parts = [vectors] if include_raw else []
    for k in range(freqs):
        arg = (2.0**k) * np.pi * vectors
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    if not parts:
        out = np.zeros((vectors.shape[0], 0))
    else:
        out = np.concatenate(parts, axis=1)
    return out[0] if squeeze else out


def build_query_batch(frag, enc, cloud=None, use_rectify=True):
    """Rectify (or gather raw winners) and encode coordinates and directions.

    Pixel order is row-major. The no-rectification baseline requires the
    cloud to look up winning-point positions.
    """
    if use_rectify:
        coords, ids, _ = rectify(frag)
    else:
        if cloud is None:
            raise ValidationError("raw-coordinate queries need the point cloud")
        coords, ids = raw_winner_coords(frag, cloud)
    dirs = frag.ray_dirs.reshape(-1, 3)[ids]
    if enc.bbox is not None:
        norm = normalize_coords(coords, enc.bbox)
    else:
        norm = coords
    return QueryBatch(
        pixel_ids=ids,
        coords_world=coords,
        dirs_world=dirs,
        coords_encoded=positional_encode(norm, enc.f_x, enc.include_raw),
        dirs_encoded=positional_encode(dirs, enc.f_d, enc.include_raw),
    )
