"""2-D parallel-beam ray transform with per-angle sparse blocks.

The scan geometry fixes an equispaced grid of candidate angles in [0, 180)
and a detector row centred on the image. For each angle we build a sparse
matrix whose rows hold exact ray/pixel intersection lengths (Siddon-style
traversal). Blocks are cached per angle so that angle subsets can be
stacked and extended cheaply during sequential design.

Conventions: pixels have unit side length; the image is centred on the
origin with x along columns and y along rows; flat index q = row * w + col.
At 0 degrees rays travel parallel to the y axis (one pixel column per
traversed row).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ScanGeometry",
    "AngleBlock",
    "AngleSubset",
    "build_geometry",
    "default_detector_count",
    "angle_block",
    "stacked_operator",
    "forward",
    "adjoint",
    "export_coo",
]


@dataclass(frozen=True)
class AngleBlock:
    """Sparse ray-integral rows for a single candidate angle."""

    angle_index: int
    rows: sp.csr_matrix


@dataclass
class ScanGeometry:
    """Candidate-angle grid, detector layout and the per-angle block cache."""

    height: int
    width: int
    d_p: int
    n_candidates: int
    angles_deg: np.ndarray
    detector_span: float
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def d_x(self) -> int:
        return self.height * self.width

    @property
    def ray_spacing(self) -> float:
        return self.detector_span / self.d_p


class AngleSubset:
    """Ordered, duplicate-free list of candidate angle indices."""

    def __init__(self, indices, n_candidates: int):
        indices = [int(i) for i in indices]
        if len(set(indices)) != len(indices):
            raise ValueError("duplicate angle indices in subset")
        for i in indices:
            if not 0 <= i < n_candidates:
                raise ValueError(f"angle index {i} out of range [0, {n_candidates})")
        self.indices = indices
        self.n_candidates = n_candidates

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __eq__(self, other):
        return (
            isinstance(other, AngleSubset)
            and self.indices == other.indices
            and self.n_candidates == other.n_candidates
        )

    def __repr__(self):
        return f"AngleSubset({self.indices}, n_candidates={self.n_candidates})"

    def complement(self) -> "AngleSubset":
        chosen = set(self.indices)
        rest = [i for i in range(self.n_candidates) if i not in chosen]
        return AngleSubset(rest, self.n_candidates)

    def extended(self, index: int) -> "AngleSubset":
        return AngleSubset(self.indices + [int(index)], self.n_candidates)


def default_detector_count(h: int, w: int) -> int:
    """ceil(sqrt(2) * max(h, w)), rounded up to the next odd integer."""
    d_p = math.ceil(math.sqrt(2.0) * max(h, w))
    if d_p % 2 == 0:
        d_p += 1
    return d_p


def build_geometry(h: int, w: int, n_candidates: int, d_p: int | None = None) -> ScanGeometry:
    if h < 1 or w < 1 or n_candidates < 1:
        raise ValueError("image dimensions and candidate count must be >= 1")
    if d_p is None:
        d_p = default_detector_count(h, w)
    if d_p < 1:
        raise ValueError("detector element count must be >= 1")
    angles = 180.0 * np.arange(n_candidates) / n_candidates
    # margin of 2 px keeps the outermost rays clear of the image corners
    span = float(math.ceil(math.hypot(h, w)) + 2)
    return ScanGeometry(
        height=int(h),
        width=int(w),
        d_p=int(d_p),
        n_candidates=int(n_candidates),
        angles_deg=angles,
        detector_span=span,
    )


def _trace_ray(geometry: ScanGeometry, angle_rad: float, offset: float):
    """Intersection lengths of one ray with the pixel grid.

    Returns (flat pixel indices, lengths). The ray passes through the point
    offset * (cos a, sin a) with direction (-sin a, cos a).
    """
    h, w = geometry.height, geometry.width
    ex, ey = math.cos(angle_rad), math.sin(angle_rad)
    # snap near-axis directions exactly so boundary rays bin consistently
    if abs(ex) < 1e-12:
        ex, ey = 0.0, math.copysign(1.0, ey)
    if abs(ey) < 1e-12:
        ex, ey = math.copysign(1.0, ex), 0.0
    ux, uy = -ey, ex
    px, py = offset * ex, offset * ey

    xmin, xmax = -w / 2.0, w / 2.0
    ymin, ymax = -h / 2.0, h / 2.0

    # entry/exit parameters of the ray against the image bounding box
    t_lo, t_hi = -np.inf, np.inf
    if abs(ux) > 1e-14:
        t1, t2 = (xmin - px) / ux, (xmax - px) / ux
        t_lo, t_hi = max(t_lo, min(t1, t2)), min(t_hi, max(t1, t2))
    elif not (xmin < px < xmax):
        return np.empty(0, dtype=np.int64), np.empty(0)
    if abs(uy) > 1e-14:
        t1, t2 = (ymin - py) / uy, (ymax - py) / uy
        t_lo, t_hi = max(t_lo, min(t1, t2)), min(t_hi, max(t1, t2))
    elif not (ymin < py < ymax):
        return np.empty(0, dtype=np.int64), np.empty(0)
    if not t_lo < t_hi:
        return np.empty(0, dtype=np.int64), np.empty(0)

    ts = [np.array([t_lo, t_hi])]
    if abs(ux) > 1e-14:
        ts.append((xmin + np.arange(1, w) - px) / ux)
    if abs(uy) > 1e-14:
        ts.append((ymin + np.arange(1, h) - py) / uy)
    t = np.concatenate(ts)
    t = np.unique(t[(t >= t_lo) & (t <= t_hi)])

    lengths = np.diff(t)
    keep = lengths > 1e-12
    if not keep.any():
        return np.empty(0, dtype=np.int64), np.empty(0)
    t_mid = 0.5 * (t[:-1] + t[1:])[keep]
    lengths = lengths[keep]

    cols = np.floor(px + t_mid * ux - xmin).astype(np.int64)
    rows = np.floor(py + t_mid * uy - ymin).astype(np.int64)
    np.clip(cols, 0, w - 1, out=cols)
    np.clip(rows, 0, h - 1, out=rows)
    return rows * w + cols, lengths


def angle_block(geometry: ScanGeometry, angle_index: int) -> AngleBlock:
    """Sparse d_p x d_x block for one candidate angle (cached)."""
    if not 0 <= angle_index < geometry.n_candidates:
        raise ValueError(f"angle index {angle_index} out of range")
    with geometry._lock:
        cached = geometry._cache.get(angle_index)
    if cached is not None:
        return cached

    angle_rad = math.radians(geometry.angles_deg[angle_index])
    spacing = geometry.ray_spacing
    offsets = (np.arange(geometry.d_p) - (geometry.d_p - 1) / 2.0) * spacing

    indptr = [0]
    indices = []
    data = []
    for off in offsets:
        idx, vals = _trace_ray(geometry, angle_rad, off)
        indices.append(idx)
        data.append(vals)
        indptr.append(indptr[-1] + idx.size)
    rows = sp.csr_matrix(
        (np.concatenate(data), np.concatenate(indices), np.array(indptr)),
        shape=(geometry.d_p, geometry.d_x),
    )
    block = AngleBlock(angle_index=angle_index, rows=rows)
    with geometry._lock:
        geometry._cache.setdefault(angle_index, block)
        return geometry._cache[angle_index]


def stacked_operator(geometry: ScanGeometry, subset: AngleSubset) -> sp.csr_matrix:
    """Vertical stack of the subset's angle blocks, in subset order."""
    if len(subset) == 0:
        raise ValueError("empty angle subset")
    return sp.vstack(
        [angle_block(geometry, i).rows for i in subset], format="csr"
    )


def forward(geometry: ScanGeometry, subset: AngleSubset, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (geometry.d_x,):
        raise ValueError(f"image must have length {geometry.d_x}, got {x.shape}")
    return stacked_operator(geometry, subset) @ x


def adjoint(geometry: ScanGeometry, subset: AngleSubset, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    d_y = geometry.d_p * len(subset)
    if y.shape != (d_y,):
        raise ValueError(f"measurement must have length {d_y}, got {y.shape}")
    return stacked_operator(geometry, subset).T @ y


def export_coo(geometry: ScanGeometry, subset: AngleSubset, path) -> None:
    """Write the stacked operator as (row, col, value) triplet lines."""
    coo = stacked_operator(geometry, subset).tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
