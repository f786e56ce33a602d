import math

import numpy as np
import pytest

from ctdesign.geometry import build_geometry


def ray_sampling_row(geometry, angle_index, ray_index, n_points=20000):
    """Brute-force one operator row by dense sampling along the ray."""
    h, w = geometry.height, geometry.width
    ang = math.radians(geometry.angles_deg[angle_index])
    ex, ey = math.cos(ang), math.sin(ang)
    # match the operator's snapping of near-axis directions
    if abs(ex) < 1e-12:
        ex, ey = 0.0, math.copysign(1.0, ey)
    if abs(ey) < 1e-12:
        ex, ey = math.copysign(1.0, ex), 0.0
    ux, uy = -ey, ex
    off = (ray_index - (geometry.d_p - 1) / 2.0) * geometry.ray_spacing
    px, py = off * ex, off * ey

    half = geometry.detector_span  # generous parameter range covering the image
    t = np.linspace(-half, half, n_points)
    xs = px + t * ux
    ys = py + t * uy
    inside = (xs > -w / 2) & (xs < w / 2) & (ys > -h / 2) & (ys < h / 2)
    row = np.zeros(h * w)
    if inside.any():
        cols = np.floor(xs[inside] + w / 2).astype(int)
        rows = np.floor(ys[inside] + h / 2).astype(int)
        dt = t[1] - t[0]
        np.add.at(row, rows * w + cols, dt)
    return row


@pytest.fixture
def geo16():
    return build_geometry(16, 16, 10)


@pytest.fixture
def geo8():
    return build_geometry(8, 8, 8)
