"""Synthetic CT phantoms and their landmark sets.

The phantoms use a linear HU ramp of width ``ramp`` mm across each surface
instead of a hard voxelized edge, so the trilinear isosurface at the ramp
midpoint sits on the analytic surface and line integrals through the ramp
equal the analytic chord.
"""

from __future__ import annotations

import numpy as np

from .evaluation import LandmarkSet
from .volume import Volume


def _grid(dims, spacing, origin):
    dims = np.broadcast_to(np.asarray(dims, dtype=int), (3,))
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    if origin is None:
        # center the grid on the world origin
        origin = -0.5 * spacing * (dims - 1)
    origin = np.asarray(origin, dtype=float)
    axes = [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]
    return np.meshgrid(*axes, indexing="ij"), spacing, origin


def _fill(fraction, hu_inside, hu_outside, dtype):
    data = hu_outside + (hu_inside - hu_outside) * fraction
    return data.astype(dtype)


def _ramp(signed_depth, ramp):
    """Occupancy in [0, 1] from depth below the surface (positive inside)."""
    if ramp <= 0:
        return (signed_depth >= 0).astype(float)
    return np.clip(0.5 + signed_depth / ramp, 0.0, 1.0)


def sphere_phantom(
    dims=128,
    spacing=1.0,
    radius: float = 50.0,
    center=(0.0, 0.0, 0.0),
    hu_inside: float = 1000.0,
    hu_outside: float = -1000.0,
    ramp: float = 4.0,
    origin=None,
    dtype=np.float32,
) -> Volume:
    (X, Y, Z), spacing, origin = _grid(dims, spacing, origin)
    c = np.asarray(center, dtype=float)
    dist = np.sqrt((X - c[0]) ** 2 + (Y - c[1]) ** 2 + (Z - c[2]) ** 2)
    data = _fill(_ramp(radius - dist, ramp), hu_inside, hu_outside, dtype)
    return Volume(data, spacing, origin)


# lobe geometry relative to the grid center: (center, semi-axes)
TWO_LOBE_SHAPES = (
    (np.array([-18.0, -8.0, 4.0]), np.array([34.0, 34.0, 34.0])),
    (np.array([26.0, 14.0, -8.0]), np.array([22.0, 30.0, 20.0])),
)


def two_lobe_phantom(
    dims=128,
    spacing=1.0,
    hu_inside: float = 1000.0,
    hu_outside: float = -1000.0,
    ramp: float = 4.0,
    dtype=np.float32,
) -> Volume:
    """Asymmetric bone phantom: a sphere fused with an ellipsoid, centered on the world origin."""
    (X, Y, Z), spacing, origin = _grid(dims, spacing, None)
    frac = np.zeros(X.shape)
    for c, axes in TWO_LOBE_SHAPES:
        # scaled radial coordinate; depth approximated along the shortest semi-axis
        rho = np.sqrt(((X - c[0]) / axes[0]) ** 2 + ((Y - c[1]) / axes[1]) ** 2 + ((Z - c[2]) / axes[2]) ** 2)
        frac = np.maximum(frac, _ramp((1.0 - rho) * axes.min(), ramp))
    return Volume(_fill(frac, hu_inside, hu_outside, dtype), spacing, origin)


_LANDMARK_DIRECTIONS = np.array(
    [
        [1.0, 0.2, 0.1],
        [-1.0, 0.1, 0.3],
        [0.1, 1.0, -0.2],
        [0.2, -1.0, 0.1],
        [0.3, 0.1, 1.0],
        [-0.2, 0.3, -1.0],
        [-0.6, -0.6, 0.5],
    ]
)


def two_lobe_landmarks() -> LandmarkSet:
    """Fourteen surface landmarks, seven per lobe of :func:`two_lobe_phantom`."""
    names, points = [], []
    for lobe, (c, axes) in enumerate(TWO_LOBE_SHAPES):
        for k, d in enumerate(_LANDMARK_DIRECTIONS):
            u = d / np.linalg.norm(d)
            names.append(f"L{lobe * 7 + k + 1:02d}")
            points.append(c + axes * u)
    return LandmarkSet(names, np.array(points))
