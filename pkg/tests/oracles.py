"""Independent reference computations used by the tests.

Nothing here imports the algorithm under test; geometry comes from scipy or
closed-form formulas.
"""

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation


def trilinear_scipy(data, spacing, origin, points):
    """Trilinear samples via scipy, zero outside the voxel-center box."""
    q = (np.asarray(points, float) - origin) / spacing
    vals = map_coordinates(np.asarray(data, float), q.T, order=1, mode="constant", cval=0.0)
    n = np.array(data.shape)
    inside = np.all((q >= 0) & (q <= n - 1), axis=-1)
    return np.where(inside, vals, 0.0)


def ray_sphere(origin, direction, center, radius):
    """Analytic (t_entry, t_exit) or None for a unit direction."""
    oc = np.asarray(origin, float) - center
    b = float(direction @ oc)
    c = float(oc @ oc) - radius * radius
    disc = b * b - c
    if disc < 0:
        return None
    s = np.sqrt(disc)
    return -b - s, -b + s


def pinhole(K, R, t, X):
    """Textbook projection x ~ K (R X + t) written with homogeneous coordinates."""
    P = K @ np.hstack([R, np.reshape(t, (3, 1))])
    Xh = np.hstack([X, np.ones((len(X), 1))])
    x = Xh @ P.T
    return x[:, :2] / x[:, 2:3]


def random_rotation(rng):
    return Rotation.random(random_state=rng.integers(1 << 31)).as_matrix()


def euler_grid(n=4):
    """n^3 rotations on a regular ZYX Euler-angle grid."""
    a = np.linspace(-180, 180, n, endpoint=False)
    b = np.linspace(-90, 90, n + 2)[1:-1]
    grid = [(x, y, z) for x in a for y in b for z in a]
    return Rotation.from_euler("zyx", grid, degrees=True).as_matrix()


def reference_pose(pixels, points, K, depth_guess, n_starts=64, f_scale=2.0, gate_px=None):
    """Brute-force pose: robust (soft-L1) least squares from a grid of rotation starts.

    Each start places the point centroid on the optical axis at ``depth_guess``.
    Without ``gate_px`` the lowest robust cost wins. With ``gate_px`` each
    start's solution is re-fit by plain least squares on the points within the
    gate until the set is stable, and the largest consensus wins (ties: lower
    inlier cost). Returns ``(R, t)``.
    """
    centroid = points.mean(axis=0)

    def resid(p, R0, idx=slice(None)):
        R = Rotation.from_rotvec(p[:3]).as_matrix() @ R0
        Xc = points[idx] @ R.T + p[3:]
        z = np.maximum(Xc[:, 2], 1e-6)
        u = K[0, 0] * Xc[:, 0] / z + K[0, 2]
        v = K[1, 1] * Xc[:, 1] / z + K[1, 2]
        return np.concatenate([u - pixels[idx, 0], v - pixels[idx, 1]])

    def point_err(p, R0):
        r = resid(p, R0)
        n = len(points)
        return np.hypot(r[:n], r[n:])

    best = None
    for R0 in euler_grid(round(n_starts ** (1 / 3))):
        t0 = np.array([0.0, 0.0, depth_guess]) - R0 @ centroid
        sol = least_squares(resid, np.r_[0.0, 0.0, 0.0, t0], loss="soft_l1", f_scale=f_scale,
                            max_nfev=200, args=(R0,))
        x = sol.x
        if gate_px is None:
            score = (-sol.cost,)
        else:
            mask = point_err(x, R0) < gate_px
            for _ in range(10):
                if mask.sum() < 4:
                    break
                x = least_squares(resid, x, args=(R0, mask)).x
                new = point_err(x, R0) < gate_px
                if np.array_equal(new, mask):
                    break
                mask = new
            score = (int(mask.sum()), -float(np.sum(point_err(x, R0)[mask] ** 2)))
        if best is None or score > best[0]:
            best = (score, Rotation.from_rotvec(x[:3]).as_matrix() @ R0, x[3:])
    return best[1], best[2]


def ramp_sphere_integral(origin, direction, center, radius, ramp, mu_inside, min_fraction=0.0):
    """Line integral of the analytic ramped-sphere attenuation along a unit ray.

    Occupancy is ``clip(0.5 + (radius - r) / ramp, 0, 1)``; occupancies below
    ``min_fraction`` read as zero (the DRR air cutoff).
    """
    from scipy.integrate import quad

    oc = np.asarray(origin, float) - center
    b = float(direction @ oc)
    hit = ray_sphere(origin, direction, center, radius + ramp / 2)
    if hit is None:
        return 0.0

    def mu(s):
        r = np.linalg.norm(oc + s * direction)
        f = min(max(0.5 + (radius - r) / ramp, 0.0), 1.0)
        return mu_inside * f if f >= min_fraction else 0.0

    mid = -b
    val, _ = quad(mu, hit[0], mid, limit=200, epsabs=1e-12)
    val2, _ = quad(mu, mid, hit[1], limit=200, epsabs=1e-12)
    return val + val2
