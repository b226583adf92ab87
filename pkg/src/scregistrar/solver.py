"""Rigid pose recovery from 2D-3D correspondences.

Hypotheses come from a P3P solver on four-point samples, otherwise from EPnP
(four virtual control points, Gauss-Newton on the null-space coefficients)
or, for coplanar points, from a plane homography.
RANSAC scores hypotheses by reprojection error and the winning consensus set
is polished with Levenberg-Marquardt on SE(3).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import AllPointsBehindCamera, DegenerateConfiguration, InsufficientCorrespondences, NoConsensus
from .geometry import CameraModel, RigidTransform, orthonormalize, so3_exp
from .scene_coords import CorrespondenceSet

MIN_SAMPLE = 4


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 1000
    reproj_threshold_px: float = 10.0
    min_sample: int = MIN_SAMPLE
    confidence: float = 0.999
    seed: int = 0
    max_correspondences: int = 4000
    lm_max_iters: int = 100
    lm_tol: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.reproj_threshold_px <= 0:
            raise ValueError("reproj_threshold_px must be positive")
        if self.min_sample < MIN_SAMPLE:
            raise ValueError("min_sample must be at least 4")
        # confidence == 1 disables the adaptive early exit
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError("confidence must lie in (0, 1]")


@dataclass(frozen=True)
class PoseEstimate:
    pose: RigidTransform
    inlier_count: int
    inlier_ratio: float
    mean_reproj_error_px: float
    iterations_used: int
    converged: bool
    inliers: np.ndarray | None = None

    def to_record(self, view_id: str, wall_time_ms: float | None = None) -> dict:
        rec = {"id": view_id}
        rec.update(self.pose.to_record())
        rec.update(
            inlier_count=int(self.inlier_count),
            inlier_ratio=float(self.inlier_ratio),
            mean_reproj_error_px=float(self.mean_reproj_error_px),
            iterations_used=int(self.iterations_used),
            converged=bool(self.converged),
        )
        if wall_time_ms is not None:
            rec["wall_time_ms"] = float(wall_time_ms)
        return rec


def _normalized(camera: CameraModel, pixels: np.ndarray) -> np.ndarray:
    return np.stack([(pixels[:, 0] - camera.cx) / camera.fx, (pixels[:, 1] - camera.cy) / camera.fy], axis=1)


def reprojection_errors(camera: CameraModel, pose: RigidTransform, pixels, points) -> np.ndarray:
    """Per-correspondence pixel error; ``inf`` where the point is behind the source."""
    Xc = np.asarray(points) @ pose.rotation.T + pose.translation
    z = Xc[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    du = camera.fx * Xc[:, 0] / zs + camera.cx - pixels[:, 0]
    dv = camera.fy * Xc[:, 1] / zs + camera.cy - pixels[:, 1]
    return np.where(ok, np.hypot(du, dv), np.inf)


def _kabsch(A: np.ndarray, B: np.ndarray) -> RigidTransform:
    """Least-squares rigid motion with ``B ~ R A + t``."""
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cb - R @ ca)


# --- EPnP --------------------------------------------------------------------

_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
# products beta_a * beta_b in the order b11 b12 b22 b13 b23 b33 b14 b24 b34 b44
_PROD = [(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2), (0, 3), (1, 3), (2, 3), (3, 3)]


def _epnp(X: np.ndarray, uv: np.ndarray, eigvals: np.ndarray, eigvecs: np.ndarray, c0: np.ndarray):
    """EPnP candidates for non-planar points; ``uv`` are normalized image coordinates."""
    cw = np.vstack([c0, c0 + np.sqrt(eigvals)[None, :] * eigvecs.T])  # 4 control points
    C = (cw[1:] - c0).T
    alphas = np.linalg.solve(C, (X - c0).T).T
    alphas = np.hstack([1.0 - alphas.sum(axis=1, keepdims=True), alphas])

    n = len(X)
    M = np.zeros((2 * n, 12))
    for i in range(4):
        a = alphas[:, i]
        M[0::2, 3 * i] = a
        M[0::2, 3 * i + 2] = -a * uv[:, 0]
        M[1::2, 3 * i + 1] = a
        M[1::2, 3 * i + 2] = -a * uv[:, 1]
    _, V = np.linalg.eigh(M.T @ M)
    null = V[:, :4].T.reshape(4, 4, 3)  # [k, control point, xyz], smallest eigenvalue first

    dv = np.array([[null[k, a] - null[k, b] for (a, b) in _PAIRS] for k in range(4)])  # (4, 6, 3)
    L = np.empty((6, 10))
    for col, (a, b) in enumerate(_PROD):
        s = 1.0 if a == b else 2.0
        L[:, col] = s * np.sum(dv[a] * dv[b], axis=-1)
    rho = np.array([np.sum((cw[a] - cw[b]) ** 2) for (a, b) in _PAIRS])

    inits = []
    # beta = [b1, b2, b3, b4] from the b11 b12 b13 b14 columns
    sol = np.linalg.lstsq(L[:, [0, 1, 3, 6]], rho, rcond=None)[0]
    b1 = math.sqrt(abs(sol[0])) or 1e-12
    sgn = -1.0 if sol[0] < 0 else 1.0
    inits.append(np.array([b1, sol[1] / b1, sol[2] / b1, sol[3] / b1]) * sgn)
    # two betas from b11 b12 b22
    sol = np.linalg.lstsq(L[:, [0, 1, 2]], rho, rcond=None)[0]
    b1 = math.sqrt(abs(sol[0]))
    b2 = math.sqrt(abs(sol[2]))
    if sol[1] * (1 if sol[0] >= 0 else -1) < 0:
        b2 = -b2
    inits.append(np.array([b1, b2, 0.0, 0.0]))
    # three betas from b11 b12 b22 b13 b23
    sol = np.linalg.lstsq(L[:, :5], rho, rcond=None)[0]
    b1 = math.sqrt(abs(sol[0])) or 1e-12
    b2 = math.sqrt(abs(sol[2]))
    if sol[1] * (1 if sol[0] >= 0 else -1) < 0:
        b2 = -b2
    inits.append(np.array([b1, b2, sol[3] / b1, 0.0]))

    poses = []
    for beta in inits:
        beta = _gauss_newton_betas(L, rho, beta)
        cc = np.einsum("k,kij->ij", beta, null)
        Xc = alphas @ cc
        if np.mean(Xc[:, 2]) < 0:
            Xc = -Xc
        try:
            poses.append(_kabsch(X, Xc))
        except ValueError:
            continue
    return poses


def _gauss_newton_betas(L, rho, beta, iters: int = 8):
    ia = np.array([p[0] for p in _PROD])
    ib = np.array([p[1] for p in _PROD])
    for _ in range(iters):
        prod = beta[ia] * beta[ib]
        r = L @ prod - rho
        # d(prod)/d(beta): (10, 4)
        J_prod = np.zeros((10, 4))
        J_prod[np.arange(10), ia] += beta[ib]
        J_prod[np.arange(10), ib] += beta[ia]
        J = L @ J_prod
        try:
            delta = np.linalg.lstsq(J, -r, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        beta = beta + delta
        if np.linalg.norm(delta) < 1e-12 * (1 + np.linalg.norm(beta)):
            break
    return beta


# --- planar case ---------------------------------------------------------------

def _homography_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT homography with ``dst ~ H src`` (both ``(N, 2)``)."""

    def norm_tf(p):
        c = p.mean(axis=0)
        s = math.sqrt(2) / max(np.mean(np.linalg.norm(p - c, axis=1)), 1e-300)
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])

    Ts, Td = norm_tf(src), norm_tf(dst)
    s = (np.c_[src, np.ones(len(src))]) @ Ts.T
    d = (np.c_[dst, np.ones(len(dst))]) @ Td.T
    n = len(src)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = s
    A[0::2, 6:9] = -d[:, 0:1] * s
    A[1::2, 3:6] = s
    A[1::2, 6:9] = -d[:, 1:2] * s
    _, sv, Vt = np.linalg.svd(A)
    if n == 4 and sv[-2] < 1e-12 * sv[0] or n > 4 and sv[-2] < 1e-9 * sv[0]:
        raise DegenerateConfiguration("homography system is rank deficient")
    H = Vt[-1].reshape(3, 3)
    return np.linalg.inv(Td) @ H @ Ts


def _planar(X, uv, c0, e1, e2):
    nrm = np.cross(e1, e2)
    B = np.vstack([e1, e2, nrm])  # world -> plane frame
    P = (X - c0) @ B.T
    H = _homography_dlt(P[:, :2], uv)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    r1, r2 = lam * h1, lam * h2
    Rp = orthonormalize(np.column_stack([r1, r2, np.cross(r1, r2)]))
    tp = lam * h3
    R = Rp @ B
    return [RigidTransform(R, tp - R @ c0)]


# --- P3P ------------------------------------------------------------------------

def _p3p(X: np.ndarray, bearings: np.ndarray) -> list[RigidTransform]:
    """Grunert's three-point solution.

    ``X`` holds three world points and ``bearings`` their unit camera-frame
    directions. Each real root of the distance quartic is polished with a
    few Newton steps on the three law-of-cosines equations.
    """
    j1, j2, j3 = bearings
    a2 = np.sum((X[1] - X[2]) ** 2)
    b2 = np.sum((X[0] - X[2]) ** 2)
    c2 = np.sum((X[0] - X[1]) ** 2)
    ca, cb, cg = j2 @ j3, j1 @ j3, j1 @ j2
    p = (a2 - c2) / b2
    q = (a2 + c2) / b2
    coeffs = [
        (p - 1) ** 2 - 4 * c2 / b2 * ca**2,
        4 * (p * (1 - p) * cb - (1 - q) * ca * cg + 2 * c2 / b2 * ca**2 * cb),
        2 * (p**2 - 1 + 2 * p**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2
             - 4 * q * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2),
        4 * (-p * (1 + p) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - q) * ca * cg),
        (1 + p) ** 2 - 4 * a2 / b2 * cg**2,
    ]
    if not np.all(np.isfinite(coeffs)):
        return []
    roots = np.roots(coeffs)
    cos_ij = np.array([cg, ca, cb])  # pairs (1,2), (2,3), (1,3)
    d2 = np.array([c2, a2, b2])
    poses = []
    for v in roots:
        # double roots come back as near-real pairs; polishing settles them
        if abs(v.imag) > 1e-3 * max(1.0, abs(v.real)):
            continue
        v = v.real
        if v <= 0:
            continue
        s1_sq = b2 / (1 + v**2 - 2 * v * cb)
        if s1_sq <= 0:
            continue
        s1 = math.sqrt(s1_sq)
        s3 = v * s1
        # s2 from the (1, 2) constraint; keep the root that best fits (2, 3)
        disc = s1_sq * cg**2 - (s1_sq - c2)
        if disc < 0:
            if disc < -1e-9 * c2:
                continue
            disc = 0.0
        best_s2, best_r = None, math.inf
        for s2 in (s1 * cg + math.sqrt(disc), s1 * cg - math.sqrt(disc)):
            if s2 <= 0:
                continue
            r = abs(s2**2 + s3**2 - 2 * s2 * s3 * ca - a2)
            if r < best_r:
                best_s2, best_r = s2, r
        if best_s2 is None:
            continue
        s = np.array([s1, best_s2, s3])
        s = _polish_distances(s, cos_ij, d2)
        if s is None or np.any(s <= 0):
            continue
        try:
            poses.append(_kabsch(X, s[:, None] * bearings))
        except ValueError:
            continue
    return poses


def _polish_distances(s, cos_ij, d2, iters: int = 5):
    pairs = ((0, 1), (1, 2), (0, 2))
    for _ in range(iters):
        r = np.array([s[i] ** 2 + s[j] ** 2 - 2 * s[i] * s[j] * c - d for (i, j), c, d in zip(pairs, cos_ij, d2)])
        J = np.zeros((3, 3))
        for row, ((i, j), c) in enumerate(zip(pairs, cos_ij)):
            J[row, i] = 2 * s[i] - 2 * s[j] * c
            J[row, j] = 2 * s[j] - 2 * s[i] * c
        try:
            delta = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return s
        s = s + delta
        if np.max(np.abs(delta)) < 1e-12 * np.max(np.abs(s)):
            break
    return s if np.all(np.isfinite(s)) else None


def _bearings(camera: CameraModel, pixels: np.ndarray) -> np.ndarray:
    uv = _normalized(camera, pixels)
    b = np.c_[uv, np.ones(len(uv))]
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _cross_norm(a, b) -> float:
    return math.sqrt(
        (a[1] * b[2] - a[2] * b[1]) ** 2 + (a[2] * b[0] - a[0] * b[2]) ** 2 + (a[0] * b[1] - a[1] * b[0]) ** 2
    )


_TRIANGLES = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))


def _candidates(X: np.ndarray, px: np.ndarray, camera: CameraModel) -> list[RigidTransform]:
    c0 = X.mean(axis=0)
    A = X - c0
    w, V = np.linalg.eigh(A.T @ A / len(X))  # ascending
    scale = max(w[2], 1e-300)
    if w[1] <= 1e-10 * scale:
        raise DegenerateConfiguration("3-D points are collinear")
    if len(X) == 4:
        tri = list(max(_TRIANGLES, key=lambda t: _cross_norm(X[t[1]] - X[t[0]], X[t[2]] - X[t[0]])))
        return _p3p(X[tri], _bearings(camera, px[tri]))
    if w[0] <= 1e-10 * scale:
        return _planar(X, _normalized(camera, px), c0, V[:, 2], V[:, 1])
    return _epnp(X, _normalized(camera, px), w, V, c0)


def pnp_minimal(correspondences: CorrespondenceSet, camera: CameraModel) -> list[RigidTransform]:
    """Closed-form pose candidates from four or more correspondences.

    Four correspondences go through P3P on the best-conditioned triangle;
    larger sets use EPnP, or a plane homography when the points are
    coplanar. Candidates that put any point behind the source are dropped
    and the rest are sorted by mean reprojection error over all points.
    """
    X = correspondences.points
    px = correspondences.pixels
    if len(X) < MIN_SAMPLE:
        raise InsufficientCorrespondences(f"need {MIN_SAMPLE} correspondences, got {len(X)}")
    return _rank(_candidates(X, px, camera), X, px, camera)


def _rank(poses, X, px, camera):
    out = []
    for p in poses:
        depth = X @ p.rotation[2] + p.translation[2]
        if np.all(depth > 0):
            out.append((float(np.mean(reprojection_errors(camera, p, px, X))), p))
    out.sort(key=lambda e: e[0])
    return [p for _, p in out]


# --- Levenberg-Marquardt -------------------------------------------------------

def _residuals(camera, R, t, X, px):
    Xc = X @ R.T + t
    z = Xc[:, 2]
    r = np.empty(2 * len(X))
    r[0::2] = camera.fx * Xc[:, 0] / z + camera.cx - px[:, 0]
    r[1::2] = camera.fy * Xc[:, 1] / z + camera.cy - px[:, 1]
    return r, Xc


def _jacobian(camera, Xc):
    """d(residual)/d(omega, v) for the left update ``x_c -> exp(omega) x_c + v``."""
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / z
    n = len(Xc)
    dproj = np.zeros((2 * n, 3))
    dproj[0::2, 0] = camera.fx * iz
    dproj[0::2, 2] = -camera.fx * x * iz**2
    dproj[1::2, 1] = camera.fy * iz
    dproj[1::2, 2] = -camera.fy * y * iz**2
    J = np.zeros((2 * n, 6))
    # d(exp(omega) x_c)/d(omega) at 0 is -[x_c]_x
    for i in range(2):
        D = dproj[i::2]
        J[i::2, 0] = D[:, 1] * (-z) + D[:, 2] * y
        J[i::2, 1] = D[:, 0] * z + D[:, 2] * (-x)
        J[i::2, 2] = D[:, 0] * (-y) + D[:, 1] * x
        J[i::2, 3:6] = D
    return J


def _mean_error(r: np.ndarray) -> float:
    return float(np.mean(np.hypot(r[0::2], r[1::2])))


def refine_lm(
    initial: RigidTransform,
    correspondences: CorrespondenceSet,
    camera: CameraModel,
    max_iters: int = 100,
    tol: float = 1e-10,
    history: list | None = None,
) -> tuple[RigidTransform, float]:
    """Minimize the summed squared reprojection error over SE(3).

    Steps are accepted only when they lower the cost and keep every point in
    front of the source. If the result has a larger mean pixel error than the
    start (possible because LM minimizes squared error), the start is returned.

    If ``history`` is a list, the cost after each accepted step is appended.
    """
    X = correspondences.points
    px = correspondences.pixels
    depth0 = X @ initial.rotation[2] + initial.translation[2]
    front = depth0 > 1e-9
    if front.sum() < MIN_SAMPLE:
        raise AllPointsBehindCamera("fewer than four correspondences lie in front of the source")
    X, px = X[front], px[front]

    R, t = initial.rotation.copy(), initial.translation.copy()
    r, Xc = _residuals(camera, R, t, X, px)
    cost = float(r @ r)
    err0 = _mean_error(r)
    if history is not None:
        history.append(cost)
    lam = 1e-3
    for _ in range(max_iters):
        J = _jacobian(camera, Xc)
        g = J.T @ r
        Hs = J.T @ J
        step_ok = False
        while lam < 1e16:
            A = Hs + lam * np.diag(np.maximum(np.diag(Hs), 1e-12))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dR = so3_exp(delta[:3])
            R_new = dR @ R
            t_new = dR @ t + delta[3:]
            r_new, Xc_new = _residuals(camera, R_new, t_new, X, px)
            if np.all(Xc_new[:, 2] > 1e-9):
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    step_ok = True
                    break
            lam *= 10
        if not step_ok:
            break
        R, t, r, Xc, cost = R_new, t_new, r_new, Xc_new, cost_new
        if history is not None:
            history.append(cost)
        lam = max(lam / 10, 1e-12)
        if np.linalg.norm(delta) < tol:
            break
    R = orthonormalize(R) if np.abs(R.T @ R - np.eye(3)).max() > 1e-12 else R
    result = RigidTransform(R, t)
    err = _mean_error(_residuals(camera, R, t, X, px)[0])
    if err > err0:
        return initial, err0
    return result, err


# --- RANSAC -----------------------------------------------------------------------

def _adaptive_bound(inlier_fraction: float, m: int, confidence: float) -> float:
    if confidence >= 1.0:
        return math.inf
    if inlier_fraction >= 1.0:
        return 0.0
    p_good = inlier_fraction**m
    if p_good <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log(1.0 - p_good)


def register(
    correspondences: CorrespondenceSet, camera: CameraModel, cfg: RansacConfig = RansacConfig()
) -> PoseEstimate:
    """Robust pose from correspondences: RANSAC over minimal samples, then LM on the inliers.

    Correspondence sets larger than ``cfg.max_correspondences`` are first
    subsampled uniformly. The result depends only on the inputs and ``cfg.seed``.
    """
    n_total = len(correspondences)
    if n_total < cfg.min_sample:
        raise InsufficientCorrespondences(f"need {cfg.min_sample} correspondences, got {n_total}")
    rng = np.random.default_rng(cfg.seed)
    corr = correspondences
    if n_total > cfg.max_correspondences:
        keep = np.sort(rng.choice(n_total, cfg.max_correspondences, replace=False))
        corr = correspondences.subset(keep)
    n = len(corr)
    X, px = corr.points, corr.pixels
    thr = cfg.reproj_threshold_px
    thr2 = thr * thr
    cu = camera.cx - px[:, 0]
    cv = camera.cy - px[:, 1]

    best = None  # (count, mean_err, iteration, pose, mask)
    bound = math.inf
    iterations = 0
    for it in range(cfg.max_iterations):
        if it >= bound:
            break
        iterations += 1
        sample = rng.choice(n, cfg.min_sample, replace=False)
        try:
            candidates = _rank(_candidates(X[sample], px[sample], camera), X[sample], px[sample], camera)
        except DegenerateConfiguration:
            continue
        for pose in candidates:
            Xc = X @ pose.rotation.T + pose.translation
            z = Xc[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                du = camera.fx * Xc[:, 0] / z + cu
                dv = camera.fy * Xc[:, 1] / z + cv
                e2 = du * du + dv * dv
            mask = (z > 1e-9) & (e2 < thr2)
            count = int(np.count_nonzero(mask))
            if count == 0 or (best is not None and count < best[0]):
                continue
            mean_err = float(np.sqrt(e2[mask]).mean())
            if best is None or count > best[0] or mean_err < best[1]:
                best = (count, mean_err, it, pose, mask)
                bound = _adaptive_bound(count / n, cfg.min_sample, cfg.confidence)

    if best is None or best[0] < cfg.min_sample:
        raise NoConsensus(f"best consensus has {0 if best is None else best[0]} inliers")

    pose, mask = best[3], best[4]
    converged = False
    for _ in range(5):
        refined, _ = refine_lm(pose, corr.subset(mask), camera, cfg.lm_max_iters, cfg.lm_tol)
        err = reprojection_errors(camera, refined, px, X)
        new_mask = err < thr
        if new_mask.sum() < cfg.min_sample:
            break
        pose = refined
        converged = True
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    err = reprojection_errors(camera, pose, px, X)
    mask = err < thr
    count = int(mask.sum())
    if count < cfg.min_sample:
        raise NoConsensus("refined pose lost its consensus")
    return PoseEstimate(
        pose=pose,
        inlier_count=count,
        inlier_ratio=count / n,
        mean_reproj_error_px=float(err[mask].mean()),
        iterations_used=iterations,
        converged=converged,
        inliers=mask,
    )


def timed_register(correspondences, camera, cfg=RansacConfig()):
    """``register`` plus wall time in milliseconds."""
    t0 = time.perf_counter()
    est = register(correspondences, camera, cfg)
    return est, 1000.0 * (time.perf_counter() - t0)
