import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from oracles import pinhole, random_rotation, reference_pose
from scregistrar.errors import (
    AllPointsBehindCamera,
    DegenerateConfiguration,
    InsufficientCorrespondences,
    NoConsensus,
)
from scregistrar.geometry import CameraModel, RigidTransform
from scregistrar.scene_coords import CorrespondenceSet
from scregistrar.solver import PoseEstimate, RansacConfig, pnp_minimal, refine_lm, register, reprojection_errors

CAM = CameraModel.from_detector(512, 512, 0.5, 1000.0)  # fx = 2000


def synthetic_pose(rng, depth=800.0):
    return RigidTransform(random_rotation(rng), rng.normal(0, 20, 3) + [0, 0, depth])


def synthetic_view(rng, n, pose=None, spread=60.0):
    """n points in front of the camera that project inside the image."""
    pose = pose or synthetic_pose(rng)
    X = np.empty((0, 3))
    while len(X) < n:
        cand = rng.normal(0, spread, (4 * n, 3))
        px = pinhole(CAM.K, pose.rotation, pose.translation, cand)
        ok = CAM.in_bounds(px) & (cand @ pose.rotation[2] + pose.translation[2] > 0)
        X = np.vstack([X, cand[ok]])
    X = X[:n]
    return pose, X, pinhole(CAM.K, pose.rotation, pose.translation, X)


def pose_gap(a: RigidTransform, b: RigidTransform, X):
    """Mean 3-D displacement of X under the two poses (TRE-style) and rotation angle."""
    d = np.linalg.norm(a.apply(X) - b.apply(X), axis=1).mean()
    ang = Rotation.from_matrix(a.rotation.T @ b.rotation).magnitude()
    return d, ang


def perturb(pose, rng, deg, mm):
    axis = rng.normal(size=3)
    dR = Rotation.from_rotvec(np.radians(deg) * axis / np.linalg.norm(axis)).as_matrix()
    v = rng.normal(size=3)
    return RigidTransform(dR @ pose.rotation, pose.translation + mm * v / np.linalg.norm(v))


# --- minimal solver ------------------------------------------------------------

def test_pnp_four_points_contains_truth(rng):
    for _ in range(100):
        pose, X, px = synthetic_view(rng, 4)
        cands = pnp_minimal(CorrespondenceSet.from_arrays(px, X), CAM)
        best = min(pose_gap(c, pose, X) for c in cands)
        assert best[0] <= 1e-3 and best[1] <= 1e-5


@pytest.mark.parametrize("n", [5, 6, 12, 50])
def test_pnp_overdetermined_noiseless(rng, n):
    for _ in range(20):
        pose, X, px = synthetic_view(rng, n)
        c = pnp_minimal(CorrespondenceSet.from_arrays(px, X), CAM)[0]
        d, ang = pose_gap(c, pose, X)
        assert d <= 1e-3 and ang <= 1e-5


def test_pnp_coplanar_points(rng):
    pose = synthetic_pose(rng)
    X = np.c_[rng.uniform(-50, 50, (8, 2)), np.zeros(8)]
    px = pinhole(CAM.K, pose.rotation, pose.translation, X)
    c = pnp_minimal(CorrespondenceSet.from_arrays(px, X), CAM)[0]
    assert pose_gap(c, pose, X)[0] <= 1e-3


def test_pnp_collinear_is_degenerate():
    X = np.array([[0, 0, 0], [10, 0, 0], [20, 0, 0], [35, 0, 0]], float)
    pose = RigidTransform(np.eye(3), [0, 0, 900])
    px = pinhole(CAM.K, pose.rotation, pose.translation, X)
    with pytest.raises(DegenerateConfiguration):
        pnp_minimal(CorrespondenceSet.from_arrays(px, X), CAM)


def test_pnp_identity_square():
    X = np.array([[-50, -50, 1000], [50, -50, 1000], [50, 50, 1000], [-50, 50, 1000]], float)
    px = pinhole(CAM.K, np.eye(3), np.zeros(3), X)
    cands = pnp_minimal(CorrespondenceSet.from_arrays(px, X), CAM)
    d, ang = min(pose_gap(c, RigidTransform.identity(), X) for c in cands)
    assert d <= 1e-3 and ang <= 1e-5


def test_pnp_cheirality(rng):
    pose, X, px = synthetic_view(rng, 6)
    for c in pnp_minimal(CorrespondenceSet.from_arrays(px, X), CAM):
        assert np.all(c.apply(X)[:, 2] > 0)


def test_pnp_too_few():
    with pytest.raises(InsufficientCorrespondences):
        pnp_minimal(CorrespondenceSet.from_arrays(np.zeros((3, 2)), np.zeros((3, 3))), CAM)


# --- Levenberg-Marquardt ----------------------------------------------------------

def test_lm_stationary_at_truth(rng):
    pose, X, px = synthetic_view(rng, 200)
    out, err = refine_lm(pose, CorrespondenceSet.from_arrays(px, X), CAM)
    assert np.abs(out.rotation - pose.rotation).max() <= 1e-9
    assert np.abs(out.translation - pose.translation).max() <= 1e-9
    assert err <= 1e-9


def test_lm_converges_from_perturbation(rng):
    for _ in range(20):
        pose, X, px = synthetic_view(rng, 200)
        start = perturb(pose, rng, 5.0, 20.0)
        out, err = refine_lm(start, CorrespondenceSet.from_arrays(px, X), CAM)
        assert pose_gap(out, pose, X)[0] <= 1e-3
        assert err <= 1e-4


def test_lm_matches_scipy_reference(rng):
    # noisy pixels: the least-squares optimum is not the truth, so compare two solvers
    pose, X, px = synthetic_view(rng, 150)
    px = px + rng.normal(0, 1.5, px.shape)
    ours, _ = refine_lm(perturb(pose, rng, 3, 10), CorrespondenceSet.from_arrays(px, X), CAM)
    R, t = reference_pose(px, X, CAM.K, 800.0, n_starts=8, f_scale=1e6)
    assert pose_gap(ours, RigidTransform(R, t), X)[0] <= 1e-3


def test_lm_cost_monotone(rng):
    for _ in range(30):
        pose, X, px = synthetic_view(rng, 60)
        px = px + rng.normal(0, 2, px.shape)
        hist = []
        refine_lm(perturb(pose, rng, 10, 40), CorrespondenceSet.from_arrays(px, X), CAM, history=hist)
        assert len(hist) >= 2
        assert np.all(np.diff(hist) <= 0)


def test_lm_never_worse_than_start(rng):
    for _ in range(30):
        pose, X, px = synthetic_view(rng, 40)
        # heavy-tailed pixel noise: squared-error optimum can raise the mean error
        px = px + rng.standard_t(1.5, px.shape) * 5
        cs = CorrespondenceSet.from_arrays(px, X)
        start_err = reprojection_errors(CAM, pose, px, X).mean()
        _, err = refine_lm(pose, cs, CAM)
        assert err <= start_err + 1e-12


def test_lm_all_behind():
    X = np.array([[0, 0, -10], [1, 0, -10], [0, 1, -10], [1, 1, -12], [2, 1, -11]], float)
    with pytest.raises(AllPointsBehindCamera):
        refine_lm(RigidTransform.identity(), CorrespondenceSet.from_arrays(np.zeros((5, 2)) + 256, X), CAM)


# --- RANSAC ----------------------------------------------------------------------

def outlier_problem(rng, n, rate, sigma_mm=1.0):
    pose, X, px = synthetic_view(rng, n)
    Xn = X + rng.normal(0, sigma_mm, X.shape)
    out = rng.random(n) < rate
    lo, hi = X.min(axis=0), X.max(axis=0)
    Xn[out] = rng.uniform(lo, hi, (out.sum(), 3))
    return pose, X, CorrespondenceSet.from_arrays(px, Xn), out


def test_register_noiseless(rng):
    pose, X, px = synthetic_view(rng, 500)
    est = register(CorrespondenceSet.from_arrays(px, X), CAM, RansacConfig(seed=1))
    assert isinstance(est, PoseEstimate) and est.converged
    assert pose_gap(est.pose, pose, X)[0] < 0.1
    assert est.inlier_count == 500 and est.inlier_ratio == 1.0


def test_register_seventy_thirty(rng):
    # 10 px at fx=2000, 800 mm is 4 mm; outliers are drawn in the point box
    pose, X, cs, out = outlier_problem(rng, 1000, 0.3)
    est = register(cs, CAM, RansacConfig(max_iterations=1000, seed=3))
    assert abs(est.inlier_ratio - (1 - out.mean())) <= 0.05
    assert pose_gap(est.pose, pose, X)[0] < 2.0


def test_register_three_points():
    with pytest.raises(InsufficientCorrespondences):
        register(CorrespondenceSet.from_arrays(np.zeros((3, 2)), np.zeros((3, 3))), CAM)


def test_register_no_consensus(rng):
    # pixels unrelated to the points
    X = rng.normal(0, 50, (60, 3))
    px = rng.uniform(0, 512, (60, 2))
    with pytest.raises(NoConsensus):
        register(CorrespondenceSet.from_arrays(px, X), CAM, RansacConfig(reproj_threshold_px=0.01, max_iterations=50))


def test_register_deterministic(rng):
    _, _, cs, _ = outlier_problem(rng, 5000, 0.4)
    a = register(cs, CAM, RansacConfig(seed=11))
    b = register(cs, CAM, RansacConfig(seed=11))
    assert np.array_equal(a.pose.rotation, b.pose.rotation) and np.array_equal(a.pose.translation, b.pose.translation)
    assert a.to_record("v") == b.to_record("v")


def test_register_consensus_sound(rng):
    for seed in range(5):
        _, _, cs, _ = outlier_problem(rng, 400, 0.5)
        cfg = RansacConfig(seed=seed)
        est = register(cs, CAM, cfg)
        err = reprojection_errors(CAM, est.pose, cs.pixels, cs.points)
        assert np.all(err[est.inliers] < cfg.reproj_threshold_px)
        assert est.inlier_count == est.inliers.sum() <= len(cs)
        assert est.mean_reproj_error_px == pytest.approx(err[est.inliers].mean())


def test_register_subsamples_to_cap(rng):
    _, _, cs, _ = outlier_problem(rng, 3000, 0.2)
    est = register(cs, CAM, RansacConfig(max_correspondences=500))
    assert len(est.inliers) == 500


def test_register_early_exit_and_full_run(rng):
    _, _, cs, _ = outlier_problem(rng, 300, 0.1)
    early = register(cs, CAM, RansacConfig(max_iterations=1000))
    full = register(cs, CAM, RansacConfig(max_iterations=1000, confidence=1.0))
    assert early.iterations_used < 50
    assert full.iterations_used == 1000


def test_config_validation():
    for bad in (dict(max_iterations=0), dict(reproj_threshold_px=0), dict(min_sample=3), dict(confidence=0.0)):
        with pytest.raises(ValueError):
            RansacConfig(**bad)


def test_outlier_robustness_curve():
    rates = np.round(np.arange(0, 0.61, 0.1), 1)
    success = []
    for rate in rates:
        ok = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            pose, X, cs, _ = outlier_problem(rng, 200, rate)
            try:
                est = register(cs, CAM, RansacConfig(seed=seed))
                ok += pose_gap(est.pose, pose, X)[0] < 10.0
            except NoConsensus:
                pass
        success.append(ok / 10)
    assert all(a >= b for a, b in zip(success, success[1:])), success


@given(st.integers(0, 2**31 - 1))
def test_register_recovers_random_noiseless_views(seed):
    rng = np.random.default_rng(seed)
    pose, X, px = synthetic_view(rng, 30)
    est = register(CorrespondenceSet.from_arrays(px, X), CAM, RansacConfig(seed=seed))
    assert pose_gap(est.pose, pose, X)[0] < 1e-3
