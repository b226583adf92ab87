import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ray_sphere
from scregistrar.errors import DimensionMismatch, NonPositiveSigma, ParseError
from scregistrar.geometry import CameraModel, CArmPose, carm_to_extrinsic, pixel_ray, project_points
from scregistrar.phantoms import sphere_phantom
from scregistrar.scene_coords import (
    SENTINEL_LOGVAR,
    SceneCoordMap,
    filter_map,
    generate_gt_map,
    load_map,
    nll_loss_intersecting,
    nll_loss_nonexistent,
    save_map,
)
from scregistrar.volume import IsoSurfaceSpec, Volume, intersect_isosurface

ISO = IsoSurfaceSpec(500.0)
CAM = CameraModel.from_detector(128, 128, 2.0, 1020.0)


@pytest.fixture(scope="module")
def sphere():
    return sphere_phantom(128, 1.0, radius=50.0, hu_inside=1000.0, hu_outside=0.0)


@pytest.fixture(scope="module")
def oblique_map(sphere):
    pose = carm_to_extrinsic(CArmPose(25, -15, offset=[12, -8, 5]))
    return pose, generate_gt_map(sphere, ISO, CAM, pose)


def random_map(rng, w=7, h=5):
    valid = rng.random((h, w)) < 0.6
    return SceneCoordMap(
        rng.normal(0, 100, (h, w, 3)),
        rng.normal(0, 2, (h, w)),
        rng.normal(0, 100, (h, w, 3)),
        rng.normal(0, 2, (h, w)),
        valid,
    )


# --- ground-truth maps -----------------------------------------------------------

def test_empty_volume_gives_empty_map():
    v = Volume(np.full((16, 16, 16), -1000.0))
    scm = generate_gt_map(v, ISO, CAM, carm_to_extrinsic(CArmPose(0, 0)))
    assert not scm.valid.any()
    assert np.all(scm.entry == 0) and np.all(scm.entry_logvar == SENTINEL_LOGVAR)


def test_gt_points_on_analytic_sphere(oblique_map, sphere):
    pose, scm = oblique_map
    assert scm.valid.sum() > 1000
    for pts in (scm.entry[scm.valid], scm.exit[scm.valid]):
        r = np.linalg.norm(pts, axis=1)
        assert np.abs(r - 50.0).max() <= 0.5  # max(spacing)/2


def test_gt_points_match_ray_sphere_oracle(oblique_map):
    pose, scm = oblique_map
    jj, ii = np.nonzero(scm.valid)
    pick = np.random.default_rng(0).choice(len(jj), 200, replace=False)
    for j, i in zip(jj[pick], ii[pick]):
        ray = pixel_ray(CAM, pose, [i + 0.5, j + 0.5])
        t0, t1 = ray_sphere(ray.origin, ray.direction, np.zeros(3), 50.0)
        # grazing rays are poorly conditioned along the ray; the radial check above covers them
        if t1 - t0 < 10:
            continue
        assert np.linalg.norm(scm.entry[j, i] - ray.at(t0)) <= 0.5
        assert np.linalg.norm(scm.exit[j, i] - ray.at(t1)) <= 0.5


def test_reprojection_consistency(oblique_map):
    pose, scm = oblique_map
    jj, ii = np.nonzero(scm.valid)
    centers = np.stack([ii + 0.5, jj + 0.5], axis=1)
    for pts in (scm.entry, scm.exit):
        px, z = project_points(CAM, pose, pts[scm.valid].astype(float))
        assert np.all(z > 0)
        # float32 storage at ~700 mm is worth ~1e-4 mm, far below a pixel
        assert np.abs(px - centers).max() <= 0.5


def test_depth_ordering(oblique_map):
    pose, scm = oblique_map
    ze = pose.apply(scm.entry[scm.valid].astype(float))[:, 2]
    zx = pose.apply(scm.exit[scm.valid].astype(float))[:, 2]
    assert np.all(ze <= zx)


def test_silhouette_is_analytic_disc(sphere):
    # sphere centered on the principal axis: the silhouette is a disc
    pose = carm_to_extrinsic(CArmPose(0, 0))
    scm = generate_gt_map(sphere, ISO, CAM, pose)
    D = np.linalg.norm(pose.center)
    # tangent-cone radius; equals fx r / D to within 0.05 px here
    radius = CAM.fx * 50.0 / np.sqrt(D**2 - 50.0**2)
    assert abs(radius - CAM.fx * 50.0 / D) < 0.1
    c = CAM.pixel_centers()
    dist = np.linalg.norm(c - [CAM.cx, CAM.cy], axis=-1)
    assert dist[scm.valid].max() <= radius + 1
    assert dist[~scm.valid].min() >= radius - 1


def test_gt_map_matches_per_pixel_rays(two_lobe, iso):
    # the batched, footprint-culled map equals the per-pixel definition
    cam = CameraModel.from_detector(40, 40, 10.0, 1020.0)
    pose = carm_to_extrinsic(CArmPose(-30, 20, offset=[40, 10, -5]))
    scm = generate_gt_map(two_lobe, iso, cam, pose)
    for j in range(cam.height):
        for i in range(cam.width):
            hit = intersect_isosurface(two_lobe, iso, pixel_ray(cam, pose, [i + 0.5, j + 0.5]))
            assert scm.valid[j, i] == (hit is not None)
            if hit is not None:
                assert np.allclose(scm.entry[j, i], hit[0], atol=1e-3)
                assert np.allclose(scm.exit[j, i], hit[1], atol=1e-3)


def test_map_invariants_enforced():
    with pytest.raises(DimensionMismatch):
        SceneCoordMap(np.zeros((2, 3, 3)), np.zeros((2, 3)), np.zeros((2, 3, 3)), np.zeros((3, 2)), np.ones((2, 3), bool))
    # non-finite points are demoted to invalid sentinels
    e = np.zeros((1, 2, 3))
    e[0, 0, 1] = np.nan
    m = SceneCoordMap(e, np.zeros((1, 2)), np.zeros((1, 2, 3)), np.zeros((1, 2)), np.ones((1, 2), bool))
    assert m.valid.tolist() == [[False, True]]
    assert m.entry[0, 0].tolist() == [0, 0, 0] and m.exit_logvar[0, 0] == SENTINEL_LOGVAR
    with pytest.raises(ValueError):
        m.entry[0, 1, 0] = 1.0


# --- filtering ----------------------------------------------------------------------

def test_filter_gt_threshold_zero(oblique_map):
    _, scm = oblique_map
    cs = filter_map(scm, 0.0)
    assert len(cs) == 2 * scm.valid.sum()
    assert np.all(CAM.in_bounds(cs.pixels)) and np.all(np.isfinite(cs.points))
    assert len(filter_map(scm, 0.0, channels=("entry",))) == scm.valid.sum()


def test_filter_large_negative_is_empty(oblique_map):
    assert len(filter_map(oblique_map[1], -1e9)) == 0


def test_filter_half_and_half():
    h, w = 4, 6
    lv = np.full((h, w), -1.0)
    lv[:, : w // 2] = -3.0
    pts = np.arange(h * w * 3, dtype=float).reshape(h, w, 3)
    scm = SceneCoordMap(pts, lv, pts, lv, np.ones((h, w), bool))
    cs = filter_map(scm, -2.0)
    assert len(cs) == 2 * h * (w // 2)
    assert np.all(cs.logvar == -3.0) and np.all(cs.pixels[:, 0] < w // 2)


def test_filter_pixels_are_centers(oblique_map):
    _, scm = oblique_map
    cs = filter_map(scm, 0.0, channels=("entry",))
    i = (cs.pixels[:, 0] - 0.5).astype(int)
    j = (cs.pixels[:, 1] - 0.5).astype(int)
    assert np.array_equal(cs.points, scm.entry[j, i].astype(float))


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_filter_monotone_in_threshold(a, b, seed):
    m = random_map(np.random.default_rng(seed))
    lo, hi = min(a, b), max(a, b)
    small, big = filter_map(m, lo), filter_map(m, hi)
    assert len(small) <= len(big)
    assert np.all(small.logvar <= lo)


def test_filter_never_passes_invalid():
    m = random_map(np.random.default_rng(3))
    cs = filter_map(m, 1e5)
    assert len(cs) == 2 * m.valid.sum()


# --- losses --------------------------------------------------------------------------

def test_intersecting_loss_examples():
    loss, gm, gs = nll_loss_intersecting([1, 2, 3], 1.0, [1, 2, 3])
    assert loss == 0 and np.all(gm == 0)
    e = np.e
    loss, _, _ = nll_loss_intersecting([0, 0, 0], e, [e, 0, 0])
    assert loss == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(NonPositiveSigma):
        nll_loss_intersecting([0, 0, 0], 0.0, [1, 0, 0])


def test_intersecting_loss_gradients_fd(rng):
    h = 1e-5
    for _ in range(1000):
        mean = rng.normal(0, 3, 3)
        tgt = rng.normal(0, 3, 3)
        sigma = rng.uniform(0.3, 4.0)
        _, gm, gs = nll_loss_intersecting(mean, sigma, tgt)
        fd = np.empty(3)
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            fd[k] = (nll_loss_intersecting(mean + d, sigma, tgt)[0] - nll_loss_intersecting(mean - d, sigma, tgt)[0]) / (2 * h)
        fds = (nll_loss_intersecting(mean, sigma + h, tgt)[0] - nll_loss_intersecting(mean, sigma - h, tgt)[0]) / (2 * h)
        scale = max(np.abs(gm).max(), 1.0)
        assert np.abs(fd - gm).max() <= 1e-5 * scale
        assert abs(fds - gs) <= 1e-5 * max(abs(gs), 1.0)


def test_intersecting_loss_batched(rng):
    mean, tgt = rng.normal(size=(5, 4, 3)), rng.normal(size=(5, 4, 3))
    sig = rng.uniform(0.5, 2, (5, 4))
    loss, gm, gs = nll_loss_intersecting(mean, sig, tgt)
    assert loss.shape == (5, 4) and gm.shape == (5, 4, 3) and gs.shape == (5, 4)
    assert loss[2, 1] == pytest.approx(nll_loss_intersecting(mean[2, 1], sig[2, 1], tgt[2, 1])[0])


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3).filter(lambda r: np.linalg.norm(r) > 1e-3))
def test_intersecting_stationary_at_residual_norm(r):
    s = float(np.linalg.norm(r))
    _, _, gs = nll_loss_intersecting(np.zeros(3), s, r)
    assert abs(gs) <= 1e-9 * max(1.0, 1.0 / s)


def test_nonexistent_loss():
    assert nll_loss_nonexistent(1.0)[0] == 1.0
    loss, g = nll_loss_nonexistent(2.0)
    assert loss == 0.5 and g == -0.25
    grid = np.linspace(0.01, 100, 1000)
    assert np.all(np.diff(nll_loss_nonexistent(grid)[0]) < 0)
    with pytest.raises(NonPositiveSigma):
        nll_loss_nonexistent(-1.0)


# --- file format ----------------------------------------------------------------------

def test_map_round_trip_bit_identical(tmp_path, rng):
    m = random_map(rng)
    a, b = tmp_path / "a.scm", tmp_path / "b.scm"
    save_map(m, a)
    back = load_map(a)
    save_map(back, b)
    assert a.read_bytes() == b.read_bytes()
    assert np.array_equal(back.valid, m.valid)
    assert np.array_equal(back.entry, m.entry) and np.array_equal(back.exit_logvar, m.exit_logvar)


def test_map_file_layout(tmp_path):
    h, w = 2, 3
    e = np.arange(h * w * 3, dtype=float).reshape(h, w, 3)
    m = SceneCoordMap(e, np.full((h, w), -1.0), -e, np.full((h, w), -2.0), np.ones((h, w), bool))
    p = tmp_path / "m.scm"
    save_map(m, p)
    raw = p.read_bytes()
    header, payload = raw.split(b"DATA=raw little-endian\n", 1)
    assert b"WIDTH=3\n" in header and b"HEIGHT=2\n" in header and b"CHANNELS=8\n" in header
    vals = np.frombuffer(payload, "<f4").reshape(8, h, w)
    assert np.array_equal(vals[0], e[..., 0]) and np.array_equal(vals[2], e[..., 2])
    assert np.all(vals[3] == -1) and np.array_equal(vals[4], -e[..., 0]) and np.all(vals[7] == -2)


def test_map_truncated(tmp_path, rng):
    p = tmp_path / "t.scm"
    save_map(random_map(rng), p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ParseError):
        load_map(p)


def test_map_size_mismatch(tmp_path, rng):
    p = tmp_path / "t.scm"
    save_map(random_map(rng), p)
    p.write_bytes(p.read_bytes()[:-32])  # one whole pixel short
    with pytest.raises(DimensionMismatch):
        load_map(p)


@pytest.mark.parametrize(
    "header",
    [
        b"WIDTH=2\nHEIGHT=1\nCHANNELS=7\nTYPE=float32\nDATA=raw little-endian\n",
        b"WIDTH=2\nHEIGHT=1\nCHANNELS=8\nTYPE=float64\nDATA=raw little-endian\n",
        b"WIDTH=x\nHEIGHT=1\nCHANNELS=8\nTYPE=float32\nDATA=raw little-endian\n",
        b"HEIGHT=1\nCHANNELS=8\nTYPE=float32\nDATA=raw little-endian\n",
    ],
)
def test_map_bad_header(tmp_path, header):
    p = tmp_path / "bad.scm"
    p.write_bytes(header + bytes(64))
    with pytest.raises(ParseError):
        load_map(p)


def test_map_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_map(tmp_path / "none.scm")
