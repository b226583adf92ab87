import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scregistrar import CameraModel, IsoSurfaceSpec, generate_gt_map, two_lobe_landmarks, two_lobe_phantom
from scregistrar.pipeline import ProtocolSpec, build_manifest

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# acceptance rig: 1024 mm aperture at 768 px keeps the offset views in the
# field of view while the 10 px gate stays under 1 cm at the isocenter
ACCEPT_WIDTH = 768
ACCEPT_PITCH = 1024.0 / 768
SDD = 1020.0
ISO_HU = 500.0


ACCEPTANCE_TIMING: dict = {}


def accept_camera() -> CameraModel:
    return CameraModel.from_detector(ACCEPT_WIDTH, ACCEPT_WIDTH, ACCEPT_PITCH, SDD)


@pytest.fixture(scope="session")
def camera():
    return accept_camera()


@pytest.fixture(scope="session")
def small_camera():
    return CameraModel.from_detector(128, 128, 5.0, SDD)


@pytest.fixture(scope="session")
def two_lobe():
    return two_lobe_phantom()


@pytest.fixture(scope="session")
def landmarks():
    return two_lobe_landmarks()


@pytest.fixture(scope="session")
def iso():
    return IsoSurfaceSpec(ISO_HU)


@pytest.fixture(scope="session")
def acceptance_views(two_lobe, iso, camera):
    """The 100 acceptance views (10 x 10 grid over the protocol span) with GT maps."""
    t0 = time.perf_counter()
    manifest = build_manifest(ProtocolSpec.scaled(10, seed=0), camera)
    maps = [generate_gt_map(two_lobe, iso, camera, rec.pose) for rec in manifest.records]
    ACCEPTANCE_TIMING["gt_maps_s"] = time.perf_counter() - t0
    return manifest, maps


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary -------------------------------------------------------------
# test_acceptance.py stores a one-line detail per criterion in ACCEPTANCE_DETAILS;
# the outcome comes from the test report so a failing assert still prints FAIL.

ACCEPTANCE_DETAILS: dict = {}
_ACCEPTANCE_OUTCOMES: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = getattr(item.function, "criterion", None)
    if crit and (rep.when == "call" or rep.failed):
        _ACCEPTANCE_OUTCOMES[crit] = _ACCEPTANCE_OUTCOMES.get(crit, True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE_OUTCOMES, key=lambda c: int(c[1:])):
        status = "PASS" if _ACCEPTANCE_OUTCOMES[crit] else "FAIL"
        terminalreporter.write_line(f"{crit} {status}  {ACCEPTANCE_DETAILS.get(crit, '')}")
