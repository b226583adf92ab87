"""Scene-coordinate 2D/3D registration of X-ray views against a CT volume.

Simulates C-arm radiographs and per-pixel scene-coordinate maps from a CT
volume, recovers the view pose with PnP + RANSAC, and scores it with mTRE,
projected mTRE and the gross failure rate.
"""

from .errors import *  # noqa: F401,F403
from .evaluation import (
    LandmarkSet,
    MetricReport,
    gfr,
    load_landmarks,
    mtre,
    overlay_edges,
    percentile,
    proj_mtre,
    render_overlay,
    report,
    save_landmarks,
)
from .geometry import (
    CameraModel,
    CArmPose,
    Ray,
    RigidTransform,
    backproject,
    carm_to_extrinsic,
    compose,
    invert,
    pixel_ray,
    project,
)
from .phantoms import sphere_phantom, two_lobe_landmarks, two_lobe_phantom
from .pipeline import (
    DatasetManifest,
    NoiseSpec,
    ProtocolSpec,
    generate_dataset,
    load_external_map,
    load_manifest,
    load_protocol,
    oracle_exact,
    oracle_noisy,
    sample_poses,
)
from .scene_coords import (
    CorrespondenceSet,
    SceneCoordMap,
    filter_map,
    generate_gt_map,
    load_map,
    nll_loss_intersecting,
    nll_loss_nonexistent,
    save_map,
)
from .solver import PoseEstimate, RansacConfig, pnp_minimal, refine_lm, register
from .volume import (
    DrrConfig,
    IsoSurfaceSpec,
    Volume,
    intersect_isosurface,
    load_volume,
    render_drr,
    sample_trilinear,
    save_image,
    save_volume,
)

__version__ = "0.1.0"
