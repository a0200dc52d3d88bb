"""Differentiable multi-view geometry losses and a variational solver.

Recovers inverse-depth maps, unit normal maps, and camera ego-motion from
stereo image sequences by direct optimization of six self-supervised loss
terms with analytic gradients, plus a synthetic-scene oracle and standard
depth/normal evaluation metrics.
"""

import os as _os
import sys as _sys

# GEOLOSS_THREADS caps the BLAS worker pool; it can only take effect if
# numpy has not been imported yet.
_cap = _os.environ.get("GEOLOSS_THREADS")
if _cap and "numpy" not in _sys.modules:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _cap)

from .camera import (  # noqa: E402
    Intrinsics,
    Ray,
    RigidTransform,
    backproject,
    pixel_rays,
    project,
    se3_exp,
    se3_log,
    transform_normal,
    transform_point,
)
from .errors import (  # noqa: E402
    EmptyMask,
    GeolossError,
    GridTooSmall,
    NoIntersection,
    NonFiniteLoss,
    NonPositiveDepth,
    NotUnit,
    ResolutionMismatch,
)
from .grids import (  # noqa: E402
    ImageGrid,
    InverseDepthMap,
    NormalMap,
    ValidityMask,
    bilinear_sample,
    depth_from_inverse,
    edge_weight,
    inverse_from_depth,
    spatial_gradients,
)
from .losses import (  # noqa: E402
    Gradients,
    LossReport,
    LossWeights,
    depth_normal_consistency_loss,
    normal_direction_loss,
    normal_from_depth,
    normal_smoothness_loss,
    photometric_loss,
    stereo_photometric_loss,
    temporal_consistency_losses,
    total_loss,
)
from .metrics import (  # noqa: E402
    DepthMetrics,
    EvalMask,
    NormalMetrics,
    build_mask,
    depth_metrics,
    normal_metrics,
)
from .solver import (  # noqa: E402
    SolveState,
    SolverConfig,
    downsample_instance,
    initialize,
    solve,
    step,
)
from .synth import (  # noqa: E402
    OracleInstance,
    PlaneSpec,
    SceneSpec,
    default_scenes,
    render,
    scene_by_name,
)

__version__ = "0.1.0"
