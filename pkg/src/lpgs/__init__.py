"""Tree-structured gaussian splat compression: predict dense splats from a
sparse set of optimized parents plus shared field and head networks."""

import os as _os

# Cap math threads before numpy spins up its BLAS pool. Results are
# deterministic at a fixed worker count, so pin it explicitly for
# reproducible runs.
_threads = _os.environ.get("LPGS_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .core import (Camera, GaussianAttributes, ModelConfig, ParentNode,
                   SceneModel, validate_config)
from .errors import LpgsError
from .hashgrid import HashGrid, HashGridConfig
from .spatial import ContractionParams, contract, estimate_aabb, frustum_cull
from .predictor import NetworkBundle, expand_forest, expand_tree
from .rasterizer import render, render_training
from .trainer import TrainConfig, psnr, run_training, ssim
from .atm import ATMConfig, ATMStats
from .codec import load, load_ply_points, save, storage_report

__version__ = "0.1.0"

__all__ = [
    "ATMConfig", "ATMStats", "Camera", "ContractionParams",
    "GaussianAttributes", "HashGrid", "HashGridConfig", "LpgsError",
    "ModelConfig", "NetworkBundle", "ParentNode", "SceneModel",
    "TrainConfig", "contract", "estimate_aabb", "expand_forest",
    "expand_tree", "frustum_cull", "load", "load_ply_points", "psnr",
    "render", "render_training", "run_training", "save", "storage_report",
    "ssim", "validate_config", "__version__",
]
