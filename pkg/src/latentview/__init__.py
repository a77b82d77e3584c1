"""Pose-free sparse-view novel view synthesis at desk scale.

Subpackages cover camera geometry, a minimal reverse-mode autodiff core,
transformer building blocks, the view-synthesis models, a synthetic
multi-view dataset generator with an exact ray-cast renderer, metrics and
experiment sweeps, a CLI, and a local HTTP render service.
"""

import os

# Thread cap must land in the environment before numpy loads its BLAS.
_threads = os.environ.get("NVS_THREADS")
if _threads:
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(_var, _threads)
del os, _threads

__version__ = "0.1.0"
