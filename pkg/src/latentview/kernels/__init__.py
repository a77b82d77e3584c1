"""Ray-cast kernel backend selection.

The compiled extension is preferred when present; the numpy implementation
is the fallback. Both produce bit-identical output. Set NVS_KERNEL to
"python" or "compiled" to force a backend ("compiled" raises if the
extension was not built).
"""

import os

import numpy as np

from . import pykernels

_requested = os.environ.get("NVS_KERNEL", "auto").lower()
_ck = None
if _requested in ("auto", "compiled"):
    try:
        from . import _ckernels as _ck
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "NVS_KERNEL=compiled but the extension is not built; "
                "reinstall with a C compiler available"
            )
        _ck = None
elif _requested != "python":
    raise ValueError(f"NVS_KERNEL must be auto, compiled or python, got {_requested!r}")

BACKEND = "compiled" if _ck is not None else "python"
_impl = _ck if _ck is not None else pykernels


def backend() -> str:
    return BACKEND


def render(origins, dirs, scene):
    """Shade a batch of rays against a packed scene.

    origins, dirs: (N, 3) float64 with unit directions.
    Returns (colors (N, 3), depth (N,)).
    """
    return _impl.render(
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        scene.room_lo, scene.room_hi, scene.walls,
        scene.boxes, scene.spheres, scene.light, scene.ambient,
    )


def trace_depth(origins, dirs, scene):
    """Nearest-hit distance for a batch of rays (no shading)."""
    return _impl.trace_depth(
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        scene.room_lo, scene.room_hi, scene.boxes, scene.spheres,
    )


def render_with(impl_name, origins, dirs, scene):
    """Render through a named backend (benchmark/consistency checks)."""
    if impl_name == "python":
        impl = pykernels
    elif impl_name == "compiled":
        if _ck is None:
            raise ImportError("compiled kernels not available")
        impl = _ck
    else:
        raise ValueError(f"unknown backend {impl_name!r}")
    return impl.render(
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        scene.room_lo, scene.room_hi, scene.walls,
        scene.boxes, scene.spheres, scene.light, scene.ambient,
    )
