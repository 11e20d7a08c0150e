"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback keeps the package
usable (slowly) without a C toolchain.  Set SCENEWEAVER_FORCE_NUMPY=1 to
force the fallback, e.g. for parity testing or benchmarking.
"""

from __future__ import annotations

import os

from . import numpy_backend

if os.environ.get("SCENEWEAVER_FORCE_NUMPY"):
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:  # pragma: no cover - build-environment dependent
        _impl = numpy_backend
        BACKEND = "numpy"

query_points = _impl.query_points
render_forward = _impl.render_forward
render_backward = _impl.render_backward
adam_step_density = _impl.adam_step_density
adam_step_color = _impl.adam_step_color


def backend_name() -> str:
    return BACKEND
