"""Hot loops of the observables, compiled when available.

The compiled Cython module is used when it was built at install time.
Otherwise, or when the environment variable ``HDIVSTAT_PURE_PYTHON`` is set
to a non-empty value other than ``0``, the numpy fallback is used.
``BACKEND`` names the active implementation.
"""
import os

from . import _fallback

_force_python = os.environ.get("HDIVSTAT_PURE_PYTHON", "") not in ("", "0")

if _force_python:
    _compiled = None
else:
    try:
        from . import _structure as _compiled
    except ImportError:
        _compiled = None

if _compiled is not None:
    structure_sum = _compiled.structure_sum
    BACKEND = "cython"
else:
    structure_sum = _fallback.structure_sum
    BACKEND = "python"

__all__ = ["structure_sum", "BACKEND"]
