"""Segmenter hot loops: compiled when the extension is built, pure Python otherwise.

Set ``ATOMICVLA_PURE=1`` to force the fallback.
"""
import os

from . import _pure

BACKEND = "python"
if not os.environ.get("ATOMICVLA_PURE"):
    try:
        from . import _native as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pure
else:
    _impl = _pure

classify_windows = _impl.classify_windows
runs = _impl.runs
merge_short_runs = _impl.merge_short_runs

__all__ = ["BACKEND", "classify_windows", "runs", "merge_short_runs"]
