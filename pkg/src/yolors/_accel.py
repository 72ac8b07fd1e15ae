"""Optional numba acceleration.

Set ``YOLORS_NUMBA=0`` in the environment before import to force the
pure-numpy code paths. When numba is missing the numpy paths are used
automatically.
"""
import logging
import os

logger = logging.getLogger(__name__)

_requested = os.environ.get("YOLORS_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _requested:
        raise ImportError("disabled via YOLORS_NUMBA")
    import numba

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return numba.njit(*args, **kwargs)

    USE_NUMBA = True
except ImportError as exc:  # pragma: no cover - exercised via env flag in a subprocess
    logger.debug("numba kernels unavailable: %s", exc)

    def njit(pyfunc=None, **kwargs):
        def wrap(func):
            return func

        return wrap if pyfunc is None else wrap(pyfunc)

    USE_NUMBA = False

__all__ = ["njit", "USE_NUMBA"]
