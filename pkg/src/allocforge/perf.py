"""Process-level tuning for many small numpy temporaries."""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(threshold: int = 1 << 30) -> bool:
    """Keep glibc from mmapping and trimming every mid-sized array.

    Training allocates thousands of 100 KB-1 MB temporaries per update; with the
    default thresholds each one costs page faults. Returns False off glibc.
    """
    global _done
    if _done:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) and libc.mallopt(_M_TRIM_THRESHOLD, threshold)
    except (OSError, AttributeError):
        return False
    _done = bool(ok)
    return _done
