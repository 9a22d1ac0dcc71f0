"""Allocator tuning for training loops.

Every conv layer frees and reallocates hundreds of megabytes of im2col
scratch per step; glibc serves blocks that large from fresh mmaps, so each
step pays the page faults again.  Keeping large blocks on the heap (mallopt
M_MMAP_MAX=0, M_TRIM_THRESHOLD high) roughly halves CNN step time on this
workload.  Called by the trainer, never at library import.
"""

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_MAX = -4

_enabled = False


def enable_heap_reuse() -> bool:
    """Best effort; returns True if the allocator was retuned."""
    global _enabled
    if _enabled:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(ctypes.c_int(_M_MMAP_MAX), ctypes.c_int(0))
        libc.mallopt(ctypes.c_int(_M_TRIM_THRESHOLD), ctypes.c_int(1 << 30))
    except OSError:
        return False
    _enabled = True
    return True
