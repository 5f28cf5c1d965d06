"""Corner-kick tactical analysis toolkit."""

import ctypes
import ctypes.util

__version__ = "0.1.0"


def _tune_allocator():
    # Training reallocates ~300MB of attention buffers per step; keeping
    # freed blocks on the heap instead of returning them to the OS avoids
    # re-faulting those pages every step (glibc only; harmless elsewhere).
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
    except (OSError, AttributeError, TypeError):
        pass


_tune_allocator()
