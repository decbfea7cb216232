"""Best-effort CPU pinning for benchmark worker threads.

Pinning is attempted and reported, never required: platforms without
sched_setaffinity (or with restricted masks) simply run unpinned.
"""

from __future__ import annotations

import os
import threading


def try_pin_current_thread(cpu: int) -> bool:
    """Pin the calling thread to one CPU; returns whether it stuck."""
    if not hasattr(os, "sched_setaffinity"):
        return False
    try:
        tid = threading.get_native_id()
        os.sched_setaffinity(tid, {cpu % (os.cpu_count() or 1)})
        return True
    except OSError:
        return False
