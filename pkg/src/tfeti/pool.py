"""Fixed-capacity arena for temporary buffers shared by concurrent workers.

One backing byte array is carved into disjoint regions by first fit over an
offset-sorted free list.  When a request does not fit, the calling worker
blocks until enough releases land; blocked requests are re-examined in FIFO
order on every release and every satisfiable one is granted on the spot.
Adjacent free blocks coalesce on release.

All transitions happen under one lock; with auditing on (the default) the
ledger is checked for disjointness and accounting after every transition.
An optional trace records the linearized request/grant/release sequence so
a sequential model can replay and verify a concurrent run.
"""

from __future__ import annotations

import threading
from collections import deque

import numpy as np

_ALIGN = 16


class PoolError(Exception):
    """Base class for allocator failures."""


class PoolCapacityError(PoolError):
    """Request can never be satisfied (or immediate mode found no space)."""


class PoolStateError(PoolError):
    """Contract violation: double release or a corrupted ledger."""


def _rounded(size: int) -> int:
    return ((int(size) + _ALIGN - 1) // _ALIGN) * _ALIGN


class Region:
    """Opaque single-owner handle to a pool region."""

    __slots__ = ("pool", "offset", "size", "block", "req_id", "live")

    def __init__(self, pool, offset, size, block, req_id):
        self.pool = pool
        self.offset = offset
        self.size = size
        self.block = block
        self.req_id = req_id
        self.live = True

    def as_array(self, dtype=np.float64, shape=None):
        """View the region as an ndarray; C-ordered over ``shape``."""
        dt = np.dtype(dtype)
        count = self.size // dt.itemsize
        arr = self.pool._buffer[self.offset:self.offset + count * dt.itemsize].view(dt)
        if shape is not None:
            arr = arr[: int(np.prod(shape, dtype=np.int64))].reshape(shape)
        return arr

    def release(self):
        self.pool.release(self)


class Pool:
    """Blocking first-fit arena with FIFO wakeup."""

    def __init__(self, capacity: int, audit: bool = True, record_trace: bool = False):
        if capacity < 0:
            raise PoolCapacityError("capacity must be nonnegative")
        self.capacity = int(capacity)
        # blocks are 16-byte aligned, so the arena is the rounded capacity;
        # a request as large as the stated capacity must still fit
        self._arena = _rounded(self.capacity)
        self._buffer = np.zeros(self._arena, dtype=np.uint8)
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._free = [(0, self._arena)] if self._arena else []
        self._live = {}          # req_id -> (offset, block_size, user_size)
        self._waiters = deque()  # dicts: req_id, block, granted(offset|None)
        self._next_id = 0
        self.audit_enabled = audit
        self.trace = [] if record_trace else None
        self.peak_live_bytes = 0
        self.total_acquires = 0

    # -- internals (call with the lock held) --------------------------------

    def _record(self, *event):
        if self.trace is not None:
            self.trace.append(event)

    def _try_fit(self, block):
        for i, (off, size) in enumerate(self._free):
            if size >= block:
                if size == block:
                    self._free.pop(i)
                else:
                    self._free[i] = (off + block, size - block)
                return off
        return None

    def _grant_waiters(self):
        """Scan blocked requests in FIFO order, granting each one that fits."""
        granted_any = False
        remaining = deque()
        while self._waiters:
            w = self._waiters.popleft()
            off = self._try_fit(w["block"])
            if off is None:
                remaining.append(w)
            else:
                w["granted"] = off
                self._live[w["req_id"]] = (off, w["block"], w["size"])
                self._record("grant", w["req_id"], off)
                granted_any = True
        self._waiters = remaining
        if granted_any:
            self._cond.notify_all()

    def _audit(self):
        if not self.audit_enabled:
            return
        spans = sorted((off, off + blk) for off, blk, _ in self._live.values())
        total = 0
        prev_end = 0
        for a, b in spans:
            if a < prev_end:
                raise PoolStateError("live regions overlap")
            prev_end = b
            total += b - a
        if total > self._arena:
            raise PoolStateError("live bytes exceed capacity")
        free_total = sum(s for _, s in self._free)
        if free_total + total != self._arena:
            raise PoolStateError("free list does not account for remaining capacity")
        prev_end = -1
        for off, size in self._free:
            if size <= 0 or off <= prev_end:
                raise PoolStateError("free list not sorted/coalesced")
            prev_end = off + size
        self.peak_live_bytes = max(self.peak_live_bytes, total)

    # -- public API ----------------------------------------------------------

    def acquire(self, size: int, blocking: bool = True, tag=None) -> Region:
        """Reserve ``size`` bytes, waiting for space when ``blocking``.

        A request larger than the whole capacity fails permanently (it could
        never be satisfied and would deadlock).  ``size`` 0 is a valid empty
        region.
        """
        if size < 0:
            raise PoolCapacityError("size must be nonnegative")
        block = _rounded(size)
        if size > self.capacity:
            raise PoolCapacityError(
                f"request of {size} bytes exceeds pool capacity {self.capacity}"
            )
        with self._cond:
            req_id = self._next_id
            self._next_id += 1
            self.total_acquires += 1
            self._record("request", req_id, int(size))
            if size == 0:
                self._record("grant", req_id, 0)
                self._live[req_id] = (0, 0, 0)
                self._audit()
                return Region(self, 0, 0, 0, req_id)
            # only jump the queue when nobody is waiting: arrivals behind
            # blocked requests queue up in FIFO order
            off = self._try_fit(block) if not self._waiters else None
            if off is not None:
                self._live[req_id] = (off, block, size)
                self._record("grant", req_id, off)
                self._audit()
                return Region(self, off, size, block, req_id)
            if not blocking:
                self._record("denied", req_id)
                raise PoolCapacityError(
                    f"no immediate space for {size} bytes (capacity {self.capacity})"
                )
            waiter = {"req_id": req_id, "block": block, "size": size, "granted": None}
            self._waiters.append(waiter)
            self._record("blocked", req_id)
            while waiter["granted"] is None:
                self._cond.wait()
            off = waiter["granted"]
            self._audit()
            return Region(self, off, size, block, req_id)

    def release(self, region: Region) -> None:
        """Return a region; adjacent free space coalesces, waiters re-run."""
        with self._cond:
            if not region.live or region.req_id not in self._live:
                raise PoolStateError("double release or foreign region")
            region.live = False
            off, block, _ = self._live.pop(region.req_id)
            self._record("release", region.req_id, off)
            if block > 0:
                self._insert_free(off, block)
                self._grant_waiters()
            self._audit()

    def _insert_free(self, off, size):
        lo, hi = 0, len(self._free)
        while lo < hi:
            mid = (lo + hi) // 2
            if self._free[mid][0] < off:
                lo = mid + 1
            else:
                hi = mid
        self._free.insert(lo, (off, size))
        # coalesce with neighbours
        i = lo
        if i + 1 < len(self._free) and self._free[i][0] + self._free[i][1] == self._free[i + 1][0]:
            o, s = self._free[i]
            self._free[i] = (o, s + self._free[i + 1][1])
            self._free.pop(i + 1)
        if i > 0 and self._free[i - 1][0] + self._free[i - 1][1] == self._free[i][0]:
            o, s = self._free[i - 1]
            self._free[i - 1] = (o, s + self._free[i][1])
            self._free.pop(i)

    # -- introspection -------------------------------------------------------

    @property
    def live_bytes(self) -> int:
        with self._lock:
            return sum(blk for _, blk, _ in self._live.values())

    @property
    def free_bytes(self) -> int:
        with self._lock:
            return sum(s for _, s in self._free)

    @property
    def n_live(self) -> int:
        with self._lock:
            return len(self._live)
