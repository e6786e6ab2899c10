"""Persistent barrier-synchronized worker pool for stage-parallel kernels.

Tasks are partitioned by fixed chunk boundaries that depend only on the data,
never on the worker count, and every task writes to disjoint array slices, so
results are bitwise identical for any number of workers.  The calling thread
acts as worker 0 to keep dispatch latency low.
"""

from __future__ import annotations

import threading

__all__ = ["WorkerPool", "chunk_bounds"]


def chunk_bounds(n: int, n_chunks: int) -> list[tuple[int, int]]:
    """Split range(n) into at most ``n_chunks`` contiguous chunks."""
    n_chunks = max(1, min(n_chunks, n))
    size = -(-n // n_chunks)
    return [(i, min(i + size, n)) for i in range(0, n, size)]


class WorkerPool:
    """Long-lived thread team executing one list of tasks per ``run`` call."""

    def __init__(self, n_workers: int):
        self.n = max(1, int(n_workers))
        self._fn = None
        self._tasks = ()
        self._errors = []
        self._stop = False
        if self.n > 1:
            self._start = threading.Barrier(self.n)
            self._done = threading.Barrier(self.n)
            self._threads = [
                threading.Thread(target=self._loop, args=(i,), daemon=True)
                for i in range(1, self.n)
            ]
            for t in self._threads:
                t.start()

    def _loop(self, rank: int):
        while True:
            self._start.wait()
            if self._stop:
                return
            try:
                for k in range(rank, len(self._tasks), self.n):
                    self._fn(*self._tasks[k])
            except BaseException as exc:  # surfaced by run()
                self._errors.append(exc)
            self._done.wait()

    def run(self, fn, tasks):
        """Execute ``fn(*task)`` for every task; blocks until all finish."""
        if self.n == 1 or len(tasks) == 1:
            for task in tasks:
                fn(*task)
            return
        self._fn, self._tasks = fn, tasks
        self._start.wait()
        try:
            for k in range(0, len(tasks), self.n):
                fn(*tasks[k])
        except BaseException as exc:
            self._errors.append(exc)
        self._done.wait()
        if self._errors:
            err = self._errors[0]
            self._errors.clear()
            raise err

    def close(self):
        if self.n > 1 and not self._stop:
            self._stop = True
            try:
                self._start.wait(timeout=1.0)
            except threading.BrokenBarrierError:
                pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
