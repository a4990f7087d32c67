"""Forked worker processes for lockstep training steps.

Trainable parameters are rebound onto one shared float64 arena before the
fork, so the master's in-place optimizer updates are visible to workers
without any per-step transfer. Each batch slot owns a gradient slab; the
master reduces slabs in slot order, which keeps results bit-identical for
any worker count. Falls back to in-process execution when forking is
unavailable or a single worker is requested.
"""

from __future__ import annotations

import multiprocessing as mp
import os
from multiprocessing import shared_memory

import numpy as np


def _worker_loop(runner, pipe, grads_meta):
    shm_name, n_slots, total, offsets = grads_meta
    shm = shared_memory.SharedMemory(name=shm_name)
    grads = np.ndarray((n_slots, total), dtype=np.float64, buffer=shm.buf)
    try:
        while True:
            msg = pipe.recv()
            if msg is None:
                return
            epoch, step, jobs = msg
            replies = []
            try:
                for slot_pos, payload in jobs:
                    grads[slot_pos].fill(0.0)
                    values, gmap = runner(payload, epoch, step)
                    for name, g in gmap.items():
                        off, size = offsets[name]
                        grads[slot_pos, off : off + size] += g.ravel()
                    replies.append((slot_pos, values))
                pipe.send(("ok", replies))
            except Exception as exc:  # surface worker failures to the master
                import traceback

                pipe.send(("error", f"{exc}\n{traceback.format_exc()}"))
    finally:
        shm.close()


class StepExecutor:
    """Runs per-slot scan losses across forked workers (or inline)."""

    def __init__(self, runner, trainable: dict, n_slots: int, n_workers: int):
        self.runner = runner
        self.names = list(trainable.keys())
        self.tensors = [trainable[n] for n in self.names]
        sizes = [t.data.size for t in self.tensors]
        offs = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.offsets = {n: (int(offs[i]), sizes[i]) for i, n in enumerate(self.names)}
        self.total = int(offs[-1])
        self.n_slots = n_slots
        # more processes than cores only adds memory contention here
        self.n_workers = max(1, min(n_workers, n_slots, os.cpu_count() or 1))
        self._procs = []
        self._pipes = []
        self._param_shm = None
        self._grad_shm = None
        self._grads = None
        self._orig_data = None
        if self.n_workers > 1 and hasattr(os, "fork"):
            self._start()

    @property
    def forked(self) -> bool:
        return bool(self._procs)

    def _start(self):
        self._param_shm = shared_memory.SharedMemory(create=True, size=max(8, self.total * 8))
        arena = np.ndarray((self.total,), dtype=np.float64, buffer=self._param_shm.buf)
        self._orig_data = {}
        for name, t in zip(self.names, self.tensors):
            off, size = self.offsets[name]
            view = arena[off : off + size].reshape(t.data.shape)
            view[...] = t.data
            self._orig_data[name] = t.data
            t.data = view
        self._grad_shm = shared_memory.SharedMemory(create=True, size=max(8, self.n_slots * self.total * 8))
        self._grads = np.ndarray((self.n_slots, self.total), dtype=np.float64, buffer=self._grad_shm.buf)
        meta = (self._grad_shm.name, self.n_slots, self.total, self.offsets)
        ctx = mp.get_context("fork")
        for _ in range(self.n_workers):
            parent, child = ctx.Pipe()
            proc = ctx.Process(target=_worker_loop, args=(self.runner, child, meta), daemon=True)
            proc.start()
            child.close()
            self._procs.append(proc)
            self._pipes.append(parent)

    def run_step(self, epoch: int, step: int, payloads: list):
        """Returns (per-slot term-value dicts, summed flat gradient)."""
        n = len(payloads)
        if not self.forked:
            values_out = []
            flat = np.zeros(self.total)
            for slot_pos, payload in enumerate(payloads):
                values, gmap = self.runner(payload, epoch, step)
                values_out.append(values)
                for name, g in gmap.items():
                    off, size = self.offsets[name]
                    flat[off : off + size] += g.ravel()
            return values_out, flat
        # round-robin slots over workers; reduction below is slot-ordered
        assignments = [[] for _ in range(self.n_workers)]
        for slot_pos, payload in enumerate(payloads):
            assignments[slot_pos % self.n_workers].append((slot_pos, payload))
        active = []
        for w, jobs in enumerate(assignments):
            if jobs:
                self._pipes[w].send((epoch, step, jobs))
                active.append(w)
        values_out = [None] * n
        for w in active:
            status, payload = self._pipes[w].recv()
            if status == "error":
                raise RuntimeError(f"training worker failed:\n{payload}")
            for slot_pos, values in payload:
                values_out[slot_pos] = values
        flat = self._grads[:n].sum(axis=0)
        return values_out, flat

    def grad_map(self, flat: np.ndarray) -> dict:
        out = {}
        for name, t in zip(self.names, self.tensors):
            off, size = self.offsets[name]
            out[name] = flat[off : off + size].reshape(t.data.shape)
        return out

    def close(self):
        for pipe in self._pipes:
            try:
                pipe.send(None)
            except (BrokenPipeError, OSError):
                pass
        for proc in self._procs:
            proc.join(timeout=10)
            if proc.is_alive():
                proc.terminate()
        for pipe in self._pipes:
            pipe.close()
        if self._orig_data is not None:
            for name, t in zip(self.names, self.tensors):
                old = t.data
                self._orig_data[name][...] = old
                t.data = self._orig_data[name]
        for shm in (self._param_shm, self._grad_shm):
            if shm is not None:
                shm.close()
                shm.unlink()
        self._procs, self._pipes = [], []
        self._param_shm = self._grad_shm = self._grads = None
