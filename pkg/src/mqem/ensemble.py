"""Seeded trajectory streams, mergeable ensemble sums and chunked execution.

Trajectories are split into fixed-size chunks. The split never depends on the
number of workers and partial sums are merged in chunk order, so a run is
reproducible bit for bit under any worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_CHUNK = 1000


def trajectory_seed(master_seed: int, index: int) -> int:
    """64-bit seed of trajectory ``index`` derived from ``master_seed``."""
    lo, hi = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),)).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


def trajectory_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


def chunk_bounds(n: int, chunk_size: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    if n <= 0:
        raise ValueError("need at least one trajectory")
    return [(a, min(a + chunk_size, n)) for a in range(0, n, chunk_size)]


def map_chunks(fn: Callable, bounds, workers: int = 1, args: tuple = ()) -> list:
    """Evaluate ``fn(start, stop, *args)`` per chunk, results in chunk order."""
    if workers <= 1 or len(bounds) == 1:
        return [fn(a, b, *args) for a, b in bounds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, a, b, *args) for a, b in bounds]
        return [f.result() for f in futures]


@dataclass
class EnsembleResult:
    """Weighted ensemble mean of states with Monte Carlo diagnostics.

    ``stderr_re`` and ``stderr_im`` are entrywise standard errors of the real
    and imaginary parts of ``mean``. ``cost`` is the mean of ``|weight|``.
    """

    times: np.ndarray
    mean: np.ndarray
    stderr_re: np.ndarray
    stderr_im: np.ndarray
    mean_weight: np.ndarray
    cost: np.ndarray
    weight_stderr: np.ndarray
    cost_stderr: np.ndarray
    n_trajectories: int

    @property
    def trace(self) -> np.ndarray:
        return np.real(np.trace(self.mean, axis1=-2, axis2=-1))


class EnsembleSums:
    """Running sums of ``w * sigma`` and their squares on a set of output times."""

    def __init__(self, n_times: int, dim: int):
        self.n = 0
        self.s1 = np.zeros((n_times, dim, dim), dtype=complex)
        self.s2 = np.zeros((n_times, dim, dim), dtype=complex)
        self.sw = np.zeros(n_times)
        self.sw2 = np.zeros(n_times)
        self.sabs = np.zeros(n_times)

    def add(self, i: int, states: np.ndarray, weights: np.ndarray | None = None) -> None:
        """Add a batch of states ``(B, d, d)`` at output index ``i``."""
        if weights is None:
            weights = np.ones(states.shape[0])
        ws = weights[:, None, None] * states
        self.s1[i] += ws.sum(axis=0)
        self.s2[i] += (ws.real ** 2).sum(axis=0) + 1j * (ws.imag ** 2).sum(axis=0)
        self.sw[i] += weights.sum()
        self.sw2[i] += (weights ** 2).sum()
        self.sabs[i] += np.abs(weights).sum()

    def add_pure(self, i: int, psi: np.ndarray, weights: np.ndarray | None = None) -> None:
        self.add(i, psi[:, :, None] * psi.conj()[:, None, :], weights)

    def merge(self, other: "EnsembleSums") -> "EnsembleSums":
        self.n += other.n
        self.s1 += other.s1
        self.s2 += other.s2
        self.sw += other.sw
        self.sw2 += other.sw2
        self.sabs += other.sabs
        return self

    def result(self, times) -> EnsembleResult:
        n = self.n
        if n == 0:
            raise ValueError("empty ensemble")
        mean = self.s1 / n
        denom = max(n - 1, 1)
        var_re = np.clip(self.s2.real / n - mean.real ** 2, 0.0, None) * n / denom
        var_im = np.clip(self.s2.imag / n - mean.imag ** 2, 0.0, None) * n / denom
        mw = self.sw / n
        var_w = np.clip(self.sw2 / n - mw ** 2, 0.0, None) * n / denom
        cost = self.sabs / n
        var_abs = np.clip(self.sw2 / n - cost ** 2, 0.0, None) * n / denom
        return EnsembleResult(
            times=np.asarray(times, dtype=float),
            mean=mean,
            stderr_re=np.sqrt(var_re / n),
            stderr_im=np.sqrt(var_im / n),
            mean_weight=mw,
            cost=cost,
            weight_stderr=np.sqrt(var_w / n),
            cost_stderr=np.sqrt(var_abs / n),
            n_trajectories=n,
        )


def merge_sums(parts) -> EnsembleSums:
    parts = list(parts)
    total = parts[0]
    for p in parts[1:]:
        total.merge(p)
    return total
