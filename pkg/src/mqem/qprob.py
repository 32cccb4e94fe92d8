"""Quasi-probability post-processing.

A non-physical inverse ``E^{-1} = sum_k q_k B_k`` is written as a signed
mixture of channels. Sampling ``k`` with probability ``|q_k| / C`` and
multiplying the measured value by ``C sign(q_k)`` gives an unbiased estimate
of ``tr(O E^{-1}(rho))``; ``C = sum_k |q_k|`` controls the variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .complexla import SIGMA_X, SIGMA_Y, SIGMA_Z

TOL = 1e-10


class DecompositionError(ValueError):
    pass


def apply_kraus(kraus: Sequence[np.ndarray], rho: np.ndarray) -> np.ndarray:
    return sum(k @ rho @ k.conj().T for k in kraus)


@dataclass(frozen=True)
class QuasiDecomposition:
    maps: tuple[tuple[np.ndarray, ...], ...]
    coefficients: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "coefficients", q)
        object.__setattr__(self, "maps", tuple(tuple(np.asarray(k, dtype=complex) for k in m) for m in self.maps))
        if len(self.maps) != len(q) or not len(q):
            raise DecompositionError("need one coefficient per map")
        if abs(q.sum() - 1.0) > TOL:
            raise DecompositionError(f"coefficients sum to {q.sum():.12g}, not 1")
        for i, kraus in enumerate(self.maps):
            d = kraus[0].shape[0]
            total = sum(k.conj().T @ k for k in kraus)
            if np.max(np.abs(total - np.eye(d))) > TOL:
                raise DecompositionError(f"map {i} is not trace preserving")

    @property
    def dim(self) -> int:
        return self.maps[0][0].shape[0]

    def apply(self, rho) -> np.ndarray:
        """Deterministic ``sum_k q_k B_k(rho)``."""
        rho = np.asarray(rho, dtype=complex)
        return sum(q * apply_kraus(m, rho) for q, m in zip(self.coefficients, self.maps))


@dataclass(frozen=True)
class QPSampling:
    cost: float
    probabilities: np.ndarray
    signs: np.ndarray


def normalize(decomp: QuasiDecomposition) -> QPSampling:
    q = decomp.coefficients
    cost = float(np.abs(q).sum())
    if cost == 0.0:
        raise DecompositionError("all coefficients are zero")
    return QPSampling(cost, np.abs(q) / cost, np.where(q < 0, -1.0, 1.0))


def qp_estimate(sampling: QPSampling, decomp: QuasiDecomposition, rho, O, n_samples: int,
                seed: int) -> tuple[float, float]:
    """Monte Carlo ``C mean(s_k tr(O B_k(rho)))`` with ``k ~ p``; returns (mean, stderr)."""
    O = np.asarray(O, dtype=complex)
    if np.max(np.abs(O - O.conj().T)) > TOL:
        raise ValueError("observable must be Hermitian")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rho = np.asarray(rho, dtype=complex)
    values = np.array([np.trace(O @ apply_kraus(m, rho)).real for m in decomp.maps])
    rng = np.random.default_rng(seed)
    ks = rng.choice(len(values), size=n_samples, p=sampling.probabilities)
    samples = sampling.cost * sampling.signs[ks] * values[ks]
    se = samples.std(ddof=1) / np.sqrt(n_samples) if n_samples > 1 else 0.0
    return float(samples.mean()), float(se)


# Depolarizing example ----------------------------------------------------------

PAULIS = (np.eye(2, dtype=complex), SIGMA_X, SIGMA_Y, SIGMA_Z)


def depolarizing_kraus(p: float) -> tuple[np.ndarray, ...]:
    """``E(rho) = (1 - p) rho + p I/2`` in Pauli-Kraus form."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    w = [1 - 3 * p / 4, p / 4, p / 4, p / 4]
    return tuple(np.sqrt(wi) * P for wi, P in zip(w, PAULIS))


def depolarizing_inverse(p: float) -> QuasiDecomposition:
    """Inverse of the depolarizing channel as a mixture of Pauli conjugations.

    The Bloch vector shrinks by ``f = 1 - p``; undoing it takes weight
    ``(1 + 3/f)/4`` on the identity and ``(1 - 1/f)/4`` on each Pauli.
    """
    if not 0 <= p < 1:
        raise ValueError("the channel is not invertible at p = 1")
    f = 1.0 - p
    q = np.array([(1 + 3 / f) / 4] + [(1 - 1 / f) / 4] * 3)
    return QuasiDecomposition(tuple((P,) for P in PAULIS), q)


# File I/O --------------------------------------------------------------------

def _row(values: np.ndarray) -> str:
    return ",".join(f"{v.real:.17g},{v.imag:.17g}" for v in values)


def write_decomposition(path, decomp: QuasiDecomposition) -> None:
    """Header ``dim,k_count``; per map a coefficient line, a Kraus count and one line per matrix row."""
    lines = [f"{decomp.dim},{len(decomp.maps)}"]
    for q, kraus in zip(decomp.coefficients, decomp.maps):
        lines.append(f"{q:.17g}")
        lines.append(str(len(kraus)))
        for k in kraus:
            lines.extend(_row(r) for r in k)
    Path(path).write_text("\n".join(lines) + "\n")


def read_decomposition(path) -> QuasiDecomposition:
    rows = [ln.strip() for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]
    it = iter(rows)
    try:
        dim, count = (int(x) for x in next(it).split(","))
        coeffs, maps = [], []
        for _ in range(count):
            coeffs.append(float(next(it)))
            kraus = []
            for _ in range(int(next(it))):
                mat = np.empty((dim, dim), dtype=complex)
                for r in range(dim):
                    nums = [float(x) for x in next(it).split(",")]
                    if len(nums) != 2 * dim:
                        raise DecompositionError(f"row has {len(nums)} numbers, expected {2 * dim}")
                    mat[r] = np.array(nums[0::2]) + 1j * np.array(nums[1::2])
                kraus.append(mat)
            maps.append(tuple(kraus))
    except StopIteration:
        raise DecompositionError(f"{path}: file ends early") from None
    if next(it, None) is not None:
        raise DecompositionError(f"{path}: trailing data")
    return QuasiDecomposition(tuple(maps), np.array(coeffs))
