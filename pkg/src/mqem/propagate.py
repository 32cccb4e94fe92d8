"""Deterministic integration of time-local master equations.

Rates may have either sign. This dense integrator is the reference every
stochastic estimate in the package is checked against.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.linalg

from .complexla import commutator_superop, dissipator_superop
from .models import NoiseModel


class TraceDriftError(RuntimeError):
    pass


def _signs(model: NoiseModel, signs) -> np.ndarray:
    if signs is None:
        return np.ones(len(model.channels))
    s = np.broadcast_to(np.asarray(signs, dtype=float), (len(model.channels),))
    return np.array(s)


def liouvillian_apply(model: NoiseModel, rho: np.ndarray, t: float, signs=None) -> np.ndarray:
    """``-i[H(t), rho] + sum_k s_k r_k(t) (L rho L^H - {L^H L, rho}/2)``."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (model.dim, model.dim):
        raise ValueError(f"state has shape {rho.shape}, model dimension is {model.dim}")
    h = model.hamiltonian_at(t)
    out = -1j * (h @ rho - rho @ h)
    for s, ch in zip(_signs(model, signs), model.channels):
        r = s * ch.rate(t)
        if r == 0.0:
            continue
        l = ch.lindblad
        ldl = l.conj().T @ l
        out += r * (l @ rho @ l.conj().T - 0.5 * (ldl @ rho + rho @ ldl))
    return out


class Generator:
    """Cached superoperator form of a model's generator."""

    def __init__(self, model: NoiseModel, signs=None):
        self.model = model
        self.signs = _signs(model, signs)
        self._dissipators = [dissipator_superop(np.asarray(c.lindblad, dtype=complex))
                             for c in model.channels]
        self._ham_cache: dict[int, np.ndarray] = {}

    def _hamiltonian_part(self, t: float) -> np.ndarray:
        key = self.model.hamiltonian_piece(t)
        if key not in self._ham_cache:
            self._ham_cache[key] = commutator_superop(self.model.hamiltonian_at(t))
        return self._ham_cache[key]

    def superop(self, t: float, t_rates: float | None = None) -> np.ndarray:
        """Generator at time ``t``; rates may be taken at ``t_rates``."""
        tr = t if t_rates is None else t_rates
        out = self._hamiltonian_part(t).copy()
        for s, ch, d in zip(self.signs, self.model.channels, self._dissipators):
            r = s * ch.rate(tr)
            if r != 0.0:
                out += r * d
        return out


def liouvillian_superop(model: NoiseModel, t: float, signs=None) -> np.ndarray:
    return Generator(model, signs).superop(t)


def integrate(model: NoiseModel, rho0, t_grid: Sequence[float], signs=None, *,
              substeps: int = 1, trace_tol: float = 1e-6) -> np.ndarray:
    """Classical RK4 on the flattened master equation.

    Returns the state at every point of ``t_grid``. ``substeps`` RK4 steps
    are taken per grid interval. The Hamiltonian is held at its value at the
    start of each step; rates are evaluated at the RK4 stage times.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    rho0 = np.asarray(rho0, dtype=complex)
    d = model.dim
    gen = Generator(model, signs)
    tr0 = np.trace(rho0)
    out = np.empty((len(t_grid), d, d), dtype=complex)
    out[0] = rho0
    y = rho0.reshape(-1).copy()
    const = model.time_independent
    g_const = gen.superop(t_grid[0]) if const else None
    for n in range(len(t_grid) - 1):
        t0, t1 = t_grid[n], t_grid[n + 1]
        h = (t1 - t0) / substeps
        for s in range(substeps):
            t = t0 + s * h
            if const:
                g1 = g2 = g3 = g_const
            else:
                g1 = gen.superop(t)
                g2 = gen.superop(t, t + 0.5 * h)
                g3 = gen.superop(t, t + h)
            k1 = g1 @ y
            k2 = g2 @ (y + 0.5 * h * k1)
            k3 = g2 @ (y + 0.5 * h * k2)
            k4 = g3 @ (y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = y.reshape(d, d)
        drift = abs(np.trace(rho) - tr0)
        if drift > trace_tol:
            raise TraceDriftError(f"trace drifted by {drift:.3e} at t={t1:g}; reduce the step size")
        out[n + 1] = rho
    return out


def exact_propagator(model: NoiseModel, dt: float, signs=None, t: float = 0.0) -> np.ndarray:
    """``expm(G dt)`` for the generator frozen at time ``t``."""
    return scipy.linalg.expm(Generator(model, signs).superop(t) * dt)


def unitary_states(h: np.ndarray, psi0, t_grid) -> np.ndarray:
    """``exp(-i H t) psi0`` at every grid time (time-independent ``H``)."""
    w, v = np.linalg.eigh(h)
    c = v.conj().T @ np.asarray(psi0, dtype=complex)
    t = np.asarray(t_grid, dtype=float) - t_grid[0]
    return (np.exp(-1j * np.outer(t, w)) * c) @ v.T
