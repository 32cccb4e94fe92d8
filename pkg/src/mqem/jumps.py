"""Quantum-jump unravelling of Lindblad dissipators.

Two samplers live here. The single-trajectory helpers (``jump_probabilities``,
``drift_step``, ``apply_jump``) implement the first-order per-step scheme
literally. The batched engine used for ensembles propagates the no-jump
evolution exactly (matrix exponential of the effective generator) and finds
jumps by the waiting-time threshold method on the same time grid: a jump
happens in step ``n`` when the no-jump survival probability first falls
below a uniform threshold. Both schemes put at most one jump in a step. The
per-step helpers apply it to the state at the start of the step; the engine
places it at the step midpoint, which removes the first-order timing bias.

States are either kets (``mixed=False``) or vectorised density matrices
evolving under an additional unmonitored dissipator (``mixed=True``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .complexla import LinAlgError, commutator_superop, dissipator_superop
from .ensemble import (
    DEFAULT_CHUNK,
    EnsembleResult,
    EnsembleSums,
    chunk_bounds,
    map_chunks,
    merge_sums,
    trajectory_rng,
    trajectory_seed,
)
from .models import Channel, NoiseModel

MAX_STEP_PROBABILITY = 0.1
NULL_NORM = 1e-12


class StepTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class JumpEvent:
    time: float
    channel_index: int


@dataclass
class TrajectoryRecord:
    seed: int
    events: list[JumpEvent] = field(default_factory=list)
    states: np.ndarray | None = None
    index: int = 0


# Single-trajectory first-order scheme ---------------------------------------

def jump_probabilities(model: NoiseModel, psi, t: float, dt: float) -> tuple[np.ndarray, float]:
    """Per-channel jump probabilities ``gamma_k(t) ||L_k psi||^2 dt`` and their sum."""
    psi = np.asarray(psi, dtype=complex)
    rates = model.rates_at(t)
    if np.any(rates < 0):
        raise ValueError("jump sampling needs non-negative rates")
    p = np.array([r * np.vdot(lp, lp).real * dt
                  for r, lp in zip(rates, (l @ psi for l in model.lindblads))])
    p_tot = float(p.sum())
    if p_tot > MAX_STEP_PROBABILITY:
        raise StepTooLargeError(f"jump probability {p_tot:.3f} in one step at t={t:g}; reduce dt")
    return p, p_tot


def drift_step(model: NoiseModel, psi, t: float, dt: float) -> np.ndarray:
    """First-order no-jump update followed by renormalisation."""
    psi = np.asarray(psi, dtype=complex)
    out = psi - 1j * dt * (model.hamiltonian_at(t) @ psi)
    for r, l in zip(model.rates_at(t), model.lindblads):
        lp = l @ psi
        out -= 0.5 * r * dt * (l.conj().T @ lp - np.vdot(lp, lp).real * psi)
    n = np.linalg.norm(out)
    if n < NULL_NORM:
        raise LinAlgError("state norm collapsed during drift step")
    return out / n


def apply_jump(psi, lindblad) -> np.ndarray:
    out = np.asarray(lindblad, dtype=complex) @ np.asarray(psi, dtype=complex)
    n = np.linalg.norm(out)
    if n < NULL_NORM:
        raise LinAlgError("jump maps the state to the null vector")
    return out / n


def _first_order_trajectory(model, psi0, t_grid, seed) -> TrajectoryRecord:
    rng = trajectory_rng(seed)
    psi = np.asarray(psi0, dtype=complex)
    states = np.empty((len(t_grid), len(psi)), dtype=complex)
    states[0] = psi
    events = []
    for n in range(len(t_grid) - 1):
        t, dt = t_grid[n], t_grid[n + 1] - t_grid[n]
        p, p_tot = jump_probabilities(model, psi, t, dt)
        if rng.random() < p_tot:
            k = int(np.searchsorted(np.cumsum(p), rng.random() * p_tot, side="right"))
            k = min(k, len(p) - 1)
            psi = apply_jump(psi, model.channels[k].lindblad)
            events.append(JumpEvent(float(t), k))
        else:
            psi = drift_step(model, psi, t, dt)
        states[n + 1] = psi
    return TrajectoryRecord(int(seed), events, states)


# Batched engine -------------------------------------------------------------

def uniform_step(t_grid) -> float:
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) < 2:
        raise ValueError("time grid needs at least two points")
    steps = np.diff(t_grid)
    dt = float(steps.mean())
    if dt <= 0 or np.max(np.abs(steps - dt)) > 1e-9 * max(1.0, abs(t_grid[-1])):
        raise ValueError("time grid must be uniform and increasing")
    return dt


@dataclass
class EngineSpec:
    """Everything a worker needs to simulate a chunk of trajectories.

    ``model`` carries the monitored channels with their (non-negative)
    sampling rates. ``bath`` lists unmonitored channels that only enter the
    deterministic part; they require ``mixed=True``. ``stride`` is the number
    of grid steps between stored output times.
    """

    model: NoiseModel
    initial: np.ndarray
    t_grid: np.ndarray
    master_seed: int
    stride: int = 1
    mixed: bool = False
    bath: tuple[Channel, ...] = ()
    weighting: object | None = None
    keep_events: bool = True
    keep_states: bool = False
    observable: Callable | None = None

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.dt = uniform_step(self.t_grid)
        n_steps = len(self.t_grid) - 1
        if self.stride < 1 or n_steps % self.stride:
            raise ValueError(f"stride {self.stride} does not divide {n_steps} steps")
        if self.bath and not self.mixed:
            raise ValueError("an unmonitored bath needs density-matrix trajectories")
        d = self.model.dim
        init = np.asarray(self.initial, dtype=complex)
        if self.mixed and init.ndim == 1:
            init = np.outer(init, init.conj())
        expected = (d, d) if self.mixed else (d,)
        if init.shape != expected:
            raise ValueError(f"initial state has shape {init.shape}, expected {expected}")
        self.initial = init
        self._check_step_size()

    @property
    def out_times(self) -> np.ndarray:
        return self.t_grid[:: self.stride]

    def _check_step_size(self) -> None:
        norms = [np.linalg.norm(c.lindblad, 2) ** 2 for c in self.model.channels]
        knots = set(self.t_grid[:1].tolist() + self.t_grid[-2:-1].tolist())
        for c in self.model.channels:
            if not c.rate.is_constant:
                knots.update(float(x) for x in c.rate.knots() if self.t_grid[0] <= x <= self.t_grid[-1])
        for t in sorted(knots):
            rates = self.model.rates_at(t)
            if np.any(rates < 0):
                raise ValueError(f"negative sampling rate at t={t:g}")
            bound = float(np.dot(rates, norms)) * self.dt
            if bound > MAX_STEP_PROBABILITY:
                raise StepTooLargeError(
                    f"worst-case jump probability {bound:.3f} per step at t={t:g}; reduce dt")


class _Propagation:
    """Exact no-jump propagators and jump maps for one representation."""

    def __init__(self, spec: EngineSpec):
        self.spec = spec
        model = spec.model
        d = model.dim
        self.d = d
        self.lindblads = model.lindblads
        self.ldl = np.array([l.conj().T @ l for l in self.lindblads]) if self.lindblads else np.zeros((0, d, d))
        self.mixed = spec.mixed
        if self.mixed:
            eye = np.eye(d)
            self._anti = [-0.5 * (np.kron(a, eye) + np.kron(eye, a.T)) for a in self.ldl]
            self._bath = [(c.rate, dissipator_superop(np.asarray(c.lindblad, dtype=complex)))
                          for c in spec.bath]
            self._jump_super = [np.kron(l, l.conj()) for l in self.lindblads]
            self._diag = np.arange(d) * (d + 1)
            # tr(A rho) = sum_ij A_ji rho_ij
            self._expect = np.array([a.T.reshape(-1) for a in self.ldl]).T if len(self.ldl) else None
        self._step_cache: dict = {}
        self._half_cache: dict = {}
        self._stride_cache: dict = {}

    def generator(self, t: float) -> np.ndarray:
        dt = self.spec.dt
        model = self.spec.model
        h = model.hamiltonian_at(t)
        rates = model.rates_at(t + 0.5 * dt)
        if not self.mixed:
            g = -1j * h
            for r, a in zip(rates, self.ldl):
                g = g - 0.5 * r * a
            return g
        g = commutator_superop(h)
        for r, a in zip(rates, self._anti):
            g = g + r * a
        for rate, dsup in self._bath:
            g = g + rate(t + 0.5 * dt) * dsup
        return g

    def _constant(self) -> bool:
        return self.spec.model.time_independent and all(c.rate.is_constant for c in self.spec.bath)

    def step(self, n: int) -> np.ndarray:
        key = 0 if self._constant() else n
        if key not in self._step_cache:
            if len(self._step_cache) > 4 * self.spec.stride:
                self._step_cache.clear()
            t = self.spec.t_grid[n]
            self._step_cache[key] = scipy.linalg.expm(self.generator(t) * self.spec.dt)
        return self._step_cache[key]

    def half(self, n: int) -> np.ndarray:
        """Half of step ``n``; two of these compose to ``step(n)``."""
        key = 0 if self._constant() else n
        if key not in self._half_cache:
            if len(self._half_cache) > 4 * self.spec.stride:
                self._half_cache.clear()
            t = self.spec.t_grid[n]
            self._half_cache[key] = scipy.linalg.expm(self.generator(t) * (0.5 * self.spec.dt))
        return self._half_cache[key]

    def stride(self, i: int) -> np.ndarray:
        """Propagator over output interval ``i``."""
        key = 0 if self._constant() else i
        if key not in self._stride_cache:
            self._stride_cache.clear()
            s = self.spec.stride
            if key == 0 and self._constant():
                self._stride_cache[key] = np.linalg.matrix_power(self.step(0), s)
            else:
                p = np.eye(self.step(i * s).shape[0], dtype=complex)
                for n in range(i * s, (i + 1) * s):
                    p = self.step(n) @ p
                self._stride_cache[key] = p
        return self._stride_cache[key]

    def norms(self, v: np.ndarray) -> np.ndarray:
        if self.mixed:
            return v[:, self._diag].sum(axis=1).real
        return np.einsum("bi,bi->b", v.conj(), v).real

    def channel_weights(self, v: np.ndarray, t: float) -> np.ndarray:
        rates = self.spec.model.rates_at(t)
        if self.mixed:
            ex = (v @ self._expect).real
        else:
            ex = np.einsum("bi,kij,bj->bk", v.conj(), self.ldl, v).real
        return np.clip(ex, 0.0, None) * rates

    def jump(self, v: np.ndarray, k: int) -> np.ndarray:
        out = (self._jump_super[k] if self.mixed else self.lindblads[k]) @ v
        n = self.norms(out[None])[0]
        if n < NULL_NORM ** 2:
            raise LinAlgError("jump maps the state to the null vector")
        return out / (n if self.mixed else np.sqrt(n))

    def to_density(self, v: np.ndarray) -> np.ndarray:
        n = self.norms(v)
        if self.mixed:
            return v.reshape(-1, self.d, self.d) / n[:, None, None]
        return v[:, :, None] * v.conj()[:, None, :] / n[:, None, None]


@dataclass
class ChunkOutput:
    plain: EnsembleSums
    weighted: EnsembleSums | None
    records: list[TrajectoryRecord] | None
    observables: np.ndarray | None


def _run_chunk(start: int, stop: int, spec: EngineSpec, seeds=None) -> ChunkOutput:
    prop = _Propagation(spec)
    b = stop - start
    out_times = spec.out_times
    n_out = len(out_times)
    d = spec.model.dim
    if seeds is None:
        seeds = [trajectory_seed(spec.master_seed, i) for i in range(start, stop)]
    rngs = [trajectory_rng(s) for s in seeds]
    v0 = spec.initial.reshape(-1)
    v = np.tile(v0 / np.sqrt(prop.norms(v0[None])[0]), (b, 1))
    thresholds = np.array([g.random() for g in rngs])
    factors = np.ones(b)
    weighting = spec.weighting
    log_drift = weighting.log_drift(out_times) if weighting is not None else None
    events: list[list[JumpEvent]] = [[] for _ in range(b)]
    plain = EnsembleSums(n_out, d)
    plain.n = b
    weighted = None
    if weighting is not None:
        weighted = EnsembleSums(n_out, d)
        weighted.n = b
    states = np.empty((b, n_out) + spec.initial.shape, dtype=complex) if spec.keep_states else None
    obs = None

    def record(i: int) -> None:
        nonlocal obs
        rho = prop.to_density(v)
        plain.add(i, rho)
        if weighted is not None:
            weighted.add(i, rho, np.exp(log_drift[i]) * factors)
        if states is not None:
            states[:, i] = rho if spec.mixed else v / np.sqrt(prop.norms(v))[:, None]
        if spec.observable is not None:
            vals = np.atleast_2d(np.asarray(spec.observable(i, rho), dtype=float).T).T
            if obs is None:
                obs = np.empty((b, n_out, vals.shape[1]))
            obs[:, i] = vals

    record(0)
    s = spec.stride
    for i in range(n_out - 1):
        v_end = v @ prop.stride(i).T
        crossing = prop.norms(v_end) < thresholds
        idx = np.flatnonzero(crossing)
        if idx.size:
            w = v[idx]
            for n in range(i * s, (i + 1) * s):
                w_next = w @ prop.step(n).T
                jumped = np.flatnonzero(prop.norms(w_next) < thresholds[idx])
                if jumped.size:
                    t = float(spec.t_grid[n]) + 0.5 * spec.dt
                    mid = w[jumped] @ prop.half(n).T
                    cw = prop.channel_weights(mid, t)
                    for row, j in enumerate(jumped):
                        traj = int(idx[j])
                        g = rngs[traj]
                        weights, state, at_end = cw[row], mid[row], False
                        if weights.sum() <= 0:
                            # the midpoint sits in every kernel; the decay happened later in the step
                            state, at_end = w_next[j], True
                            weights = prop.channel_weights(state[None], t + 0.5 * spec.dt)[0]
                        total = weights.sum()
                        if total <= 0:
                            raise LinAlgError(f"survival dropped with no active channel at t={t:g}")
                        k = int(np.searchsorted(np.cumsum(weights), g.random() * total, side="right"))
                        k = min(k, len(weights) - 1)
                        after = prop.jump(state, k)
                        w_next[j] = after if at_end else prop.half(n) @ after
                        thresholds[traj] = g.random()
                        if weighting is not None:
                            factors[traj] *= weighting.factor(k, t)
                        if spec.keep_events:
                            events[traj].append(JumpEvent(t, k))
                w = w_next
            v_end[idx] = w
        v = v_end
        # keep the unnormalised state away from underflow
        small = prop.norms(v) < 1e-150
        if np.any(small):
            scale = prop.norms(v[small])
            v[small] /= np.sqrt(scale)[:, None] if not spec.mixed else scale[:, None]
            thresholds[small] /= scale
        record(i + 1)

    records = None
    if spec.keep_events or spec.keep_states:
        records = [TrajectoryRecord(seeds[j], events[j], None if states is None else states[j], start + j)
                   for j in range(b)]
    return ChunkOutput(plain, weighted, records, obs)


@dataclass
class EnsembleRun:
    times: np.ndarray
    plain: EnsembleResult
    weighted: EnsembleResult | None
    records: list[TrajectoryRecord] | None
    observables: np.ndarray | None

    @property
    def result(self) -> EnsembleResult:
        return self.weighted if self.weighted is not None else self.plain


def run_ensemble(spec: EngineSpec, n_trajectories: int, *, workers: int = 1,
                 chunk_size: int = DEFAULT_CHUNK) -> EnsembleRun:
    """Simulate ``n_trajectories`` trajectories; the result is independent of ``workers``."""
    parts = map_chunks(_run_chunk, chunk_bounds(n_trajectories, chunk_size), workers, (spec,))
    times = spec.out_times
    plain = merge_sums(p.plain for p in parts).result(times)
    weighted = None
    if spec.weighting is not None:
        weighted = merge_sums(p.weighted for p in parts).result(times)
    records = None
    if parts[0].records is not None:
        records = [r for p in parts for r in p.records]
    obs = None
    if parts[0].observables is not None:
        obs = np.concatenate([p.observables for p in parts])
    return EnsembleRun(times, plain, weighted, records, obs)


def sample_trajectory(model: NoiseModel, psi0, t_grid, seed: int, *,
                      method: str = "exact") -> TrajectoryRecord:
    """One pure-state trajectory, fully determined by ``seed``.

    ``method="exact"`` uses the engine (exact no-jump propagation);
    ``method="first_order"`` uses ``drift_step`` with a fresh uniform per step.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if method == "first_order":
        return _first_order_trajectory(model, psi0, t_grid, seed)
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")
    spec = EngineSpec(model, psi0, t_grid, 0, keep_states=True)
    rec = _run_chunk(0, 1, spec, seeds=[int(seed)]).records[0]
    return rec


def ensemble_average(records: Sequence[TrajectoryRecord], weights=None, times=None) -> EnsembleResult:
    """Mean of ``w psi psi^H`` (or ``w sigma``) over records that store states.

    ``weights`` is ``None`` or an array ``(n_records, n_times)``.
    """
    if not records:
        raise ValueError("empty ensemble")
    first = records[0].states
    if first is None:
        raise ValueError("records do not carry states")
    n_times = first.shape[0]
    pure = first.ndim == 2
    d = first.shape[1]
    sums = EnsembleSums(n_times, d)
    sums.n = len(records)
    stack = np.array([r.states for r in records])
    w = None if weights is None else np.asarray(weights, dtype=float)
    for i in range(n_times):
        wi = None if w is None else w[:, i]
        if pure:
            sums.add_pure(i, stack[:, i], wi)
        else:
            sums.add(i, stack[:, i], wi)
    return sums.result(np.arange(n_times, dtype=float) if times is None else times)


def write_events(path, records: Sequence[TrajectoryRecord]) -> None:
    """One line per event: ``trajectory_index,t_j,channel_index``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory_index", "t_j", "channel_index"])
        for rec in records:
            for e in rec.events:
                w.writerow([rec.index, repr(float(e.time)), e.channel_index])


def read_events(path) -> dict[int, list[JumpEvent]]:
    out: dict[int, list[JumpEvent]] = {}
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows[0] != ["trajectory_index", "t_j", "channel_index"]:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    for i, t, k in rows[1:]:
        out.setdefault(int(i), []).append(JumpEvent(float(t), int(k)))
    return out
