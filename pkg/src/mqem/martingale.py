"""Influence-martingale weights.

Trajectories sampled with engineered rates ``gamma_k`` are reweighted by

    mu(t) = exp(c * int_0^t m) * prod_j ( -Gamma_{k_j}(t_j) / gamma_{k_j}(t_j) )

so that ``E[mu sigma]`` solves the master equation with rates ``-Gamma_k``.
Pairing requires ``gamma_k + Gamma_k = m`` for every channel. The constant
``c`` comes from the completeness relation ``sum_k L_k^H L_k = c I``; when the
channels do not satisfy it a padding channel ``P`` with ``Gamma_P = 0`` is
added, and any trajectory that jumps through ``P`` gets weight zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .complexla import sqrtm_psd
from .ensemble import EnsembleResult
from .jumps import JumpEvent, TrajectoryRecord, ensemble_average
from .models import Channel, RateFunction, as_rate, engineered_rates

COMPLETENESS_TOL = 1e-10


class InvalidPlanError(ValueError):
    pass


@dataclass(frozen=True)
class MartingalePlan:
    """Pairing of engineered rates with target rates ``-Gamma_k``."""

    m: RateFunction
    noise_rates: tuple[RateFunction, ...]
    engineered: tuple[RateFunction, ...]
    completeness: float = 1.0

    def __post_init__(self):
        if len(self.noise_rates) != len(self.engineered):
            raise InvalidPlanError("noise and engineered rate lists differ in length")

    def check(self, times) -> None:
        """Verify ``gamma_k + Gamma_k = m`` and ``gamma_k >= 0`` on ``times``."""
        times = np.asarray(times, dtype=float)
        m = np.asarray(self.m(times), dtype=float)
        for k, (g, e) in enumerate(zip(self.noise_rates, self.engineered)):
            ev = np.broadcast_to(e(times), times.shape)
            if np.max(np.abs(np.asarray(g(times)) + ev - m)) > 1e-10:
                raise InvalidPlanError(f"channel {k}: gamma + Gamma != m")
            if np.min(ev) < 0:
                raise InvalidPlanError(f"channel {k}: engineered rate is negative")

    def factor(self, k: int, t: float) -> float:
        g = float(self.engineered[k](t))
        if g == 0.0:
            raise InvalidPlanError(f"jump through channel {k} at t={t:g} where its engineered rate is zero")
        return -float(self.noise_rates[k](t)) / g

    def log_drift(self, times) -> np.ndarray:
        return self.completeness * self.m.integral(np.asarray(times, dtype=float))


def default_m(noise_rates: Sequence[RateFunction]) -> RateFunction:
    """``m = 2 max_k(Gamma_k, 0)`` on the union of the rate knots."""
    rates = [as_rate(g) for g in noise_rates]
    if all(r.is_constant for r in rates):
        return RateFunction.const(2.0 * max(max(r.constant for r in rates), 0.0))
    knots = np.unique(np.concatenate([r.knots() for r in rates if not r.is_constant]))
    lo = max(r.domain[0] for r in rates if not r.is_constant)
    hi = min(r.domain[1] for r in rates if not r.is_constant)
    knots = knots[(knots >= lo) & (knots <= hi)]
    # refine so that the pointwise max of linear pieces is captured closely
    fine = np.unique(np.concatenate([knots, np.linspace(lo, hi, 8 * len(knots))]))
    vals = np.max([np.broadcast_to(r(fine), fine.shape) for r in rates], axis=0)
    return RateFunction.table(fine, 2.0 * np.clip(vals, 0.0, None))


def completeness_constant(lindblads: Sequence[np.ndarray]) -> tuple[float, np.ndarray]:
    """Largest eigenvalue ``c`` of ``sum L^H L`` and the remainder ``c I - sum L^H L``."""
    s = sum(np.asarray(l).conj().T @ np.asarray(l) for l in lindblads)
    s = 0.5 * (s + s.conj().T)
    c = float(np.linalg.eigvalsh(s).max())
    return c, c * np.eye(s.shape[0]) - s


def padding_operator(lindblads: Sequence[np.ndarray]) -> tuple[float, np.ndarray | None]:
    """Completion ``P`` with ``sum L^H L + P^H P = c I``; ``None`` if already complete."""
    c, rest = completeness_constant(lindblads)
    if np.max(np.abs(rest)) <= COMPLETENESS_TOL * max(c, 1.0):
        return c, None
    return c, sqrtm_psd(rest, clip=-1e-9)


@dataclass(frozen=True)
class PairedChannels:
    """Engineered channels to sample with, and the plan that reweights them."""

    channels: tuple[Channel, ...]
    plan: MartingalePlan
    padded: bool


def make_plan(channels: Sequence[Channel], m=None, *, check_times=None, pad: bool = True) -> PairedChannels:
    """Pair ``channels`` (whose rates are ``Gamma_k``) with engineered channels.

    The engineered channels share the Lindblad operators and carry rates
    ``m - Gamma_k``. A padding channel is appended if the operators are not
    complete.
    """
    noise = [as_rate(c.rate) for c in channels]
    m = default_m(noise) if m is None else as_rate(m)
    lindblads = [np.asarray(c.lindblad, dtype=complex) for c in channels]
    c, p = padding_operator(lindblads)
    if p is not None and not pad:
        raise InvalidPlanError("Lindblad operators are not complete and padding is disabled")
    if p is not None:
        noise = noise + [RateFunction.const(0.0)]
        lindblads = lindblads + [p]
    gammas = engineered_rates(noise, m, check_times)
    labels = [ch.label for ch in channels] + (["pad"] if p is not None else [])
    eng = tuple(Channel(l, g, lab) for l, g, lab in zip(lindblads, gammas, labels))
    return PairedChannels(eng, MartingalePlan(m, tuple(noise), tuple(gammas), c), p is not None)


def weight_of_trajectory(plan: MartingalePlan, record: TrajectoryRecord | Sequence[JumpEvent],
                         t_grid) -> np.ndarray:
    """``mu`` on ``t_grid`` for one event list; a jump at ``t_j`` counts for ``t >= t_j``.

    The engine records jumps at step midpoints, so only shifted events
    clamped onto a grid time ever coincide with one.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    events = record.events if isinstance(record, TrajectoryRecord) else record
    mu = np.exp(plan.log_drift(t_grid))
    if not events:
        return mu
    times = np.array([e.time for e in events])
    fac = np.array([plan.factor(e.channel_index, e.time) for e in events])
    # number of events up to each grid time (with a tolerance for grid round-off)
    counts = np.searchsorted(np.sort(times), t_grid + 1e-12, side="right")
    order = np.argsort(times, kind="stable")
    cum = np.concatenate([[1.0], np.cumprod(fac[order])])
    return mu * cum[counts]


def weights_matrix(plan: MartingalePlan, records, t_grid) -> np.ndarray:
    return np.array([weight_of_trajectory(plan, r, t_grid) for r in records])


def mitigated_average(plan: MartingalePlan, records, t_grid) -> EnsembleResult:
    """``E[mu sigma]`` from records that carry states on ``t_grid``."""
    return ensemble_average(records, weights_matrix(plan, records, t_grid), times=t_grid)


def cost_estimate(weights) -> np.ndarray:
    """Empirical ``E|mu(t)|`` from an array ``(n_trajectories, n_times)``."""
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    if w.shape[0] == 0:
        raise ValueError("empty ensemble")
    return np.abs(w).mean(axis=0)


@dataclass
class CostBounds:
    times: np.ndarray
    corrected: np.ndarray
    min_noise: np.ndarray
    min_target: np.ndarray
    unit_norm: np.ndarray


def _cumulative(times, values) -> np.ndarray:
    out = np.zeros_like(values, dtype=float)
    out[1:] = np.cumsum(0.5 * (values[1:] + values[:-1]) * np.diff(times))
    return out


def cost_bound(plan: MartingalePlan, lindblads: Sequence[np.ndarray], t_grid) -> CostBounds:
    """Upper bounds on ``E|mu(t)|``.

    ``corrected`` follows from the trace of ``E[|mu| sigma]``: its growth rate
    is at most ``c m - lambda_min(sum_k (m - 2 max(Gamma_k, 0)) L_k^H L_k)``.
    The other three entries evaluate the closed forms as they are
    commonly quoted, for comparison; they are not guaranteed to bound the
    cost. ``min_noise`` is written in terms of the noise rates
    ``Gamma_k``; the other two are written in terms of the target rates
    ``-Gamma_k`` of the mitigated generator.
    """
    t = np.asarray(t_grid, dtype=float)
    ldl = [np.asarray(l).conj().T @ np.asarray(l) for l in lindblads]
    if len(ldl) != len(plan.noise_rates):
        raise ValueError("one Lindblad operator per plan channel is required")
    gam = np.array([np.broadcast_to(g(t), t.shape) for g in plan.noise_rates])
    m = np.broadcast_to(plan.m(t), t.shape)
    rate = np.empty_like(t)
    for i in range(len(t)):
        s = sum((m[i] - 2 * max(gam[k, i], 0.0)) * a for k, a in enumerate(ldl))
        lam = float(np.linalg.eigvalsh(0.5 * (s + s.conj().T)).min())
        rate[i] = plan.completeness * m[i] - lam
    corrected = np.exp(_cumulative(t, rate))

    x = np.min(-gam, axis=0)
    min_noise = np.exp(_cumulative(t, x - np.abs(x)))
    target = -gam
    y = np.minimum(np.min(target, axis=0), 0.0)
    min_target = np.exp(_cumulative(t, (1 - np.sign(y)) * np.abs(y)))
    unit_norm = np.exp(_cumulative(t, np.sum((1 - np.sign(target)) * np.abs(target), axis=0)))
    return CostBounds(t, corrected, min_noise, min_target, unit_norm)
