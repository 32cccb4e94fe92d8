"""Hamiltonians, Lindblad channel sets and time-dependent rate functions."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .complexla import (
    IDENTITY_2,
    SIGMA_MINUS,
    SIGMA_PLUS,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    is_hermitian,
    kron_all,
)

# Sites of the 2x2 plaquette in row-major order:  1 2
#                                                 3 4
HEISENBERG_BONDS = ((0, 1), (0, 2), (1, 3), (2, 3))


class RateError(ValueError):
    pass


class NegativeRateError(RateError):
    def __init__(self, channel: int, time: float, value: float):
        super().__init__(f"engineered rate of channel {channel} is negative ({value:.3e}) at t={time:g}")
        self.channel = channel
        self.time = time
        self.value = value


@dataclass(frozen=True)
class RateFunction:
    """A rate in units of 1/time, either constant or tabulated.

    Tabulated rates interpolate linearly and refuse to extrapolate.
    """

    constant: float | None = None
    times: tuple[float, ...] = ()
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.constant is None:
            if len(self.times) < 2 or len(self.times) != len(self.values):
                raise RateError("tabulated rate needs at least two (time, value) pairs")
            if np.any(np.diff(self.times) <= 0):
                raise RateError("tabulated rate times must be strictly increasing")
        elif self.times:
            raise RateError("a rate is either constant or tabulated, not both")

    @classmethod
    def const(cls, value: float) -> "RateFunction":
        return cls(constant=float(value))

    @classmethod
    def table(cls, times, values) -> "RateFunction":
        return cls(times=tuple(float(t) for t in times), values=tuple(float(v) for v in values))

    @property
    def is_constant(self) -> bool:
        return self.constant is not None

    @property
    def domain(self) -> tuple[float, float]:
        if self.is_constant:
            return (-np.inf, np.inf)
        return (self.times[0], self.times[-1])

    def __call__(self, t):
        if self.is_constant:
            return self.constant if np.ndim(t) == 0 else np.full(np.shape(t), self.constant)
        tt = np.asarray(t, dtype=float)
        lo, hi = self.times[0], self.times[-1]
        span = hi - lo
        slack = 1e-12 * max(1.0, abs(span))
        if np.any(tt < lo - slack) or np.any(tt > hi + slack):
            bad = tt[(tt < lo - slack) | (tt > hi + slack)].ravel()[0]
            raise RateError(f"rate evaluated at t={bad:g}, outside its table [{lo:g}, {hi:g}]")
        out = np.interp(tt, self.times, self.values)
        return float(out) if np.ndim(t) == 0 else out

    def knots(self) -> np.ndarray:
        return np.asarray(self.times)

    def _combine(self, other: "RateFunction", op) -> "RateFunction":
        if self.is_constant and other.is_constant:
            return RateFunction.const(op(self.constant, other.constant))
        lo = max(self.domain[0], other.domain[0])
        hi = min(self.domain[1], other.domain[1])
        if not lo < hi:
            raise RateError("tabulated rates have disjoint domains")
        grid = np.union1d(self.knots(), other.knots())
        grid = grid[(grid >= lo) & (grid <= hi)]
        return RateFunction.table(grid, op(self(grid), other(grid)))

    def __add__(self, other):
        other = other if isinstance(other, RateFunction) else RateFunction.const(other)
        return self._combine(other, np.add)

    def __sub__(self, other):
        other = other if isinstance(other, RateFunction) else RateFunction.const(other)
        return self._combine(other, np.subtract)

    def __neg__(self):
        return self.scaled(-1.0)

    def scaled(self, factor: float) -> "RateFunction":
        if self.is_constant:
            return RateFunction.const(factor * self.constant)
        return RateFunction.table(self.times, np.asarray(self.values) * factor)

    def integral(self, t_grid) -> np.ndarray:
        """Cumulative trapezoid integral from ``t_grid[0]`` along ``t_grid``."""
        t_grid = np.asarray(t_grid, dtype=float)
        if self.is_constant:
            return self.constant * (t_grid - t_grid[0])
        v = self(t_grid)
        out = np.zeros_like(t_grid)
        out[1:] = np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(t_grid))
        return out


def as_rate(value) -> RateFunction:
    return value if isinstance(value, RateFunction) else RateFunction.const(value)


def read_rate_table(path) -> RateFunction:
    """Load a ``time,value`` table with a header line."""
    times, values = [], []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    header, body = rows[0], rows[1:]
    if [h.strip() for h in header] != ["time", "value"]:
        raise RateError(f"{path}: expected header 'time,value', got {','.join(header)!r}")
    for row in body:
        times.append(float(row[0]))
        values.append(float(row[1]))
    return RateFunction.table(times, values)


def write_rate_table(path, rate: RateFunction, comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["time", "value"])
        for t, v in zip(rate.times, rate.values):
            w.writerow([repr(float(t)), repr(float(v))])


@dataclass(frozen=True)
class Channel:
    lindblad: np.ndarray
    rate: RateFunction
    label: str = ""

    def with_rate(self, rate: RateFunction) -> "Channel":
        return Channel(self.lindblad, rate, self.label)

    def with_lindblad(self, lindblad: np.ndarray) -> "Channel":
        return Channel(np.asarray(lindblad, dtype=complex), self.rate, self.label)


@dataclass(frozen=True)
class NoiseModel:
    """Hamiltonian plus Lindblad channels.

    ``hamiltonian`` is either one matrix or a tuple of ``(t_start, H)`` pieces;
    a piece holds from its start time until the next one begins.
    """

    dim: int
    hamiltonian: np.ndarray | tuple = field(repr=False)
    channels: tuple[Channel, ...] = ()

    def __post_init__(self):
        pieces = self.hamiltonian if isinstance(self.hamiltonian, tuple) else ((None, self.hamiltonian),)
        for _, h in pieces:
            h = np.asarray(h)
            if h.shape != (self.dim, self.dim):
                raise ValueError(f"Hamiltonian has shape {h.shape}, model dimension is {self.dim}")
            if not is_hermitian(h):
                raise ValueError("Hamiltonian is not Hermitian to 1e-12")
        for ch in self.channels:
            if np.shape(ch.lindblad) != (self.dim, self.dim):
                raise ValueError(f"channel {ch.label!r} has shape {np.shape(ch.lindblad)}")

    @property
    def time_dependent_hamiltonian(self) -> bool:
        return isinstance(self.hamiltonian, tuple)

    @property
    def time_independent(self) -> bool:
        return not self.time_dependent_hamiltonian and all(c.rate.is_constant for c in self.channels)

    def hamiltonian_piece(self, t: float) -> int:
        if not self.time_dependent_hamiltonian:
            return 0
        starts = [p[0] for p in self.hamiltonian]
        return max(int(np.searchsorted(starts, t + 1e-12, side="right")) - 1, 0)

    def hamiltonian_at(self, t: float) -> np.ndarray:
        if not self.time_dependent_hamiltonian:
            return np.asarray(self.hamiltonian, dtype=complex)
        return np.asarray(self.hamiltonian[self.hamiltonian_piece(t)][1], dtype=complex)

    def rates_at(self, t: float) -> np.ndarray:
        return np.array([c.rate(t) for c in self.channels], dtype=float)

    @property
    def lindblads(self) -> list[np.ndarray]:
        return [np.asarray(c.lindblad, dtype=complex) for c in self.channels]

    def with_channels(self, channels: Sequence[Channel]) -> "NoiseModel":
        return NoiseModel(self.dim, self.hamiltonian, tuple(channels))

    def without_channels(self) -> "NoiseModel":
        return NoiseModel(self.dim, self.hamiltonian, ())


def site_operator(op: np.ndarray, site: int, n_sites: int) -> np.ndarray:
    ops = [IDENTITY_2] * n_sites
    ops[site] = op
    return kron_all(*ops)


def build_heisenberg_2x2(J: float, gamma: float, h: float) -> np.ndarray:
    """Anisotropic Heisenberg Hamiltonian on the open 2x2 plaquette (16x16)."""
    n = 4
    sx = [site_operator(SIGMA_X, i, n) for i in range(n)]
    sy = [site_operator(SIGMA_Y, i, n) for i in range(n)]
    sz = [site_operator(SIGMA_Z, i, n) for i in range(n)]
    H = np.zeros((16, 16), dtype=complex)
    for i, j in HEISENBERG_BONDS:
        H += J * ((1 + gamma) * sx[i] @ sx[j] + (1 - gamma) * sy[i] @ sy[j] + sz[i] @ sz[j])
    H -= gamma * h * sum(sy)
    return 0.5 * (H + H.conj().T)


def build_local_noise(gamma_R, gamma_D, n_sites: int = 4) -> list[Channel]:
    """Local relaxation (sigma_-) and dephasing (sigma_z) on every site."""
    gamma_R, gamma_D = as_rate(gamma_R), as_rate(gamma_D)
    channels = [Channel(site_operator(SIGMA_MINUS, i, n_sites), gamma_R, f"relax{i + 1}")
                for i in range(n_sites)]
    channels += [Channel(site_operator(SIGMA_Z, i, n_sites), gamma_D, f"dephase{i + 1}")
                 for i in range(n_sites)]
    return channels


def channel_sites(n_sites: int = 4) -> list[int]:
    """Site index of each channel returned by :func:`build_local_noise`."""
    return list(range(n_sites)) * 2


def engineered_rates(noise_rates: Sequence[RateFunction], m: RateFunction,
                     check_times=None) -> list[RateFunction]:
    """Engineered rates ``gamma_k = m - Gamma_k``; all must be non-negative.

    Non-negativity is checked on the table knots and on ``check_times``.
    """
    m = as_rate(m)
    out = []
    for k, g in enumerate(noise_rates):
        g = as_rate(g)
        e = m - g
        probe = [] if e.is_constant else list(e.times)
        if check_times is not None:
            probe += list(np.asarray(check_times, dtype=float))
        if e.is_constant:
            if e.constant < 0:
                raise NegativeRateError(k, float(probe[0]) if probe else 0.0, e.constant)
        else:
            vals = e(np.asarray(probe))
            if np.any(vals < 0):
                i = int(np.argmin(vals))
                raise NegativeRateError(k, float(probe[i]), float(vals[i]))
        out.append(e)
    return out


def heisenberg_model(J: float = 1.0, gamma: float = 0.5, h: float = 1.0,
                     gamma_R=0.001, gamma_D=0.001) -> NoiseModel:
    """Heisenberg plaquette with local relaxation and dephasing noise."""
    return NoiseModel(16, build_heisenberg_2x2(J, gamma, h), tuple(build_local_noise(gamma_R, gamma_D)))


def all_up_state(n_sites: int = 4) -> np.ndarray:
    """|1...1>, every spin in the sigma_z = +1 state."""
    psi = np.zeros(2 ** n_sites, dtype=complex)
    psi[-1] = 1.0
    return psi


def build_bandgap_two_level(shift: RateFunction, decay: RateFunction) -> NoiseModel:
    """Two-level atom with a time-dependent level shift and decay rate.

    The generator is ``i S(t)/2 [s+ s-, rho] + Gamma(t) D[s-] rho``. The
    Hamiltonian is piecewise constant on the knots of ``shift``; ``decay``
    may change sign.
    """
    n_op = SIGMA_PLUS @ SIGMA_MINUS
    if shift.is_constant:
        ham = -0.5 * shift.constant * n_op
    else:
        ham = tuple((t, -0.5 * s * n_op) for t, s in zip(shift.times, shift.values))
    return NoiseModel(2, ham, (Channel(SIGMA_MINUS.copy(), decay, "decay"),))


def sample_bandgap_rates(t_end: float = 10.0, n: int = 401) -> tuple[RateFunction, RateFunction]:
    """Non-physical decaying oscillatory profiles for exercising the machinery.

    These are NOT derived from any photonic-bandgap amplitude; they only
    reproduce the qualitative feature that the decay rate changes sign.
    """
    t = np.linspace(0.0, t_end, n)
    decay = 1.5 * np.exp(-0.3 * t) * np.cos(1.3 * t) + 0.2
    shift = 0.8 * np.exp(-0.3 * t) * np.sin(1.3 * t)
    return RateFunction.table(t, shift), RateFunction.table(t, decay)


def data_path(name: str) -> Path:
    return Path(__file__).with_name("data") / name
