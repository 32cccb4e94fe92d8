"""Error mitigation with a monitored engineered reservoir.

The physical system feels its Hamiltonian, an unmonitored noise bath with
rates ``Gamma_k`` and an engineered reservoir with rates ``gamma_k = m -
Gamma_k`` on the same Lindblad operators. Only the engineered jumps are
recorded. Conditional states are density matrices (the noise bath is not
observed), and reweighting them with the influence martingale cancels the
noise dissipator on average.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .complexla import fidelity
from .ensemble import DEFAULT_CHUNK
from .jumps import EngineSpec, EnsembleRun, JumpEvent, TrajectoryRecord, run_ensemble
from .martingale import PairedChannels, default_m, make_plan, weights_matrix
from .models import Channel, NoiseModel, RateFunction, as_rate, site_operator
from .propagate import integrate, unitary_states

INJECTION_KINDS = ("none", "lindblad", "rates", "jump_times")
# infidelities below this are integrator round-off, not noise
NOISE_FLOOR = 1e-8


@dataclass(frozen=True)
class ErrorInjection:
    """Experimenter error model; ``realization`` selects the random draw."""

    kind: str = "none"
    strength: float = 0.0
    realization: int = 0
    gamma_base: float = 0.001

    def __post_init__(self):
        if self.kind not in INJECTION_KINDS:
            raise ValueError(f"unknown error injection {self.kind!r}; expected one of {INJECTION_KINDS}")
        if self.strength < 0:
            raise ValueError("error strength must be non-negative")
        if self.kind == "jump_times" and self.gamma_base <= 0:
            raise ValueError("gamma_base must be positive")


@dataclass
class MitigationRun:
    model: NoiseModel
    initial: np.ndarray
    t_end: float = 50.0
    dt: float = 0.01
    output_dt: float = 0.5
    n_trajectories: int = 10_000
    master_seed: int = 0
    workers: int = 1
    chunk_size: int = DEFAULT_CHUNK
    m: RateFunction | None = None
    injection: ErrorInjection = field(default_factory=ErrorInjection)
    sites: Sequence[int] | None = None

    @property
    def n_steps(self) -> int:
        n = int(round(self.t_end / self.dt))
        if abs(n * self.dt - self.t_end) > 1e-9 * max(1.0, self.t_end):
            raise ValueError("dt must divide t_end")
        return n

    @property
    def stride(self) -> int:
        s = int(round(self.output_dt / self.dt))
        if s < 1 or abs(s * self.dt - self.output_dt) > 1e-9 or self.n_steps % s:
            raise ValueError("output_dt must be a multiple of dt that divides t_end")
        return s

    @property
    def t_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_steps + 1)

    @property
    def out_times(self) -> np.ndarray:
        return self.t_grid[:: self.stride]

    def error_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.master_seed + self.injection.realization)


@dataclass
class FidelityReport:
    times: np.ndarray
    f_noisy: np.ndarray
    f_both: np.ndarray
    f_mitigated: np.ndarray
    stderr: np.ndarray
    cost: np.ndarray
    improvement: float | None
    improvement_final: float | None
    n_trajectories: int
    records: list | None = None

    def rows(self):
        for row in zip(self.times, self.f_noisy, self.f_both, self.f_mitigated, self.stderr):
            yield tuple(float(x) for x in row)


# Error injection --------------------------------------------------------------

def inject_lindblad_errors(channels: Sequence[Channel], strength: float, rng: np.random.Generator,
                           sites: Sequence[int] | None = None, n_sites: int | None = None) -> list[Channel]:
    """``L_k + eta_k J_k`` with ``eta_k ~ U[0, E_L]`` and ``J_k`` uniform on ``L_k``'s site.

    Without site information ``J_k`` fills the whole matrix.
    """
    if strength < 0:
        raise ValueError("E_L must be non-negative")
    if strength == 0:
        return list(channels)
    out = []
    for k, ch in enumerate(channels):
        eta = rng.uniform(0.0, strength)
        d = ch.lindblad.shape[0]
        if sites is None:
            j = rng.uniform(0.0, 1.0, size=(d, d))
        else:
            n = n_sites if n_sites is not None else int(round(np.log2(d)))
            j = site_operator(rng.uniform(0.0, 1.0, size=(2, 2)).astype(complex), sites[k], n)
        out.append(ch.with_lindblad(ch.lindblad + eta * j))
    return out


def inject_rate_errors(rates: Sequence[RateFunction], strength: float, rng: np.random.Generator) -> list[RateFunction]:
    """``Gamma_k (1 + delta_k)`` with ``delta_k ~ U[0, E_R]`` drawn once per channel."""
    if strength < 0:
        raise ValueError("E_R must be non-negative")
    if strength == 0:
        return [as_rate(r) for r in rates]
    return [as_rate(r).scaled(1.0 + rng.uniform(0.0, strength)) for r in rates]


def inject_jump_time_errors(records: Sequence[TrajectoryRecord], strength: float, gamma_base: float,
                            rng: np.random.Generator, t_end: float) -> list[TrajectoryRecord]:
    """Shift each event by ``eps / gamma_base``, ``eps ~ U[-E_T/2, E_T/2]``, clamped to ``[0, t_end]``.

    States are left untouched; the shifted events only feed the weights.
    """
    if strength < 0 or gamma_base <= 0:
        raise ValueError("need E_T >= 0 and gamma_base > 0")
    if strength == 0:
        return list(records)
    out = []
    for rec in records:
        shifted = [JumpEvent(float(np.clip(e.time + rng.uniform(-strength / 2, strength / 2) / gamma_base,
                                           0.0, t_end)), e.channel_index) for e in rec.events]
        shifted.sort(key=lambda e: e.time)
        out.append(TrajectoryRecord(rec.seed, shifted, rec.states, rec.index))
    return out


# Pipeline ---------------------------------------------------------------------

def engineered_channels(run: MitigationRun) -> PairedChannels:
    """Engineered channels and plan as the (possibly mistaken) experimenter sets them up."""
    noise = list(run.model.channels)
    m = run.m if run.m is not None else default_m([c.rate for c in noise])
    inj = run.injection
    believed = noise
    if inj.kind == "lindblad":
        believed = inject_lindblad_errors(noise, inj.strength, run.error_rng(), run.sites)
    elif inj.kind == "rates":
        rates = inject_rate_errors([c.rate for c in noise], inj.strength, run.error_rng())
        believed = [c.with_rate(r) for c, r in zip(noise, rates)]
    return make_plan(believed, m, check_times=run.out_times)


@dataclass
class _Observable:
    refs: np.ndarray

    def __call__(self, i, rho):
        psi = self.refs[i]
        return np.einsum("i,bij,j->b", psi.conj(), rho, psi).real


def simulate_monitored_system(run: MitigationRun, paired: PairedChannels | None = None,
                              keep_overlaps: bool = False) -> EnsembleRun:
    """Density-matrix trajectories conditioned on the engineered jump record."""
    paired = engineered_channels(run) if paired is None else paired
    sampling_model = run.model.with_channels(paired.channels)
    observable = None
    if keep_overlaps:
        observable = _Observable(unitary_states(run.model.hamiltonian_at(0.0), run.initial, run.out_times))
    spec = EngineSpec(sampling_model, run.initial, run.t_grid, run.master_seed, stride=run.stride,
                      mixed=True, bath=tuple(run.model.channels), weighting=paired.plan,
                      keep_events=True, observable=observable)
    return run_ensemble(spec, run.n_trajectories, workers=run.workers, chunk_size=run.chunk_size)


@dataclass
class DenseReferences:
    times: np.ndarray
    pure: np.ndarray
    noisy: np.ndarray
    both: np.ndarray


def dense_references(run: MitigationRun, paired: PairedChannels | None = None, substeps: int = 1) -> DenseReferences:
    """Unitary kets, noisy states and noisy+engineered states on the output grid."""
    paired = engineered_channels(run) if paired is None else paired
    times = run.out_times
    if run.model.time_dependent_hamiltonian:
        raise NotImplementedError("dense references assume a constant Hamiltonian")
    pure = unitary_states(run.model.hamiltonian_at(0.0), run.initial, times)
    rho0 = np.outer(run.initial, np.conj(run.initial))
    fine = run.t_grid
    noisy = integrate(run.model, rho0, fine, substeps=substeps)[:: run.stride]
    both_model = run.model.with_channels(tuple(run.model.channels) + tuple(paired.channels))
    both = integrate(both_model, rho0, fine, substeps=substeps)[:: run.stride]
    return DenseReferences(times, pure, noisy, both)


def _pure_fidelities(kets: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Unsquared fidelity of each ket with a (possibly non-positive) matrix estimate."""
    overlaps = np.einsum("ti,tij,tj->t", kets.conj(), states, kets).real
    return np.sqrt(np.clip(overlaps, 0.0, None))


def improvement_metric(f_mitigated, f_noisy, skip_first: bool = True) -> tuple[float | None, float | None]:
    """Time average and final value of ``log10|1-F_E| - log10|1-F_noisy|``."""
    fm = np.asarray(f_mitigated, dtype=float)
    fn = np.asarray(f_noisy, dtype=float)
    sl = slice(1, None) if skip_first else slice(None)
    a, b = np.abs(1 - fm[sl]), np.abs(1 - fn[sl])
    ok = (a > 0) & (b > NOISE_FLOOR)
    if not np.any(ok):
        return None, None
    diff = np.log10(a[ok]) - np.log10(b[ok])
    final = float(np.log10(a[-1]) - np.log10(b[-1])) if ok[-1] else None
    return float(diff.mean()), final


def run_mitigation(run: MitigationRun, refs: DenseReferences | None = None) -> FidelityReport:
    paired = engineered_channels(run)
    if refs is None:
        refs = dense_references(replace(run, injection=ErrorInjection()))
    keep = run.injection.kind == "jump_times"
    ens = simulate_monitored_system(run, paired, keep_overlaps=True)
    f_noisy = np.array([fidelity(np.outer(k, k.conj()), r, strict=False) for k, r in zip(refs.pure, refs.noisy)])
    f_both = np.array([fidelity(np.outer(k, k.conj()), r, strict=False) for k, r in zip(refs.pure, refs.both)])
    if keep:
        inj = run.injection
        shifted = inject_jump_time_errors(ens.records, inj.strength, inj.gamma_base, run.error_rng(), run.t_end)
        weights = weights_matrix(paired.plan, shifted, ens.times)
    else:
        weights = weights_matrix(paired.plan, ens.records, ens.times)
    overlaps = ens.observables[:, :, 0]
    wo = weights * overlaps
    mean = wo.mean(axis=0)
    se = wo.std(axis=0, ddof=1) / np.sqrt(wo.shape[0]) if wo.shape[0] > 1 else np.zeros_like(mean)
    f_mit = np.sqrt(np.clip(mean, 0.0, None))
    stderr = se / np.maximum(2 * f_mit, 1e-12)
    improvement, final = improvement_metric(f_mit, f_noisy)
    return FidelityReport(ens.times, f_noisy, f_both, f_mit, stderr, np.abs(weights).mean(axis=0),
                          improvement, final, run.n_trajectories, ens.records)


@dataclass
class JumpTimeStudy:
    strengths: np.ndarray
    final_fidelity: np.ndarray
    final_stderr: np.ndarray
    improvement: np.ndarray
    final_noisy: float


def jump_time_study(run: MitigationRun, strengths: Sequence[float], realizations: int = 1,
                    refs: DenseReferences | None = None) -> JumpTimeStudy:
    """Final-time fidelity against the jump-time error ``E_T``.

    The monitored trajectories are simulated once; each strength and
    realization only reweights the recorded (shifted) events.
    """
    run = replace(run, injection=ErrorInjection())
    paired = engineered_channels(run)
    refs = dense_references(run, paired) if refs is None else refs
    ens = simulate_monitored_system(run, paired, keep_overlaps=True)
    f_noisy = _pure_fidelities(refs.pure, refs.noisy)
    overlaps = ens.observables[:, :, 0]
    fin, se, imp = [], [], []
    for e_t in strengths:
        per_fin, per_imp, per_var = [], [], []
        for r in range(realizations):
            rng = np.random.default_rng(run.master_seed + r)
            shifted = inject_jump_time_errors(ens.records, float(e_t), run.injection.gamma_base, rng, run.t_end)
            wo = weights_matrix(paired.plan, shifted, ens.times) * overlaps
            mean = wo.mean(axis=0)
            f = np.sqrt(np.clip(mean, 0.0, None))
            per_fin.append(f[-1])
            per_var.append((wo[:, -1].std(ddof=1) / np.sqrt(len(wo)) / max(2 * f[-1], 1e-12)) ** 2)
            per_imp.append(improvement_metric(f, f_noisy)[0])
        fin.append(np.mean(per_fin))
        se.append(np.sqrt(np.mean(per_var) / realizations))
        imp.append(np.mean(per_imp))
    return JumpTimeStudy(np.asarray(strengths, dtype=float), np.array(fin), np.array(se), np.array(imp),
                         float(f_noisy[-1]))
