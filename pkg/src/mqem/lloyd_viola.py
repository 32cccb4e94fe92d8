"""Jump trajectories from repeated ancilla-qubit interactions and measurements.

One time step ``dt`` of a dissipator with operator ``L = U X`` and rate
``gamma`` is realised by coupling the system to an ancilla prepared in |0>
through ``H = sqrt(gamma / (alpha t_C)) X (x) sigma_x`` for a time ``t_C``
(``alpha = t_C / dt``), measuring the ancilla, and applying ``U`` after
outcome 1. Branch probabilities are taken from the exact joint unitary.

Several channels are handled either probabilistically (one channel drawn per
step, with its rate multiplied by the number of channels) or by a cascade of
up to ``N`` consecutive two-outcome measurements.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .complexla import (
    SIGMA_X,
    LinAlgError,
    hermitian_function,
    partial_trace_last_qubit,
    polar_decompose,
    sqrtm_psd,
)
from .ensemble import DEFAULT_CHUNK, chunk_bounds, map_chunks, trajectory_rng, trajectory_seed
from .martingale import MartingalePlan, make_plan
from .mitigate import FidelityReport, improvement_metric
from .models import NoiseModel
from .propagate import Generator, integrate, unitary_states

MAX_GAMMA_DT = 0.05
PINV_CUTOFF = 1e-10
ANCILLA_0 = np.array([[1, 0], [0, 0]], dtype=complex)
ANCILLA_1 = np.array([[0, 0], [0, 1]], dtype=complex)


class LVError(ValueError):
    pass


@dataclass(frozen=True)
class LVStepConfig:
    """Simulated step ``dt`` and ancilla coupling time ``t_C``."""

    dt: float
    t_C: float | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise LVError("dt must be positive")
        if self.t_C is not None and self.t_C <= 0:
            raise LVError("t_C must be positive")

    @property
    def coupling_time(self) -> float:
        return self.dt if self.t_C is None else self.t_C

    @property
    def alpha(self) -> float:
        return self.coupling_time / self.dt

    def check_rate(self, gamma: float) -> None:
        if gamma < 0:
            raise LVError("the ancilla scheme needs a non-negative rate")
        if gamma * self.dt > MAX_GAMMA_DT:
            raise LVError(f"gamma*dt = {gamma * self.dt:.3f} exceeds {MAX_GAMMA_DT}; reduce dt")


@dataclass
class LVOutcome:
    bits: list[int]
    state: np.ndarray
    weight: float = 1.0
    channel: int | None = None
    probabilities: list[float] = field(default_factory=list)
    selected: int | None = None


def coupling_angle(gamma: float, alpha: float, t_C: float) -> float:
    """``sqrt(gamma / (alpha t_C)) t_C``, which equals ``sqrt(gamma dt)``."""
    return float(np.sqrt(gamma / (alpha * t_C)) * t_C)


def lv_unitary(X, gamma: float, alpha: float, t_C: float) -> np.ndarray:
    """``cos(theta X) (x) I - i sin(theta X) (x) sigma_x`` on system (x) ancilla."""
    X = np.asarray(X, dtype=complex)
    w = np.linalg.eigvalsh(0.5 * (X + X.conj().T))
    if w.min() < -1e-10:
        raise LinAlgError("coupling operator must be positive semidefinite")
    theta = coupling_angle(gamma, alpha, t_C)
    c = hermitian_function(X, lambda x: np.cos(theta * x))
    s = hermitian_function(X, lambda x: np.sin(theta * x))
    return np.kron(c, np.eye(2)) - 1j * np.kron(s, SIGMA_X)


def lv_hamiltonian(X, gamma: float, alpha: float, t_C: float) -> np.ndarray:
    return np.sqrt(gamma / (alpha * t_C)) * np.kron(np.asarray(X, dtype=complex), SIGMA_X)


def lv_weight_factor(bit: int, gamma: float, Gamma: float, m: float, dt: float,
                     completeness: float = 1.0) -> float:
    """Martingale factor for one ancilla outcome.

    Outcome 0 multiplies by ``1 + c m dt`` (``c`` from ``sum L^H L = c I``);
    outcome 1 by ``-Gamma / gamma``.
    """
    if bit == 0:
        return 1.0 + completeness * m * dt
    if gamma == 0:
        raise LVError("outcome 1 on a channel with zero engineered rate")
    return -Gamma / gamma


def single_branches(rho_S, L, gamma: float, cfg: LVStepConfig, polar=None):
    """Exact outcome probabilities and post-measurement states of one step.

    Returns ``[(p0, rho0), (p1, rho1)]`` with ``rho1`` already rotated by ``U``.
    """
    cfg.check_rate(gamma)
    rho_S = np.asarray(rho_S, dtype=complex)
    U, X = polar_decompose(L) if polar is None else polar
    uni = lv_unitary(X, gamma, cfg.alpha, cfg.coupling_time)
    joint = uni @ np.kron(rho_S, ANCILLA_0) @ uni.conj().T
    eye = np.eye(rho_S.shape[0])
    out = []
    for bit, proj in ((0, ANCILLA_0), (1, ANCILLA_1)):
        p_op = np.kron(eye, proj)
        post = partial_trace_last_qubit(p_op @ joint @ p_op)
        p = float(np.trace(post).real)
        if p < -1e-12:
            raise LVError(f"negative branch probability {p:.3e}")
        p = max(p, 0.0)
        if bit == 1:
            post = U @ post @ U.conj().T
        out.append((p, post / p if p > 0 else post))
    return out


def lv_step_single(rho_S, L, gamma: float, cfg: LVStepConfig, rng: np.random.Generator, *,
                   Gamma: float | None = None, m: float = 0.0, completeness: float = 1.0,
                   polar=None) -> LVOutcome:
    """One ancilla interaction and measurement.

    With ``Gamma`` given the outcome also carries the martingale factor.
    """
    (p0, rho0), (p1, rho1) = single_branches(rho_S, L, gamma, cfg, polar)
    bit = int(rng.random() < p1)
    weight = 1.0
    if Gamma is not None:
        weight = lv_weight_factor(bit, gamma, Gamma, m, cfg.dt, completeness)
    return LVOutcome([bit], rho1 if bit else rho0, weight, 0 if bit else None, [p0, p1])


def lv_probabilistic_step(rho_S, channels: Sequence[tuple[np.ndarray, float]], cfg: LVStepConfig,
                          rng: np.random.Generator, *, plan: MartingalePlan | None = None,
                          t: float = 0.0) -> LVOutcome:
    """Draw one of ``N`` channels uniformly and run it with rate ``N gamma_k``."""
    n = len(channels)
    if n == 0:
        raise LVError("no channels")
    k = int(rng.integers(n))
    L, gamma = channels[k]
    (p0, rho0), (p1, rho1) = single_branches(rho_S, L, n * gamma, cfg)
    bit = int(rng.random() < p1)
    weight = 1.0
    if plan is not None:
        weight = lv_weight_factor(bit, float(plan.engineered[k](t)), float(plan.noise_rates[k](t)),
                                  float(plan.m(t)), cfg.dt, plan.completeness)
    return LVOutcome([bit], rho1 if bit else rho0, weight, k if bit else None, [p0, p1], k)


def probabilistic_average_map(rho_S, channels, cfg: LVStepConfig) -> np.ndarray:
    """Exact expectation of the probabilistic step over channel draws and outcomes."""
    n = len(channels)
    out = np.zeros_like(np.asarray(rho_S, dtype=complex))
    for L, gamma in channels:
        for p, post in single_branches(rho_S, L, n * gamma, cfg):
            out += p * post / n
    return out


# Prop. 1 split and coupling extraction ---------------------------------------

def _support_basis(support) -> np.ndarray | None:
    if support is None:
        return None
    w, v = np.linalg.eigh(0.5 * (support + support.conj().T))
    return v[:, w > 0.5]


def cos_sin_split(M1, M2, support=None, tol: float = 1e-8) -> np.ndarray:
    """Hermitian ``X >= 0`` with ``cos X = M1`` and ``sin X = M2``.

    ``M1`` and ``M2`` must be positive with ``M1^2 + M2^2`` equal to the
    identity, or to the projector ``support``; in the latter case ``X`` acts
    as zero off the support.
    """
    M1 = np.asarray(M1, dtype=complex)
    M2 = np.asarray(M2, dtype=complex)
    a, b = M1 @ M1, M2 @ M2
    comm = a @ b - b @ a
    if np.max(np.abs(comm)) > tol:
        raise LVError(f"[M1^2, M2^2] = {np.max(np.abs(comm)):.2e}: operators are not simultaneously diagonalisable")
    d = M1.shape[0]
    basis = _support_basis(support)
    if basis is None:
        basis = np.eye(d, dtype=complex)
    m1 = basis.conj().T @ M1 @ basis
    m2 = basis.conj().T @ M2 @ basis
    if np.max(np.abs(m1 @ m1 + m2 @ m2 - np.eye(basis.shape[1]))) > tol:
        raise LVError("M1^2 + M2^2 is not the identity on the declared support")
    w, v = np.linalg.eigh(0.5 * (m1 + m1.conj().T))
    x_sub = (v * np.arccos(np.clip(w, -1.0, 1.0))) @ v.conj().T
    s = hermitian_function(x_sub, np.sin, tol=1e-8)
    if np.max(np.abs(s - m2)) > tol:
        raise LVError("sin(X) does not reproduce M2")
    X = basis @ x_sub @ basis.conj().T
    return 0.5 * (X + X.conj().T)


@dataclass(frozen=True)
class Coupling:
    X: np.ndarray
    delta_tC: float

    @property
    def interacts(self) -> bool:
        return self.delta_tC > 0


def extract_coupling(G0) -> Coupling:
    """Coupling operator ``X`` (unit trace) and strength ``delta t_C`` with ``cos(delta t_C X) = |G0|``."""
    G0 = np.asarray(G0, dtype=complex)
    absg = sqrtm_psd(G0.conj().T @ G0)
    w, v = np.linalg.eigh(absg)
    if w.max() > 1 + 1e-10:
        raise LVError(f"|G0| has eigenvalue {w.max():.6f} > 1")
    angles = np.arccos(np.clip(w, 0.0, 1.0))
    total = float(angles.sum())
    if total <= 1e-14:
        return Coupling(np.zeros_like(G0), 0.0)
    X = (v * (angles / total)) @ v.conj().T
    return Coupling(0.5 * (X + X.conj().T), total)


# Cascade ----------------------------------------------------------------------

def _pinv_psd(b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-inverse on the support and the support projector."""
    w, v = np.linalg.eigh(0.5 * (b + b.conj().T))
    cut = PINV_CUTOFF * max(float(np.abs(w).max()), 1e-300)
    keep = w > cut
    inv = (v[:, keep] / w[keep]) @ v[:, keep].conj().T
    proj = v[:, keep] @ v[:, keep].conj().T
    return inv, proj


@dataclass
class CascadeStage:
    G0: np.ndarray
    G1: np.ndarray
    support: np.ndarray
    kraus0: np.ndarray
    kraus1: np.ndarray
    X: np.ndarray


@dataclass
class CascadeOperators:
    """Operators of the consecutive-measurement scheme.

    ``B[0]`` is the literal ``I - sum gamma_k dt A_k^2 / 2``; ``B[j]`` for
    ``j >= 1`` is ``sqrt(sum_{k >= j} gamma_k dt A_k^2)`` (channels counted
    from 1). Stage 0 measures with ``(sqrt(I - B_1^2), B_1)``, which is exactly
    complete and equals ``(B_0, B_1)`` up to ``O(dt^2)``. Stage ``j`` measures
    with ``G_0 = sqrt(gamma_j dt) A_j B_j^+`` and ``G_1 = B_{j+1} B_j^+``.
    """

    B: list[np.ndarray]
    stages: list[CascadeStage]
    unitaries: list[np.ndarray]
    lindblads: list[np.ndarray]

    def terminal_kraus(self) -> list[tuple[int | None, np.ndarray]]:
        """Effective Kraus operator of every terminal branch, tagged by channel (``None``: no jump)."""
        out = [(None, self.stages[0].kraus0)]
        prefix = self.stages[0].kraus1
        n = len(self.lindblads)
        for j in range(1, n):
            st = self.stages[j]
            out.append((j - 1, self.unitaries[j - 1] @ st.kraus0 @ prefix))
            prefix = st.kraus1 @ prefix
        out.append((n - 1, self.unitaries[n - 1] @ prefix))
        return out


def _stage(G0, G1, support) -> CascadeStage:
    W0, A0 = polar_decompose(G0)
    W1, A1 = polar_decompose(G1)
    X = cos_sin_split(A0, A1, support=support)
    c = hermitian_function(X, np.cos, tol=1e-8) @ support
    s = hermitian_function(X, np.sin, tol=1e-8) @ support
    return CascadeStage(G0, G1, support, W0 @ c, W1 @ s, X)


def build_cascade_operators(channels: Sequence[tuple[np.ndarray, float]], cfg: LVStepConfig) -> CascadeOperators:
    if not channels:
        raise LVError("no channels")
    polars = [polar_decompose(L) for L, _ in channels]
    for _, g in channels:
        cfg.check_rate(g)
    n = len(channels)
    d = channels[0][0].shape[0]
    terms = [g * cfg.dt * (A @ A) for (_, g), (_, A) in zip(channels, polars)]
    B = [np.eye(d) - 0.5 * sum(terms)]
    for j in range(1, n + 1):
        B.append(sqrtm_psd(sum(terms[j - 1:]), clip=-1e-12))
    eye = np.eye(d, dtype=complex)
    M0 = sqrtm_psd(eye - B[1] @ B[1], clip=-1e-12)
    X0 = cos_sin_split(M0, B[1])
    stages = [CascadeStage(M0, B[1], eye, M0, B[1], X0)]
    for j in range(1, n):
        inv, proj = _pinv_psd(B[j])
        _, proj_next = _pinv_psd(B[j + 1])
        A_j = polars[j - 1][1]
        for name, op in (("A_%d" % j, A_j), ("B_%d" % (j + 1), proj_next)):
            leak = np.linalg.norm(op @ (eye - proj))
            if leak > 1e-8:
                raise LVError(f"support of {name} is not contained in the support of B_{j}: {leak:.2e}")
        G0 = np.sqrt(channels[j - 1][1] * cfg.dt) * A_j @ inv
        G1 = B[j + 1] @ inv
        stages.append(_stage(G0, G1, proj))
    return CascadeOperators(B, stages, [p[0] for p in polars], [np.asarray(L, dtype=complex) for L, _ in channels])


def cascade_branches(rho_S, cascade: CascadeOperators) -> list[tuple[float, np.ndarray, int | None, list[int]]]:
    """Exact terminal branches: ``(probability, state, channel, bits)``."""
    rho = np.asarray(rho_S, dtype=complex)
    out = []
    n = len(cascade.lindblads)
    for idx, (ch, K) in enumerate(cascade.terminal_kraus()):
        post = K @ rho @ K.conj().T
        p = float(np.trace(post).real)
        bits = [1] * idx + [0] if idx < n else [1] * n
        out.append((p, post / p if p > 1e-300 else post, ch, bits))
    return out


def cascade_average_map(rho_S, cascade: CascadeOperators) -> np.ndarray:
    rho = np.asarray(rho_S, dtype=complex)
    return sum(K @ rho @ K.conj().T for _, K in cascade.terminal_kraus())


def lv_cascade_step(rho_S, cascade: CascadeOperators, rng: np.random.Generator) -> LVOutcome:
    """Run the consecutive measurements on ``rho_S`` and return the terminal state."""
    rho = np.asarray(rho_S, dtype=complex)
    bits: list[int] = []
    probs: list[float] = []
    n = len(cascade.lindblads)
    for j, st in enumerate(cascade.stages):
        leak = np.linalg.norm(rho - st.support @ rho @ st.support)
        if leak > 1e-8:
            raise LVError(f"state leaves the support of B_{j} (Lemma 2 violated numerically): {leak:.2e}")
        b0 = st.kraus0 @ rho @ st.kraus0.conj().T
        b1 = st.kraus1 @ rho @ st.kraus1.conj().T
        p0, p1 = float(np.trace(b0).real), float(np.trace(b1).real)
        tot = p0 + p1
        if tot <= 1e-300:
            raise LVError("stage probability underflow")
        bit = int(rng.random() * tot < p1)
        bits.append(bit)
        probs.append(p1 / tot)
        rho = (b1 / p1) if bit else (b0 / p0)
        if j == 0 and bit == 0:
            return LVOutcome(bits, rho, 1.0, None, probs)
        if j > 0 and bit == 0:
            U = cascade.unitaries[j - 1]
            return LVOutcome(bits, U @ rho @ U.conj().T, 1.0, j - 1, probs)
    U = cascade.unitaries[n - 1]
    return LVOutcome(bits, U @ rho @ U.conj().T, 1.0, n - 1, probs)


def padding_completion(lindblads: Sequence[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray | None, float]:
    """Rescale by ``a`` and add ``P`` so that ``sum L^H L + P^H P = I``."""
    s = sum(np.asarray(L).conj().T @ np.asarray(L) for L in lindblads)
    a = float(np.linalg.eigvalsh(0.5 * (s + s.conj().T)).max())
    scaled = [np.asarray(L) / np.sqrt(a) for L in lindblads]
    rest = np.eye(s.shape[0]) - s / a
    if np.max(np.abs(rest)) < 1e-12:
        return scaled, None, a
    return scaled, sqrtm_psd(rest, clip=-1e-9), a


# Discrete martingale ------------------------------------------------------------

def discrete_weight(plan: MartingalePlan, events, t: float, dt: float) -> float:
    """Product of step factors up to ``t`` for jumps on the grid ``n dt``.

    ``events`` are ``(time, channel)`` pairs; each is snapped to the step that
    contains it. Steps without a jump contribute ``1 + c m(n dt) dt``.
    """
    n_steps = int(round(t / dt))
    jump_steps = {}
    for time, k in events:
        n = int(np.floor(time / dt + 1e-9))
        if n < n_steps:
            jump_steps[n] = k
    mu = 1.0
    for n in range(n_steps):
        s = n * dt
        if n in jump_steps:
            k = jump_steps[n]
            mu *= lv_weight_factor(1, float(plan.engineered[k](s)), float(plan.noise_rates[k](s)),
                                   float(plan.m(s)), dt)
        else:
            mu *= lv_weight_factor(0, 0.0, 0.0, float(plan.m(s)), dt, plan.completeness)
    return mu


def continuous_weight(plan: MartingalePlan, events, t: float) -> float:
    grid = np.linspace(0.0, t, 2001)
    mu = float(np.exp(plan.log_drift(grid)[-1]))
    for time, k in events:
        if time <= t:
            mu *= plan.factor(k, time)
    return mu


# Stepped mitigation ---------------------------------------------------------------

PHYSICAL_STEPS = ("trotter", "joint")


def _lv_kraus(lindblads, plan: MartingalePlan, dt: float):
    """Per channel: (K0, K1) of the probabilistic step with rate ``N gamma_k``."""
    n_ch = len(lindblads)
    cfg = LVStepConfig(dt)
    out = []
    for k, L in enumerate(lindblads):
        g = float(plan.engineered[k](0.0))
        cfg.check_rate(n_ch * g)
        U, X = polar_decompose(L)
        theta = np.sqrt(n_ch * g * dt)
        out.append((hermitian_function(X, lambda x: np.cos(theta * x)),
                    U @ hermitian_function(X, lambda x: np.sin(theta * x))))
    return out


def weighted_step_superop(lindblads, plan: MartingalePlan, dt: float, t: float = 0.0) -> np.ndarray:
    """Exact average of one weighted probabilistic step as a row-major superoperator."""
    n_ch = len(lindblads)
    d = np.asarray(lindblads[0]).shape[0]
    out = np.zeros((d * d, d * d), dtype=complex)
    m = float(plan.m(t))
    for k, (k0, k1) in enumerate(_lv_kraus(lindblads, plan, dt)):
        w0 = lv_weight_factor(0, 0.0, 0.0, m, dt, plan.completeness)
        w1 = lv_weight_factor(1, float(plan.engineered[k](t)), float(plan.noise_rates[k](t)), m, dt)
        out += (w0 * np.kron(k0, k0.conj()) + w1 * np.kron(k1, k1.conj())) / n_ch
    return out


def physical_step_superop(model: NoiseModel, dt: float, physical: str = "trotter") -> np.ndarray:
    """Evolution of the unmonitored system over ``dt``.

    ``trotter`` applies ``exp(-i H dt)`` and then the noise dissipator;
    ``joint`` exponentiates both together.
    """
    if physical not in PHYSICAL_STEPS:
        raise ValueError(f"physical step must be one of {PHYSICAL_STEPS}")
    if physical == "joint":
        return scipy.linalg.expm(Generator(model).superop(0.0) * dt)
    unitary = scipy.linalg.expm(Generator(model.without_channels()).superop(0.0) * dt)
    noise = scipy.linalg.expm(Generator(model.with_channels(model.channels)).superop(0.0) * dt
                              - Generator(model.without_channels()).superop(0.0) * dt)
    return noise @ unitary


def _check_stepped_model(model: NoiseModel) -> None:
    if not model.time_independent:
        raise NotImplementedError("the stepped ancilla scheme assumes constant H and rates")


def lv_dense_limit(model: NoiseModel, initial, steps: int, *, t_end: float = 50.0, m=None,
                   physical: str = "trotter") -> tuple[np.ndarray, np.ndarray]:
    """Infinite-ensemble limit of :func:`lv_mitigation_run`: ``(times, <psi(t)|rho_mit(t)|psi(t)>)``."""
    _check_stepped_model(model)
    initial = np.asarray(initial, dtype=complex)
    paired = make_plan(model.channels, m)
    lindblads = [np.asarray(c.lindblad, dtype=complex) for c in paired.channels]
    dt = t_end / steps
    step = physical_step_superop(model, dt, physical) @ weighted_step_superop(lindblads, paired.plan, dt)
    times = np.linspace(0.0, t_end, steps + 1)
    pure = unitary_states(model.hamiltonian_at(0.0), initial, times)
    d = model.dim
    v = np.outer(initial, initial.conj()).reshape(-1)
    out = np.empty(steps + 1)
    for n in range(steps + 1):
        if n:
            v = step @ v
        out[n] = float(np.real(pure[n].conj() @ v.reshape(d, d) @ pure[n]))
    return times, out


@dataclass
class _LVChunkSpec:
    model: NoiseModel
    initial: np.ndarray
    steps: int
    t_end: float
    master_seed: int
    plan: MartingalePlan
    lindblads: list
    pure: np.ndarray
    physical: str


def _normalise(rho: np.ndarray) -> np.ndarray:
    return rho / np.trace(rho, axis1=1, axis2=2).real[:, None, None]


def _lv_chunk(start: int, stop: int, spec: _LVChunkSpec):
    d = spec.model.dim
    dt = spec.t_end / spec.steps
    plan = spec.plan
    n_ch = len(spec.lindblads)
    kraus = _lv_kraus(spec.lindblads, plan, dt)
    e1 = [k1.conj().T @ k1 for _, k1 in kraus]
    phys_t = physical_step_superop(spec.model, dt, spec.physical).T
    b = stop - start
    rngs = [trajectory_rng(trajectory_seed(spec.master_seed, i)) for i in range(start, stop)]
    rho = np.broadcast_to(np.outer(spec.initial, spec.initial.conj()), (b, d, d)).copy()
    mu = np.ones(b)
    overlaps = np.empty((b, spec.steps + 1))
    absmu = np.ones((b, spec.steps + 1))
    psi = spec.pure[0]
    overlaps[:, 0] = np.einsum("i,bij,j->b", psi.conj(), rho, psi).real
    for n in range(spec.steps):
        t = n * dt
        m = float(plan.m(t))
        ks = np.array([g.integers(n_ch) for g in rngs])
        us = np.array([g.random() for g in rngs])
        for k in np.unique(ks):
            idx = np.flatnonzero(ks == k)
            k0, k1 = kraus[k]
            p1 = np.einsum("ji,bij->b", e1[k], rho[idx]).real
            jump = us[idx] < p1
            if np.any(jump):
                j_idx = idx[jump]
                rho[j_idx] = _normalise(k1 @ rho[j_idx] @ k1.conj().T)
                mu[j_idx] *= lv_weight_factor(1, float(plan.engineered[k](t)), float(plan.noise_rates[k](t)), m, dt)
            if not np.all(jump):
                s_idx = idx[~jump]
                rho[s_idx] = _normalise(k0 @ rho[s_idx] @ k0.conj().T)
                mu[s_idx] *= lv_weight_factor(0, 0.0, 0.0, m, dt, plan.completeness)
        rho = (rho.reshape(b, d * d) @ phys_t).reshape(b, d, d)
        psi = spec.pure[n + 1]
        overlaps[:, n + 1] = mu * np.einsum("i,bij,j->b", psi.conj(), rho, psi).real
        absmu[:, n + 1] = np.abs(mu)
    return overlaps, absmu


def lv_mitigation_run(model: NoiseModel, initial, n_trajectories: int, seed: int, steps: int, *,
                      t_end: float = 50.0, m=None, physical: str = "trotter", workers: int = 1,
                      chunk_size: int = DEFAULT_CHUNK) -> FidelityReport:
    """Stepped mitigation with ``dt = t_end / steps``.

    Each step applies one probabilistic ancilla step carrying martingale
    factors for the noise plan, followed by the physical evolution of the
    system under its Hamiltonian and unmonitored noise bath.
    """
    _check_stepped_model(model)
    if physical not in PHYSICAL_STEPS:
        raise ValueError(f"physical step must be one of {PHYSICAL_STEPS}")
    initial = np.asarray(initial, dtype=complex)
    paired = make_plan(model.channels, m)
    lindblads = [np.asarray(c.lindblad, dtype=complex) for c in paired.channels]
    times = np.linspace(0.0, t_end, steps + 1)
    pure = unitary_states(model.hamiltonian_at(0.0), initial, times)
    spec = _LVChunkSpec(model, initial, steps, t_end, seed, paired.plan, lindblads, pure, physical)
    parts = map_chunks(_lv_chunk, chunk_bounds(n_trajectories, chunk_size), workers, (spec,))
    wo = np.concatenate([p[0] for p in parts])
    absmu = np.concatenate([p[1] for p in parts])
    sub = max(1, int(np.ceil((t_end / steps) / 0.01)))
    fine = np.linspace(0.0, t_end, steps * sub + 1)
    rho0 = np.outer(initial, initial.conj())
    noisy = integrate(model, rho0, fine)[::sub]
    both = integrate(model.with_channels(tuple(model.channels) + tuple(paired.channels)), rho0, fine)[::sub]
    f_noisy = np.sqrt(np.clip(np.einsum("ti,tij,tj->t", pure.conj(), noisy, pure).real, 0, None))
    f_both = np.sqrt(np.clip(np.einsum("ti,tij,tj->t", pure.conj(), both, pure).real, 0, None))
    mean = wo.mean(axis=0)
    se = wo.std(axis=0, ddof=1) / np.sqrt(len(wo)) if len(wo) > 1 else np.zeros_like(mean)
    f_mit = np.sqrt(np.clip(mean, 0.0, None))
    stderr = se / np.maximum(2 * f_mit, 1e-12)
    imp, final = improvement_metric(f_mit, f_noisy)
    return FidelityReport(times, f_noisy, f_both, f_mit, stderr, absmu.mean(axis=0), imp, final, n_trajectories)
