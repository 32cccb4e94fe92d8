import numpy as np
import pytest
import scipy.linalg

from mqem import propagate as pr
from mqem.complexla import SIGMA_MINUS, SIGMA_X, SIGMA_Z, random_density_matrix, random_hermitian
from mqem.models import Channel, NoiseModel, RateFunction, all_up_state, heisenberg_model

EXCITED = np.diag([0.0, 1.0]).astype(complex)


def decay_model(rate, h=None):
    h = np.zeros((2, 2)) if h is None else h
    return NoiseModel(2, h, (Channel(SIGMA_MINUS, RateFunction.const(rate)),))


class TestLiouvillian:
    def test_unitary_part(self):
        rng = np.random.default_rng(0)
        h = random_hermitian(3, rng)
        rho = random_density_matrix(3, rng)
        model = NoiseModel(3, h, (Channel(np.eye(3) * 0.5, RateFunction.const(0.0)),))
        assert np.allclose(pr.liouvillian_apply(model, rho, 0.0), -1j * (h @ rho - rho @ h))

    def test_decay_of_excited_state(self):
        out = pr.liouvillian_apply(decay_model(1.0), EXCITED, 0.0)
        assert np.allclose(out, np.diag([1.0, -1.0]))

    def test_sign_flip_cancels_dissipator(self):
        rng = np.random.default_rng(1)
        rho = random_density_matrix(2, rng)
        model = decay_model(0.7, 0.3 * SIGMA_X)
        both = pr.liouvillian_apply(model, rho, 0.0, [1]) + pr.liouvillian_apply(model, rho, 0.0, [-1])
        unitary = -1j * (model.hamiltonian @ rho - rho @ model.hamiltonian)
        assert np.allclose(both, 2 * unitary)

    def test_superop_agrees(self):
        rng = np.random.default_rng(2)
        model = NoiseModel(2, 0.4 * SIGMA_Z, (Channel(SIGMA_MINUS, RateFunction.const(0.3)),
                                              Channel(SIGMA_Z, RateFunction.const(-0.2))))
        rho = random_density_matrix(2, rng)
        assert np.allclose(pr.liouvillian_superop(model, 0.0) @ rho.reshape(-1),
                           pr.liouvillian_apply(model, rho, 0.0).reshape(-1))

    def test_rate_outside_table(self):
        model = NoiseModel(2, np.zeros((2, 2)), (Channel(SIGMA_MINUS, RateFunction.table([0, 1], [1, 1])),))
        with pytest.raises(Exception):
            pr.liouvillian_apply(model, EXCITED, 2.0)


class TestIntegrate:
    def test_unitary_limit(self):
        rng = np.random.default_rng(3)
        h = random_hermitian(3, rng)
        model = NoiseModel(3, h, (Channel(np.eye(3), RateFunction.const(0.0)),))
        rho0 = random_density_matrix(3, rng)
        t = np.linspace(0, 2, 201)
        out = pr.integrate(model, rho0, t, substeps=4)
        u = scipy.linalg.expm(-1j * h * 2.0)
        assert np.max(np.abs(out[-1] - u @ rho0 @ u.conj().T)) <= 1e-8

    def test_amplitude_damping(self):
        t = np.linspace(0, 2, 201)
        out = pr.integrate(decay_model(1.0), EXCITED, t)
        assert np.max(np.abs(out[:, 1, 1].real - np.exp(-t))) <= 1e-8

    def test_negative_rate_grows(self):
        t = np.linspace(0, 1, 101)
        coarse = pr.integrate(decay_model(1.0), EXCITED, t, signs=[-1])
        fine = pr.integrate(decay_model(1.0), EXCITED, t, signs=[-1], substeps=2)
        assert np.max(np.abs(coarse - fine)) < 1e-9
        assert np.max(np.abs(fine[:, 1, 1].real - np.exp(t))) <= 1e-8
        assert np.max(np.abs(np.trace(fine, axis1=1, axis2=2) - 1)) <= 1e-8

    def test_trace_and_hermiticity(self):
        rng = np.random.default_rng(4)
        model = NoiseModel(2, 0.5 * SIGMA_X, (Channel(SIGMA_MINUS, RateFunction.const(0.6)),
                                              Channel(SIGMA_Z, RateFunction.const(-0.3))))
        out = pr.integrate(model, random_density_matrix(2, rng), np.linspace(0, 3, 301))
        assert np.max(np.abs(np.trace(out, axis1=1, axis2=2) - 1)) <= 1e-8
        assert np.max(np.abs(out - out.conj().transpose(0, 2, 1))) <= 1e-9

    def test_trace_drift_aborts(self):
        # a step far outside the RK4 stability region blows up and loses the trace to round-off
        model = decay_model(1e4)
        with pytest.raises(pr.TraceDriftError):
            pr.integrate(model, EXCITED, np.linspace(0, 1, 11))
        pr.integrate(model, EXCITED, np.linspace(0, 1e-3, 11))

    def test_time_dependent_rates_match_exact_integral(self):
        rate = RateFunction.table([0.0, 2.0], [0.0, 2.0])
        model = NoiseModel(2, np.zeros((2, 2)), (Channel(SIGMA_MINUS, rate),))
        t = np.linspace(0, 2, 201)
        out = pr.integrate(model, EXCITED, t)
        assert np.max(np.abs(out[:, 1, 1].real - np.exp(-0.5 * t ** 2))) <= 1e-8

    def test_fourth_order_on_heisenberg(self):
        model = heisenberg_model(gamma_R=0.05, gamma_D=0.05)
        psi = all_up_state()
        rho0 = np.outer(psi, psi.conj())
        ref = pr.exact_propagator(model, 2.0) @ rho0.reshape(-1)
        errs = []
        for n in (40, 80, 160):
            out = pr.integrate(model, rho0, np.linspace(0, 2.0, n + 1))
            errs.append(np.linalg.norm(out[-1].reshape(-1) - ref))
        order = np.polyfit(np.log([40, 80, 160]), np.log(errs), 1)[0]
        assert -order >= 3.8


def test_unitary_states():
    h = 0.5 * SIGMA_X
    psi = np.array([1, 0], dtype=complex)
    out = pr.unitary_states(h, psi, [0.0, np.pi])
    assert np.allclose(out[1], scipy.linalg.expm(-1j * h * np.pi) @ psi)
