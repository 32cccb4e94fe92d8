import numpy as np
import pytest

from mqem import models as md
from mqem.complexla import SIGMA_X, SIGMA_Y, SIGMA_Z, kron_all


def brute_force_heisenberg(J, gamma, h):
    """Independent construction: explicit Kronecker strings per bond."""
    def op(p, i):
        mats = [np.eye(2)] * 4
        mats[i] = p
        out = mats[0]
        for m in mats[1:]:
            out = np.kron(out, m)
        return out

    H = np.zeros((16, 16), dtype=complex)
    for i, j in [(0, 1), (0, 2), (1, 3), (2, 3)]:
        H += J * (1 + gamma) * op(SIGMA_X, i) @ op(SIGMA_X, j)
        H += J * (1 - gamma) * op(SIGMA_Y, i) @ op(SIGMA_Y, j)
        H += J * op(SIGMA_Z, i) @ op(SIGMA_Z, j)
    for i in range(4):
        H -= gamma * h * op(SIGMA_Y, i)
    return H


class TestRateFunction:
    def test_constant(self):
        r = md.RateFunction.const(0.3)
        assert r(5.0) == 0.3
        assert np.allclose(r(np.linspace(0, 1, 3)), 0.3)

    def test_table_interpolates(self):
        r = md.RateFunction.table([0, 1, 2], [0.0, 1.0, -1.0])
        assert r(0.5) == pytest.approx(0.5)
        assert r(1.5) == pytest.approx(0.0)

    def test_no_extrapolation(self):
        r = md.RateFunction.table([0, 1], [0.0, 1.0])
        with pytest.raises(md.RateError):
            r(1.5)

    def test_strictly_increasing(self):
        with pytest.raises(md.RateError):
            md.RateFunction.table([0, 0], [1, 2])

    def test_integral(self):
        r = md.RateFunction.table([0, 2], [0.0, 2.0])
        assert md.RateFunction.const(0.5).integral(np.array([0.0, 2.0]))[-1] == pytest.approx(1.0)
        assert r.integral(np.linspace(0, 2, 5))[-1] == pytest.approx(2.0)

    def test_file_round_trip(self, tmp_path):
        r = md.RateFunction.table([0, 0.5, 1.0], [0.1, -0.2, 0.3])
        md.write_rate_table(tmp_path / "r.csv", r, "sample")
        back = md.read_rate_table(tmp_path / "r.csv")
        assert back == r

    def test_bad_header(self, tmp_path):
        (tmp_path / "r.csv").write_text("t,v\n0,1\n1,2\n")
        with pytest.raises(md.RateError):
            md.read_rate_table(tmp_path / "r.csv")


class TestHeisenberg:
    def test_hermitian(self):
        H = md.build_heisenberg_2x2(1.0, 0.5, 1.0)
        assert np.max(np.abs(H - H.conj().T)) <= 1e-12

    def test_matches_brute_force(self):
        for args in [(1.0, 0.5, 1.0), (0.7, 0.0, 3.0), (1.3, -0.4, 0.2)]:
            assert np.allclose(md.build_heisenberg_2x2(*args), brute_force_heisenberg(*args), atol=1e-12)

    def test_field_vanishes_without_anisotropy(self):
        assert np.allclose(md.build_heisenberg_2x2(1.0, 0.0, 5.0), md.build_heisenberg_2x2(1.0, 0.0, 0.0))

    def test_all_up_energy(self):
        H = md.build_heisenberg_2x2(1.3, 0.5, 1.0)
        psi = md.all_up_state()
        assert np.vdot(psi, H @ psi).real == pytest.approx(4 * 1.3)

    def test_spin_flip_symmetry(self):
        H = md.build_heisenberg_2x2(1.0, 0.0, 0.0)
        flip = kron_all(*[SIGMA_X] * 4)
        assert np.linalg.norm(H @ flip - flip @ H) <= 1e-10


class TestNoise:
    def test_channel_count_and_algebra(self):
        chans = md.build_local_noise(0.001, 0.001)
        assert len(chans) == 8
        for c in chans[:4]:
            assert np.allclose(c.lindblad @ c.lindblad, 0)
        for c in chans[4:]:
            assert np.allclose(c.lindblad @ c.lindblad, np.eye(16))

    def test_channel_sites(self):
        assert md.channel_sites() == [0, 1, 2, 3, 0, 1, 2, 3]

    def test_model_defaults(self):
        m = md.heisenberg_model()
        assert m.dim == 16 and m.time_independent
        assert np.allclose(m.rates_at(0.0), 0.001)


class TestEngineeredRates:
    def test_benchmark_values(self):
        out = md.engineered_rates([md.RateFunction.const(0.001)] * 2, md.RateFunction.const(0.002))
        assert all(r.constant == pytest.approx(0.001) for r in out)

    def test_negative_noise(self):
        out = md.engineered_rates([md.RateFunction.const(-0.4)], md.RateFunction.const(0.0))
        assert out[0].constant == pytest.approx(0.4)

    def test_tabulated_cosine(self):
        t = np.linspace(0, 6, 61)
        g = md.RateFunction.table(t, np.cos(t))
        (e,) = md.engineered_rates([g], md.RateFunction.const(2.0))
        assert np.all(e(t) > 0)
        assert np.max(np.abs(e(t) + g(t) - 2.0)) <= 1e-12

    def test_violation_reports_channel_and_time(self):
        with pytest.raises(md.NegativeRateError) as info:
            md.engineered_rates([md.RateFunction.const(0.0), md.RateFunction.const(0.5)],
                                md.RateFunction.const(0.2), check_times=[0.0, 1.0])
        assert info.value.channel == 1


def test_bandgap_model_from_tables():
    shift = md.read_rate_table(md.data_path("bandgap_shift.csv"))
    decay = md.read_rate_table(md.data_path("bandgap_decay.csv"))
    model = md.build_bandgap_two_level(shift, decay)
    assert model.time_dependent_hamiltonian
    assert decay(np.linspace(*decay.domain, 400)).min() < 0 < decay(0.0)
