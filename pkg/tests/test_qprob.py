import numpy as np
import pytest

from mqem import qprob
from mqem.complexla import SIGMA_X, SIGMA_Y, SIGMA_Z, random_density_matrix

PAULIS = [np.eye(2), SIGMA_X, SIGMA_Y, SIGMA_Z]


def ptm(kraus):
    """Pauli-transfer matrix R_ij = tr(P_i E(P_j)) / 2."""
    return np.array([[np.trace(Pi @ qprob.apply_kraus(kraus, Pj)).real / 2 for Pj in PAULIS] for Pi in PAULIS])


def oracle_inverse_coefficients(p):
    """Invert the transfer matrix of E and project onto the four Pauli conjugations."""
    target = np.linalg.inv(ptm(qprob.depolarizing_kraus(p)))
    basis = np.array([ptm([P]).reshape(-1) for P in PAULIS]).T
    q, *_ = np.linalg.lstsq(basis, target.reshape(-1), rcond=None)
    assert np.allclose(basis @ q, target.reshape(-1), atol=1e-12)
    return q


def test_trivial_single_map():
    s = qprob.normalize(qprob.QuasiDecomposition(((np.eye(2),),), np.array([1.0])))
    assert s.cost == 1 and np.allclose(s.probabilities, [1]) and np.allclose(s.signs, [1])


def test_two_term_arithmetic():
    d = qprob.QuasiDecomposition(((np.eye(2),), (SIGMA_X,)), np.array([1.5, -0.5]))
    s = qprob.normalize(d)
    assert s.cost == 2
    assert np.allclose(s.probabilities, [0.75, 0.25])
    assert np.allclose(s.signs, [1, -1])
    assert np.allclose(s.signs * s.probabilities * s.cost, d.coefficients, atol=0)


def test_invariants_enforced():
    with pytest.raises(qprob.DecompositionError):
        qprob.QuasiDecomposition(((np.eye(2),),), np.array([0.9]))
    with pytest.raises(qprob.DecompositionError):
        qprob.QuasiDecomposition(((0.5 * np.eye(2),),), np.array([1.0]))


@pytest.mark.parametrize("p", [0.1, 0.2])
def test_inverse_matches_oracle(p):
    d = qprob.depolarizing_inverse(p)
    assert np.allclose(d.coefficients, oracle_inverse_coefficients(p), atol=1e-12)
    assert qprob.normalize(d).cost > 1


def test_full_sum_inverts_channel():
    rng = np.random.default_rng(0)
    d = qprob.depolarizing_inverse(0.1)
    kraus = qprob.depolarizing_kraus(0.1)
    for _ in range(20):
        rho = random_density_matrix(2, rng)
        assert np.max(np.abs(d.apply(qprob.apply_kraus(kraus, rho)) - rho)) <= 1e-9


def test_identity_map_has_zero_variance():
    d = qprob.QuasiDecomposition(((np.eye(2),),), np.array([1.0]))
    rho = np.diag([0.2, 0.8]).astype(complex)
    mean, se = qprob.qp_estimate(qprob.normalize(d), d, rho, SIGMA_Z, 100, 1)
    assert mean == pytest.approx(0.6) and se < 1e-15


def test_estimator_recovers_ground_state_value():
    d = qprob.depolarizing_inverse(0.1)
    noisy = qprob.apply_kraus(qprob.depolarizing_kraus(0.1), np.diag([1.0, 0.0]).astype(complex))
    mean, se = qprob.qp_estimate(qprob.normalize(d), d, noisy, SIGMA_Z, 100_000, 5)
    # sigma_z|0> = -|0> in this basis ordering
    assert abs(mean - (-1.0)) < 3 * se


def test_variance_grows_with_cost():
    rho = np.diag([1.0, 0.0]).astype(complex)
    ses = []
    for p in (0.1, 0.2):
        d = qprob.depolarizing_inverse(p)
        noisy = qprob.apply_kraus(qprob.depolarizing_kraus(p), rho)
        ses.append(qprob.qp_estimate(qprob.normalize(d), d, noisy, SIGMA_Z, 20_000, 3)[1])
    assert ses[1] > ses[0]


def test_unbiased_over_independent_runs():
    rng = np.random.default_rng(9)
    rho = random_density_matrix(2, rng)
    d = qprob.depolarizing_inverse(0.15)
    noisy = qprob.apply_kraus(qprob.depolarizing_kraus(0.15), rho)
    runs = [qprob.qp_estimate(qprob.normalize(d), d, noisy, SIGMA_X, 2000, s) for s in range(50)]
    means = np.array([r[0] for r in runs])
    combined = np.sqrt(np.sum([r[1] ** 2 for r in runs])) / len(runs)
    assert abs(means.mean() - np.trace(SIGMA_X @ rho).real) < 3 * combined


def test_non_hermitian_observable_rejected():
    d = qprob.depolarizing_inverse(0.1)
    with pytest.raises(ValueError):
        qprob.qp_estimate(qprob.normalize(d), d, np.eye(2) / 2, SIGMA_X + 1j * np.eye(2), 10, 0)


def test_file_round_trip(tmp_path):
    d = qprob.depolarizing_inverse(0.1)
    path = tmp_path / "inv.csv"
    qprob.write_decomposition(path, d)
    back = qprob.read_decomposition(path)
    assert np.array_equal(back.coefficients, d.coefficients)
    for a, b in zip(back.maps, d.maps):
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_truncated_file(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("2,1\n1.0\n1\n1,0,0,0\n")
    with pytest.raises(qprob.DecompositionError):
        qprob.read_decomposition(path)
