import numpy as np
import pytest
from scipy import stats

from mfprep import autodiff as ad
from mfprep import hamiltonian as hm
from mfprep import tensor as tc
from conftest import random_density


def test_pauli_string_order():
    assert hm.pauli_strings(1) == ["I", "X", "Y", "Z"]
    assert hm.pauli_strings(2)[:5] == ["II", "IX", "IY", "IZ", "XI"]
    assert len(hm.pauli_strings(3)) == 64


def test_duplicates_merge_and_bad_strings():
    h = hm.PauliHamiltonian(1, ((0.5, "Z"), (0.25, "Z"), (1.0, "X")))
    assert dict((s, c) for c, s in h.terms) == {"Z": 0.75, "X": 1.0}
    with pytest.raises(ValueError):
        hm.PauliHamiltonian(1, ((1.0, "XX"),))
    with pytest.raises(ValueError):
        hm.PauliHamiltonian(1, ((1.0, "Q"),))


def test_sample_term_counts_and_range(rng):
    assert len(hm.sample_hamiltonian(1, rng).terms) == 4
    assert len(hm.sample_hamiltonian(2, rng).terms) == 16
    h = hm.sample_hamiltonian(3, rng)
    assert np.all(np.abs(h.coefficient_vector()) <= 1)
    with pytest.raises(ValueError):
        hm.sample_hamiltonian(4, rng)


def test_sampled_coefficients_uniform():
    rng = np.random.default_rng(2024)
    coeffs = np.stack([hm.sample_hamiltonian(1, rng).coefficient_vector() for _ in range(10_000)])
    for col in coeffs.T:
        assert stats.kstest(col, stats.uniform(loc=-1, scale=2).cdf).pvalue > 1e-3


def test_identity_only():
    g = hm.ground(hm.PauliHamiltonian(1, ((0.7, "I"),)))
    assert g.energy == pytest.approx(0.7) and g.gap == pytest.approx(0.0, abs=1e-12)
    assert g.subspace.shape == (2, 2)


def test_family_examples():
    h0 = hm.test_family_single_qubit(0.0)
    assert np.allclose(hm.to_dense(h0), tc.X)
    g = hm.ground(h0)
    assert g.energy == pytest.approx(-1.0, abs=1e-12)
    assert abs(abs(np.vdot(g.state, np.array([1, -1]) / np.sqrt(2))) - 1) < 1e-12
    assert hm.ground(hm.test_family_single_qubit(np.pi / 2)).energy == pytest.approx(-1.0, abs=1e-12)
    thetas = np.random.default_rng(5).uniform(0, 2 * np.pi, 100)
    mats = np.stack([hm.to_dense(hm.test_family_single_qubit(t)) for t in thetas])
    for g in hm.ground_batch(mats):
        assert abs(g.energy + 1) <= 1e-10


def test_to_dense_examples():
    assert np.array_equal(hm.to_dense(hm.PauliHamiltonian(1, ((1.0, "Z"),))), np.diag([1, -1]))
    h = hm.PauliHamiltonian(2, ((0.5, "XX"), (0.5, "ZZ")))
    expected = np.array([[0.5, 0, 0, 0.5], [0, -0.5, 0.5, 0], [0, 0.5, -0.5, 0], [0.5, 0, 0, 0.5]])
    assert np.allclose(hm.to_dense(h), expected)
    assert np.array_equal(hm.to_dense(hm.PauliHamiltonian(2, ())), np.zeros((4, 4)))


def test_to_dense_is_linear(rng):
    for n in (1, 2, 3):
        a, b = rng.normal(size=4**n), rng.normal(size=4**n)
        lhs = hm.to_dense(hm.PauliHamiltonian.from_vector(2 * a - 3 * b))
        rhs = 2 * hm.to_dense(hm.PauliHamiltonian.from_vector(a)) - 3 * hm.to_dense(hm.PauliHamiltonian.from_vector(b))
        assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_dense_batch_matches_kron_expansion(rng):
    coeffs = rng.normal(size=(3, 16))
    for k, m in enumerate(hm.dense_batch(coeffs)):
        ref = sum(c * np.kron(tc.PAULI[s[0]], tc.PAULI[s[1]]) for c, s in zip(coeffs[k], hm.pauli_strings(2)))
        assert np.allclose(m, ref)


def test_ground_examples():
    g = hm.ground(hm.PauliHamiltonian(1, ((1.0, "Z"),)))
    assert g.energy == pytest.approx(-1) and g.gap == pytest.approx(2)
    assert abs(abs(g.state[1]) - 1) < 1e-12
    g = hm.ground(hm.PauliHamiltonian(2, ((1.0, "ZZ"),)))
    assert g.energy == pytest.approx(-1) and g.gap == pytest.approx(0, abs=1e-12)
    zz = np.diag([1.0, -1, -1, 1])
    assert np.allclose(zz @ g.state, -g.state)
    assert g.subspace.shape[1] == 2


def test_ground_residual_and_variational_bound(rng):
    for n in (1, 2, 3):
        h = hm.sample_hamiltonian(n, rng)
        mat = hm.to_dense(h)
        g = hm.ground(h)
        assert np.linalg.norm(mat @ g.state - g.energy * g.state) <= 1e-9 * np.linalg.norm(mat)
        for _ in range(100):
            assert g.energy <= hm.expectation(random_density(2**n, rng), h) + 1e-12


def test_expectation_examples(rng):
    assert hm.expectation(np.diag([1.0, 0.0]), hm.PauliHamiltonian(1, ((1.0, "Z"),))) == pytest.approx(1.0)
    h = hm.PauliHamiltonian(1, ((0.3, "X"), (-0.8, "Y"), (0.1, "Z")))
    assert hm.expectation(np.eye(2) / 2, h) == pytest.approx(0.0, abs=1e-15)
    h = hm.sample_hamiltonian(2, rng)
    g = hm.ground(h)
    assert hm.expectation(g.projector, h) == pytest.approx(g.energy, abs=1e-9)
    with pytest.raises(tc.ShapeError):
        hm.expectation(np.eye(4) / 4, hm.PauliHamiltonian(1, ((1.0, "Z"),)))
    with pytest.raises(ValueError):
        hm.expectation(np.array([[1, 1], [0, 0]]), hm.PauliHamiltonian(1, ((1.0, "Y"),)))


def test_expectation_differentiable(rng):
    h = hm.sample_hamiltonian(1, rng)
    with ad.Tape() as tape:
        rho = tape.variable(random_density(2, rng))
        e = hm.expectation(rho, h)
    tape.backward(e)
    assert np.allclose(rho.grad, hm.to_dense(h).T.conj())


def test_text_round_trip(tmp_path, rng):
    h = hm.sample_hamiltonian(2, rng)
    path = tmp_path / "h.txt"
    path.write_text("# random two-qubit sample\n" + hm.format_hamiltonian(h))
    back = hm.load_hamiltonian(path)
    assert np.array_equal(back.coefficient_vector(), h.coefficient_vector())
    assert hm.parse_hamiltonian("−0.5 z\n1 x").coefficient_vector().tolist() == [0, 1, 0, -0.5]
    for bad in ("", "1.0 X Y", "1 X\n1 XX"):
        with pytest.raises(ValueError):
            hm.parse_hamiltonian(bad)
