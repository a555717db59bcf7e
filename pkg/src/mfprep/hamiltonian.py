"""Pauli-string Hamiltonians: sampling, dense realization, ground states, energies."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor as tc

MAX_QUBITS = 3
LABELS = "IXYZ"


def pauli_strings(n: int) -> list[str]:
    """All 4**n strings in lexicographic I < X < Y < Z order, qubit 0 leftmost."""
    return ["".join(p) for p in itertools.product(LABELS, repeat=n)]


@dataclass(frozen=True)
class PauliHamiltonian:
    n: int
    terms: tuple[tuple[float, str], ...]

    def __post_init__(self):
        merged: dict[str, float] = {}
        for coeff, string in self.terms:
            if len(string) != self.n or set(string) - set(LABELS):
                raise ValueError(f"bad Pauli string {string!r} for {self.n} qubits")
            merged[string] = merged.get(string, 0.0) + float(coeff)
        object.__setattr__(self, "terms", tuple((c, s) for s, c in merged.items()))

    @classmethod
    def from_vector(cls, coeffs) -> "PauliHamiltonian":
        coeffs = np.asarray(coeffs, dtype=float)
        n = int(round(math.log(len(coeffs), 4)))
        if 4**n != len(coeffs):
            raise ValueError(f"coefficient vector length {len(coeffs)} is not a power of 4")
        return cls(n, tuple(zip(coeffs.tolist(), pauli_strings(n))))

    def coefficient_vector(self) -> np.ndarray:
        """Coefficients over every Pauli string in canonical order (missing strings are 0)."""
        index = {s: i for i, s in enumerate(pauli_strings(self.n))}
        vec = np.zeros(4**self.n)
        for coeff, string in self.terms:
            vec[index[string]] = coeff
        return vec

    def dense(self) -> np.ndarray:
        return to_dense(self)

    def __str__(self):
        return format_hamiltonian(self)


def sample_hamiltonian(n: int, rng: np.random.Generator) -> PauliHamiltonian:
    """All 4**n strings (identity included) with iid Uniform[-1, 1] coefficients."""
    if n not in range(1, MAX_QUBITS + 1):
        raise ValueError(f"n must be in 1..{MAX_QUBITS}, got {n}")
    return PauliHamiltonian.from_vector(rng.uniform(-1.0, 1.0, size=4**n))


def test_family_single_qubit(theta: float) -> PauliHamiltonian:
    """cos(t) X + sin(t)/sqrt(2) Y + sin(t)/sqrt(2) Z; ground energy is -1 for every t."""
    s = math.sin(theta) / math.sqrt(2.0)
    return PauliHamiltonian(1, ((math.cos(theta), "X"), (s, "Y"), (s, "Z")))


test_family_single_qubit.__test__ = False  # not a pytest test despite the name


_STRING_CACHE: dict[str, np.ndarray] = {}


def pauli_matrix(string: str) -> np.ndarray:
    m = _STRING_CACHE.get(string)
    if m is None:
        m = tc.kron_all(tc.PAULI[c] for c in string)
        m.setflags(write=False)
        _STRING_CACHE[string] = m
    return m


def basis_tensor(n: int) -> np.ndarray:
    """Stack of all 4**n Pauli string matrices, shape (4**n, 2**n, 2**n)."""
    return np.stack([pauli_matrix(s) for s in pauli_strings(n)])


def to_dense(h: PauliHamiltonian) -> np.ndarray:
    d = 2**h.n
    out = np.zeros((d, d), dtype=complex)
    for coeff, string in h.terms:
        out += coeff * pauli_matrix(string)
    return out


def dense_batch(coeffs: np.ndarray) -> np.ndarray:
    """Dense matrices for a batch of coefficient vectors, shape (B, 4**n)."""
    coeffs = np.asarray(coeffs, dtype=float)
    n = int(round(math.log(coeffs.shape[-1], 4)))
    return np.einsum("bk,kij->bij", coeffs, basis_tensor(n))


@dataclass(frozen=True)
class GroundSolution:
    energy: float
    state: np.ndarray
    gap: float
    # orthonormal basis of the (near-)degenerate ground space, as columns
    subspace: np.ndarray

    @property
    def projector(self) -> np.ndarray:
        return self.subspace @ self.subspace.conj().T


def ground(h, degeneracy_tol: float = 1e-9) -> GroundSolution:
    """Lowest eigenpair, spectral gap and ground-space basis of a Hamiltonian or dense matrix."""
    mat = to_dense(h) if isinstance(h, PauliHamiltonian) else tc.as_matrix(h)
    w, v = tc.hermitian_eig(mat)
    gap = float(w[1] - w[0]) if len(w) > 1 else 0.0
    k = int(np.sum(w - w[0] < degeneracy_tol))
    return GroundSolution(float(w[0]), v[:, 0].copy(), gap, v[:, :k].copy())


def ground_batch(mats: np.ndarray, degeneracy_tol: float = 1e-9) -> list[GroundSolution]:
    w, v = tc.hermitian_eig(mats)
    out = []
    for wi, vi in zip(w, v):
        gap = float(wi[1] - wi[0]) if len(wi) > 1 else 0.0
        k = int(np.sum(wi - wi[0] < degeneracy_tol))
        out.append(GroundSolution(float(wi[0]), vi[:, 0].copy(), gap, vi[:, :k].copy()))
    return out


def expectation(rho, h, check: bool = True):
    """Re Tr(rho H). Differentiable when ``rho`` is a Node; ``h`` may be a Hamiltonian or matrix."""
    mat = to_dense(h) if isinstance(h, PauliHamiltonian) else tc.as_matrix(h)
    rv = ad.value(rho)
    if rv.shape[-2:] != mat.shape:
        raise tc.ShapeError(f"expectation: state {rv.shape[-2:]} vs Hamiltonian {mat.shape}")
    if check:
        imag = np.abs(np.imag(np.einsum("...ij,ji->...", rv, mat)))
        if np.max(imag, initial=0.0) > 1e-9:
            raise ValueError(f"Tr(rho H) has imaginary part {np.max(imag):.3g}")
    if isinstance(rho, ad.Node):
        return ad.real(ad.einsum("bij,ji->b", ad.reshape(rho, (-1,) + mat.shape), mat)) if rv.ndim > 2 \
            else ad.trace_real(ad.matmul(rho, mat))
    return np.real(np.einsum("...ij,ji->...", rv, mat))


# -- text format: one "<coeff> <string>" term per line, '#' starts a comment --


def parse_hamiltonian(text: str) -> PauliHamiltonian:
    terms = []
    n = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected '<coeff> <string>', got {raw!r}")
        coeff = float(parts[0].replace("−", "-"))
        string = parts[1].upper()
        if n is None:
            n = len(string)
        elif len(string) != n:
            raise ValueError(f"line {lineno}: string {string!r} has {len(string)} qubits, expected {n}")
        terms.append((coeff, string))
    if n is None:
        raise ValueError("empty Hamiltonian file")
    return PauliHamiltonian(n, tuple(terms))


def format_hamiltonian(h: PauliHamiltonian) -> str:
    return "".join(f"{c!r} {s}\n" for c, s in h.terms)


def load_hamiltonian(path) -> PauliHamiltonian:
    return parse_hamiltonian(Path(path).read_text())
