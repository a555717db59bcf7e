"""Dense complex linear algebra for small registers (up to 64x64).

Matrices are plain ``numpy.complex128`` arrays: row-major storage of
(real, imag) float64 pairs. Every routine accepts optional leading batch
dimensions unless noted.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_SIDE = 64
_CHUNK_ENTRIES = 2**14

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULI = {"I": I2, "X": X, "Y": Y, "Z": Z}


class ShapeError(ValueError):
    pass


class NotHermitianError(ValueError):
    pass


@dataclass(frozen=True)
class RegisterShape:
    """Qubit register; ``dims`` is all 2s, one per qubit."""

    qubit_count: int

    @property
    def dims(self) -> tuple[int, ...]:
        return (2,) * self.qubit_count

    @property
    def side(self) -> int:
        return 2**self.qubit_count


def as_matrix(a) -> np.ndarray:
    return np.asarray(a, dtype=complex)


def adjoint(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"add: {a.shape} + {b.shape}")
    return a + b


def scale(alpha: complex, a: np.ndarray) -> np.ndarray:
    return alpha * a


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product over the last two axes (batch axes broadcast)."""
    a = as_matrix(a)
    b = as_matrix(b)
    out = a[..., :, None, :, None] * b[..., None, :, None, :]
    lead = out.shape[:-4]
    return out.reshape(*lead, a.shape[-2] * b.shape[-2], a.shape[-1] * b.shape[-1])


def kron_all(mats) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for m in mats:
        out = kron(out, m)
    return out


def trace(a: np.ndarray) -> np.ndarray:
    return np.trace(a, axis1=-2, axis2=-1)


def partial_trace_indices(n: int, keep) -> str:
    """Einsum subscripts tracing out every qubit of an n-qubit square matrix not in ``keep``."""
    keep = sorted(set(keep))
    if keep and (keep[0] < 0 or keep[-1] >= n):
        raise ShapeError(f"keep={keep} invalid for {n} qubits")
    letters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
    rows = list(letters[:n])
    cols = [letters[n + q] if q in keep else rows[q] for q in range(n)]
    out = "".join(rows[q] for q in keep) + "".join(cols[q] for q in keep)
    return "..." + "".join(rows) + "".join(cols) + "->..." + out


def partial_trace(m: np.ndarray, shape: RegisterShape | int, keep) -> np.ndarray:
    """Reduced matrix on the ``keep`` qubits; qubit 0 is the most significant."""
    n = shape.qubit_count if isinstance(shape, RegisterShape) else int(shape)
    m = as_matrix(m)
    side = 2**n
    if m.shape[-2:] != (side, side):
        raise ShapeError(f"partial_trace: matrix {m.shape[-2:]} on {n} qubits")
    lead = m.shape[:-2]
    k = len(set(keep))
    t = m.reshape(*lead, *(2,) * (2 * n))
    out = np.einsum(partial_trace_indices(n, keep), t)
    return out.reshape(*lead, 2**k, 2**k)


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Tournament schedule: n-1 rounds of n/2 disjoint pairs covering all pairs once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        p = np.array([a for a, _ in pairs], dtype=int)
        q = np.array([b for _, b in pairs], dtype=int)
        rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def hermitian_eig(h: np.ndarray, tol: float = 1e-10, max_sweeps: int = 60):
    """Eigen-decomposition of Hermitian matrices by cyclic Jacobi rotations.

    Rotations on disjoint index pairs are applied simultaneously (round-robin
    ordering), so each round is one pair of dense matmuls. Accepts a batch
    ``(..., n, n)``. Returns ascending eigenvalues ``(..., n)`` and
    orthonormal eigenvectors as columns ``(..., n, n)``.
    """
    a = as_matrix(h)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"hermitian_eig: expected square matrix, got {a.shape}")
    n = a.shape[-1]
    if n > MAX_SIDE:
        raise ShapeError(f"hermitian_eig: side {n} exceeds {MAX_SIDE}")
    if not np.all(np.isfinite(a)):
        raise NotHermitianError("hermitian_eig: non-finite entries")
    skew = np.max(np.abs(a - adjoint(a)), initial=0.0)
    if skew > tol:
        raise NotHermitianError(f"hermitian_eig: input not Hermitian (max |h - h^H| = {skew:.3g})")

    lead = a.shape[:-2]
    a = 0.5 * (a + adjoint(a)).reshape(-1, n, n)
    batch = a.shape[0]
    chunk = max(1, _CHUNK_ENTRIES // (n * n))
    if batch > chunk:
        parts = [hermitian_eig(a[i : i + chunk], tol, max_sweeps) for i in range(0, batch, chunk)]
        w = np.concatenate([w for w, _ in parts])
        v = np.concatenate([v for _, v in parts])
        return w.reshape(*lead, n), v.reshape(*lead, n, n)
    v = np.broadcast_to(np.eye(n, dtype=complex), (batch, n, n)).copy()
    norm = np.sqrt(np.sum(np.abs(a) ** 2, axis=(-2, -1)))
    off_mask = ~np.eye(n, dtype=bool)
    rounds = _round_robin(n) if n > 1 else ()
    eps = np.finfo(float).eps

    scale_ = np.maximum(norm, 1e-300)
    prev = np.full(batch, np.inf)
    for sweep in range(max_sweeps):
        off = np.sqrt(np.sum(np.abs(a[:, off_mask]) ** 2, axis=-1)) / scale_
        # converged, or stalled at roundoff level
        if np.all((off <= 1e-14) | ((off <= 1e-12) & (off >= 0.5 * prev))):
            break
        prev = off
        for p, q in rounds:
            apq = a[:, p, q]
            mag = np.abs(apq)
            app = a[:, p, p].real
            aqq = a[:, q, q].real
            live = mag > eps * 1e-3 * np.maximum(norm[:, None], 1e-300)
            safe = np.where(live, mag, 1.0)
            tau = (aqq - app) / (2.0 * safe)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(live, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            phase = np.where(live, np.conj(apq) / safe, 1.0)
            # J restricted to (p, q) is diag(1, phase) @ [[c, s], [-s, c]]
            c_ = c[:, :, None]
            s_ = s[:, :, None]
            ph = phase[:, :, None]
            ap, aq = a[:, :, p], a[:, :, q]
            a[:, :, p] = c_.transpose(0, 2, 1) * ap - (s_ * ph).transpose(0, 2, 1) * aq
            a[:, :, q] = s_.transpose(0, 2, 1) * ap + (c_ * ph).transpose(0, 2, 1) * aq
            ap, aq = a[:, p, :], a[:, q, :]
            a[:, p, :] = c_ * ap - s_ * np.conj(ph) * aq
            a[:, q, :] = s_ * ap + c_ * np.conj(ph) * aq
            vp, vq = v[:, :, p], v[:, :, q]
            v[:, :, p] = c_.transpose(0, 2, 1) * vp - (s_ * ph).transpose(0, 2, 1) * vq
            v[:, :, q] = s_.transpose(0, 2, 1) * vp + (c_ * ph).transpose(0, 2, 1) * vq
    else:
        off = np.sqrt(np.sum(np.abs(a[:, off_mask]) ** 2, axis=-1))
        if np.any(off > 1e-8 * np.maximum(norm, 1e-300)):
            raise RuntimeError("hermitian_eig: Jacobi iteration did not converge")

    w = np.real(np.diagonal(a, axis1=-2, axis2=-1))
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    return w.reshape(*lead, n), v.reshape(*lead, n, n)


def is_hermitian(a: np.ndarray, tol: float = 1e-10) -> bool:
    return bool(np.max(np.abs(a - adjoint(a)), initial=0.0) <= tol)
