"""Register semantics: initial states, step unitaries, ancilla measurement and trace-out.

Qubit order on the joint register is system qubits first, then the measured
(feedback) ancillas, then the traced-out ancillas; qubit 0 is the most
significant bit of a basis index. Outcome bit ``b`` on a measured ancilla
selects the projector ``(1 + s Z)/2`` with ``s = 1 - 2b``, i.e. ``b = 0`` is
``|0>``.

Two routes realize one step of the channel:

* the literal route (``step_channel_exact`` / ``step_channel_sampled``)
  tensors in fresh ancillas, applies the full unitary, projects, and
  partial-traces;
* the isometry route (``step_isometry`` + ``kraus_children``) used by the
  trainer. Since ancillas always enter in ``|0...0>``, only the columns of
  U with ancilla bits 0 matter; those columns, cut into blocks, are Kraus
  operators on the system. The test suite checks the routes agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import tensor as tc

MAX_QUBITS = 6
PROB_FLOOR = 1e-14


class DeadBranchError(FloatingPointError):
    """Every outcome probability is below the numerical floor."""


@dataclass(frozen=True)
class StepLayout:
    n_sys: int
    n_anc_m: int
    n_anc_t: int
    depth: int = 2

    def __post_init__(self):
        if self.n_sys < 1 or self.n_anc_m < 0 or self.n_anc_t < 0 or self.depth < 1:
            raise ValueError(f"invalid layout {self}")
        if self.n_total > MAX_QUBITS:
            raise ValueError(f"register of {self.n_total} qubits exceeds {MAX_QUBITS}")

    @property
    def n_total(self) -> int:
        return self.n_sys + self.n_anc_m + self.n_anc_t

    @property
    def n_anc(self) -> int:
        return self.n_anc_m + self.n_anc_t

    @property
    def parameter_count(self) -> int:
        return self.depth * 2 * self.n_total

    @property
    def sys_dim(self) -> int:
        return 2**self.n_sys

    @property
    def n_outcomes(self) -> int:
        return 2**self.n_anc_m

    @property
    def system_qubits(self) -> list[int]:
        return list(range(self.n_sys))

    @property
    def measured_qubits(self) -> list[int]:
        return list(range(self.n_sys, self.n_sys + self.n_anc_m))

    @property
    def traced_qubits(self) -> list[int]:
        return list(range(self.n_sys + self.n_anc_m, self.n_total))


@dataclass
class BranchState:
    """Unnormalized conditional state; ``weight`` is its outcome-history probability."""

    rho: object  # ndarray or autodiff Node
    weight: float
    history: tuple[tuple[int, ...], ...] = field(default_factory=tuple)


def outcome_bits(index: int, n_bits: int) -> tuple[int, ...]:
    return tuple((index >> (n_bits - 1 - k)) & 1 for k in range(n_bits))


def outcome_index(bits) -> int:
    idx = 0
    for b in bits:
        idx = 2 * idx + int(b)
    return idx


# -- gates -------------------------------------------------------------------


def rx(angle: float) -> np.ndarray:
    return np.cos(angle / 2) * tc.I2 + 1j * np.sin(angle / 2) * tc.X


def ry(angle: float) -> np.ndarray:
    return np.cos(angle / 2) * tc.I2 + 1j * np.sin(angle / 2) * tc.Y


def rz(angle: float) -> np.ndarray:
    return np.cos(angle / 2) * tc.I2 + 1j * np.sin(angle / 2) * tc.Z


def embed(gate: np.ndarray, qubit: int, n: int) -> np.ndarray:
    mats = [tc.I2] * n
    mats[qubit] = gate
    return tc.kron_all(mats)


def controlled(gate: np.ndarray, control: int, target: int, n: int) -> np.ndarray:
    p0 = np.diag([1.0, 0.0]).astype(complex)
    p1 = np.diag([0.0, 1.0]).astype(complex)
    a = [tc.I2] * n
    b = [tc.I2] * n
    a[control] = p0
    b[control] = p1
    b[target] = gate
    return tc.kron_all(a) + tc.kron_all(b)


@lru_cache(maxsize=None)
def cx_chain_source(n: int) -> np.ndarray:
    """Row gather indices of the chain CX(0->1), CX(1->2), ..., as a permutation.

    ``(C @ psi)[i] == psi[src[i]]``.
    """
    idx = np.arange(2**n)
    src = idx.copy()
    # inverse of the chain applies the CXs in reverse order
    for c in reversed(range(n - 1)):
        t = c + 1
        cbit = (src >> (n - 1 - c)) & 1
        src = src ^ (cbit << (n - 1 - t))
    src.setflags(write=False)
    return src


@lru_cache(maxsize=None)
def cx_chain_matrix(n: int) -> np.ndarray:
    m = np.eye(2**n, dtype=complex)[cx_chain_source(n)]
    m.setflags(write=False)
    return m


def split_angles(theta, layout: StepLayout):
    """Angle vector (..., P) -> per-layer (x_angles, y_angles), each (..., N)."""
    n = layout.n_total
    out = []
    for layer in range(layout.depth):
        base = layer * 2 * n
        out.append((ad.slice_(theta, (Ellipsis, slice(base, base + n))),
                    ad.slice_(theta, (Ellipsis, slice(base + n, base + 2 * n)))))
    return out


def _check_theta(theta, layout: StepLayout):
    if ad.value(theta).shape[-1] != layout.parameter_count:
        raise ValueError(
            f"theta has {ad.value(theta).shape[-1]} angles, layout needs {layout.parameter_count}"
        )


def layer_gates(theta, layout: StepLayout):
    """Per-layer single-qubit gates R_y @ R_x, each of shape (..., N, 2, 2)."""
    _check_theta(theta, layout)
    return [ad.matmul(ad.rotation(ya, "Y"), ad.rotation(xa, "X")) for xa, ya in split_angles(theta, layout)]


def build_step_unitary(theta, layout: StepLayout):
    """Full 2^N x 2^N step unitary for a single angle vector (differentiable).

    Each layer applies R_x then R_y on every qubit, then the CX chain.
    """
    if ad.value(theta).ndim != 1:
        raise ValueError("build_step_unitary expects a single angle vector")
    n = layout.n_total
    chain = cx_chain_matrix(n)
    u = None
    for gates in layer_gates(theta, layout):
        full = gates[0]
        for q in range(1, n):
            full = ad.kron(full, gates[q])
        layer = ad.matmul(chain, full)
        u = layer if u is None else ad.matmul(layer, u)
    return u


# -- initial states ----------------------------------------------------------


def random_pure_state(n: int, rng: np.random.Generator, angles=None) -> np.ndarray:
    """R_x then R_z on each qubit of |0...0>, followed by a controlled-R_z chain.

    ``angles`` optionally pins (theta_x[n], phi_z[n], phi_cz[n-1]).
    """
    if n < 1:
        raise ValueError("need at least one qubit")
    if angles is None:
        tx = rng.uniform(0.0, 2 * np.pi, n)
        pz = rng.uniform(0.0, 2 * np.pi, n)
        pc = rng.uniform(0.0, 2 * np.pi, n - 1)
    else:
        tx, pz, pc = (np.asarray(a, dtype=float) for a in angles)
    psi = np.zeros(2**n, dtype=complex)
    psi[0] = 1.0
    psi = tc.kron_all([rz(pz[q]) @ rx(tx[q]) for q in range(n)]) @ psi
    for c in range(n - 1):
        psi = controlled(rz(pc[c]), c, c + 1, n) @ psi
    return np.outer(psi, psi.conj())


def random_mixed_state(n: int, q: int, rng: np.random.Generator) -> np.ndarray:
    """Mixture of q random pure states with weights drawn uniformly from the simplex."""
    if q < 1:
        raise ValueError("mixture needs at least one component")
    weights = rng.dirichlet(np.ones(q)) if q > 1 else np.ones(1)
    rho = np.zeros((2**n, 2**n), dtype=complex)
    for w in weights:
        rho += w * random_pure_state(n, rng)
    return rho


def ancilla_reset(layout: StepLayout) -> np.ndarray:
    d = 2**layout.n_anc
    r = np.zeros((d, d), dtype=complex)
    r[0, 0] = 1.0
    return r


def projector(bits, layout: StepLayout) -> np.ndarray:
    """Full-register projector for outcome ``bits`` on the measured ancillas."""
    bits = tuple(bits)
    if len(bits) != layout.n_anc_m:
        raise ValueError(f"expected {layout.n_anc_m} outcome bits, got {len(bits)}")
    mats = [tc.I2] * layout.n_total
    for q, b in zip(layout.measured_qubits, bits):
        s = 1 - 2 * int(b)
        mats[q] = 0.5 * (tc.I2 + s * tc.Z)
    return tc.kron_all(mats)


# -- literal channel route ---------------------------------------------------


def _joint_outputs(branch: BranchState, theta, layout: StepLayout, unitary=None):
    u = build_step_unitary(theta, layout) if unitary is None else unitary
    rho = ad.as_node(branch.rho)
    if ad.value(rho).shape != (layout.sys_dim, layout.sys_dim):
        raise tc.ShapeError(f"branch state {ad.value(rho).shape} does not fit {layout.n_sys} system qubits")
    joint = ad.kron(rho, ancilla_reset(layout))
    return ad.matmul(ad.matmul(u, joint), ad.adjoint(u))


def step_channel_exact(branch: BranchState, theta, layout: StepLayout, unitary=None) -> list[BranchState]:
    """All 2**N_anc_m children P_m U (rho x |0><0|) U^H P_m, ancillas traced out."""
    evolved = _joint_outputs(branch, theta, layout, unitary)
    children = []
    for m in range(layout.n_outcomes):
        bits = outcome_bits(m, layout.n_anc_m)
        p = projector(bits, layout)
        proj = ad.matmul(ad.matmul(p, evolved), p)
        sys = ad.partial_trace(proj, layout.n_total, layout.system_qubits)
        w = float(np.real(np.trace(ad.value(sys))))
        children.append(BranchState(sys, w, branch.history + (bits,)))
    return children


def step_channel_final(branch: BranchState, theta, layout: StepLayout, unitary=None) -> BranchState:
    """Last step: unitary, no measurement, every ancilla traced out."""
    evolved = _joint_outputs(branch, theta, layout, unitary)
    sys = ad.partial_trace(evolved, layout.n_total, layout.system_qubits)
    return BranchState(sys, float(np.real(np.trace(ad.value(sys)))), branch.history)


def step_channel_sampled(branch: BranchState, theta, layout: StepLayout, rng: np.random.Generator, unitary=None):
    """Draw one outcome; returns (normalized child, outcome bits, probability)."""
    tr = float(np.real(np.trace(ad.value(branch.rho))))
    if abs(tr - 1.0) > 1e-9:
        raise ValueError(f"sampled step needs a normalized state, trace = {tr}")
    children = step_channel_exact(branch, theta, layout, unitary)
    probs = np.array([max(c.weight, 0.0) for c in children])
    if np.all(probs < PROB_FLOOR):
        raise DeadBranchError("all outcome probabilities vanish")
    m = int(rng.choice(len(probs), p=probs / probs.sum()))
    child = children[m]
    rho = ad.scale(1.0 / child.weight, child.rho) if isinstance(child.rho, ad.Node) else child.rho / child.weight
    return BranchState(rho, 1.0, child.history), child.history[-1], float(probs[m])


# -- isometry route (batched) -----------------------------------------------

def _apply_1q(v, gate, qubit: int, n: int):
    """Apply per-batch gates (B, 2, 2) to qubit axis ``qubit`` of v (B, 2**n, D)."""
    batch, _, cols = ad.value(v).shape
    left = 2**qubit
    right = 2 ** (n - qubit - 1) * cols
    out = ad.apply_gate(gate, ad.reshape(v, (batch, left, 2, right)))
    return ad.reshape(out, (batch, 2**n, cols))


def step_isometry(theta, layout: StepLayout):
    """U restricted to ancilla-zero inputs, for a batch of angle vectors (B, P).

    Returns a Node of shape (B, d_sys, n_outcomes, 2**N_anc_t, d_sys) whose
    [:, :, m, k, :] slices are Kraus operators.
    """
    n = layout.n_total
    batch = ad.value(theta).shape[0]
    ds = layout.sys_dim
    cols = np.arange(ds) * 2**layout.n_anc
    v0 = np.eye(2**n, dtype=complex)[:, cols]
    v = ad.as_node(np.broadcast_to(v0, (batch, 2**n, ds)).copy())
    src = cx_chain_source(n)
    for gates in layer_gates(theta, layout):
        for q in range(n):
            v = _apply_1q(v, gates[:, q], q, n)
        v = ad.take(v, src, axis=1)
    return ad.reshape(v, (batch, ds, layout.n_outcomes, 2**layout.n_anc_t, ds))


def _kraus_stack(v):
    """(B, d, M, K, d) -> (B, M, d, K*d) so that children are W @ V^H per outcome."""
    b, d, m, k, _ = ad.value(v).shape
    return ad.reshape(ad.transpose(v, (0, 2, 1, 3, 4)), (b, m, d, k * d))


def kraus_children(v, rho):
    """Unnormalized children for every outcome: (B, n_outcomes, d, d)."""
    b, d, m, k, _ = ad.value(v).shape
    # W[b, m, i, (k, l)] = sum_j V[b, i, m, k, j] rho[b, j, l]
    w = ad.matmul(ad.reshape(v, (b, d * m * k, d)), rho)
    w = ad.reshape(ad.transpose(ad.reshape(w, (b, d, m, k, d)), (0, 2, 1, 3, 4)), (b, m, d, k * d))
    return ad.matmul(w, ad.adjoint(_kraus_stack(v)))


def kraus_final(v, rho):
    """Channel output with every ancilla traced: (B, d, d)."""
    b, d, m, k, _ = ad.value(v).shape
    flat = ad.reshape(v, (b, d, m * k * d))
    w = ad.reshape(ad.matmul(ad.reshape(v, (b, d * m * k, d)), rho), (b, d, m * k * d))
    return ad.matmul(w, ad.adjoint(flat))
