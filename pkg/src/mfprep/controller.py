"""LSTM feedback policy: (Hamiltonian, previous outcomes, memory) -> gate angles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .hamiltonian import PauliHamiltonian

# Manifest order for flattening; gate blocks inside w_x, w_h, b are (input, forget, candidate, output).
PARAM_NAMES = ("w_x", "w_h", "b", "w_out", "b_out")


@dataclass
class ControllerParams:
    input_width: int
    hidden_width: int
    output_width: int
    w_x: np.ndarray  # (4H, I)
    w_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)
    w_out: np.ndarray  # (O, H)
    b_out: np.ndarray  # (O,)

    def __post_init__(self):
        i, h, o = self.input_width, self.hidden_width, self.output_width
        expected = {"w_x": (4 * h, i), "w_h": (4 * h, h), "b": (4 * h,), "w_out": (o, h), "b_out": (o,)}
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @property
    def count(self) -> int:
        return param_count(self.input_width, self.hidden_width, self.output_width)

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in PARAM_NAMES]

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.arrays()])

    def with_arrays(self, arrays) -> "ControllerParams":
        return ControllerParams(self.input_width, self.hidden_width, self.output_width, *arrays)

    def unflatten(self, flat: np.ndarray) -> "ControllerParams":
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.count:
            raise ValueError(f"expected {self.count} parameters, got {flat.size}")
        out, pos = [], 0
        for a in self.arrays():
            out.append(flat[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return self.with_arrays(out)


def param_count(input_width: int, hidden_width: int, output_width: int) -> int:
    return 4 * hidden_width * (input_width + hidden_width + 1) + output_width * (hidden_width + 1)


def init_params(input_width: int, hidden_width: int, output_width: int, seed) -> ControllerParams:
    """Uniform(+-1/sqrt(fan_in)) weights, forget-gate bias 1, other biases 0."""
    if min(input_width, hidden_width, output_width) < 1:
        raise ValueError("widths must be positive")
    rng = np.random.default_rng(seed)
    h = hidden_width
    a = 1.0 / np.sqrt(input_width + hidden_width)
    w_x = rng.uniform(-a, a, size=(4 * h, input_width))
    w_h = rng.uniform(-a, a, size=(4 * h, h))
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0
    a_out = 1.0 / np.sqrt(h)
    w_out = rng.uniform(-a_out, a_out, size=(output_width, h))
    b_out = np.zeros(output_width)
    return ControllerParams(input_width, hidden_width, output_width, w_x, w_h, b, w_out, b_out)


@dataclass
class ControllerState:
    hidden: object  # (B, H) ndarray or Node
    cell: object

    @classmethod
    def zeros(cls, batch: int, hidden_width: int) -> "ControllerState":
        return cls(np.zeros((batch, hidden_width)), np.zeros((batch, hidden_width)))

    def take(self, index) -> "ControllerState":
        """Select/repeat rows (used when branches split or are pruned)."""
        return ControllerState(ad.take(self.hidden, index, axis=0), ad.take(self.cell, index, axis=0))


def encode_outcomes(bits, n_anc_m: int) -> np.ndarray:
    """Outcome bits mapped b -> 1 - 2b; ``None`` (no measurement yet) encodes as zeros."""
    if bits is None:
        return np.zeros(n_anc_m)
    bits = np.asarray(bits)
    if bits.shape[-1] != n_anc_m:
        raise ValueError(f"expected {n_anc_m} outcome bits, got {bits.shape[-1]}")
    return 1.0 - 2.0 * bits


def encode_input(h: PauliHamiltonian, m_prev, n_anc_m: int) -> np.ndarray:
    return np.concatenate([h.coefficient_vector(), encode_outcomes(m_prev, n_anc_m)])


def lstm_step(params, state: ControllerState, x):
    """One LSTM cell update on a batch. ``params`` is a ControllerParams or a list of
    (possibly taped) arrays in manifest order. Returns (new state, theta)."""
    w_x, w_h, b, w_out, b_out = params.arrays() if isinstance(params, ControllerParams) else params
    hdim = ad.value(w_h).shape[1]
    if ad.value(x).shape[-1] != ad.value(w_x).shape[1]:
        raise ValueError(f"input width {ad.value(x).shape[-1]} != {ad.value(w_x).shape[1]}")
    z = ad.matmul(x, ad.transpose(w_x, (1, 0)))
    z = ad.add(z, ad.matmul(state.hidden, ad.transpose(w_h, (1, 0))))
    z = ad.add(z, b)
    i = ad.sigmoid(z[:, :hdim])
    f = ad.sigmoid(z[:, hdim : 2 * hdim])
    g = ad.tanh(z[:, 2 * hdim : 3 * hdim])
    o = ad.sigmoid(z[:, 3 * hdim :])
    cell = ad.add(ad.multiply(f, state.cell), ad.multiply(i, g))
    hidden = ad.multiply(o, ad.tanh(cell))
    theta = ad.add(ad.matmul(hidden, ad.transpose(w_out, (1, 0))), b_out)
    return ControllerState(hidden, cell), theta
