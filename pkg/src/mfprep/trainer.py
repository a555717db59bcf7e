"""Differentiable rollouts, Adam, and the training loop.

Both rollout modes process a whole batch of instances on one tape. Exact
mode keeps every outcome history as an unnormalized branch, so the loss
sum_b Tr(rho_b H) is the exact expected energy. Sampled mode follows
normalized trajectories and returns a surrogate whose gradient is the
pathwise term plus a score-function term with a leave-one-out baseline.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import quantum as qm
from .config import TrainConfig, ExperimentConfig
from .controller import ControllerParams, ControllerState, encode_outcomes, init_params, lstm_step
from .hamiltonian import PauliHamiltonian, dense_batch, sample_hamiltonian
from . import tensor as tc

log = logging.getLogger(__name__)


class NumericalFailure(FloatingPointError):
    pass


class BranchBudgetError(ValueError):
    pass


@dataclass
class RolloutResult:
    objective: ad.Node  # differentiate this
    energies: np.ndarray  # per-instance (estimated) energy, shape (B,)
    weight_sums: list = field(default_factory=list)  # per measured step, (B,) total branch weight
    states: np.ndarray | None = None  # per-step ensemble states (B, T+1, d, d) if requested
    branch_states: list = field(default_factory=list)


def _batch_inputs(rho0, hams):
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.ndim == 2:
        rho0 = rho0[None]
    if isinstance(hams, PauliHamiltonian):
        hams = [hams] * rho0.shape[0]
    coeffs = np.stack([h.coefficient_vector() for h in hams])
    if len(coeffs) != rho0.shape[0]:
        raise ValueError("need one Hamiltonian per initial state")
    return rho0, coeffs


def _inputs(coeffs_rows, prev_enc):
    return np.concatenate([coeffs_rows, prev_enc], axis=1)


def _outcome_table(layout) -> np.ndarray:
    """Row m is the controller encoding of outcome index m."""
    return np.stack([encode_outcomes(qm.outcome_bits(m, layout.n_anc_m), layout.n_anc_m)
                     for m in range(layout.n_outcomes)])


def _energy(rho, hmats):
    return ad.real(ad.einsum("bij,bji->b", rho, hmats))


def _segment_mean_matrix(owner, n_owner, per_owner_count=None):
    """(n_owner, len(owner)) matrix summing branch values into their instance."""
    m = np.zeros((n_owner, len(owner)))
    m[owner, np.arange(len(owner))] = 1.0
    if per_owner_count is not None:
        m /= per_owner_count
    return m


def rollout_exact(params, rho0, hams, exp: ExperimentConfig, prune_threshold: float = 1e-12,
                  keep_states: bool = False, keep_branches: bool = False) -> RolloutResult:
    """Expected final energy over the full branch tree, averaged over the batch."""
    if exp.exact_branches > 2**20:
        raise BranchBudgetError(f"{exp.exact_branches} branches exceed the exact-mode budget")
    layout = exp.layout
    rho0, coeffs = _batch_inputs(rho0, hams)
    batch, d = rho0.shape[0], rho0.shape[-1]
    if d != layout.sys_dim:
        raise tc.ShapeError(f"initial state dimension {d} does not match {layout.n_sys} system qubits")
    hmats = dense_batch(coeffs)
    n_out = layout.n_outcomes
    enc_table = _outcome_table(layout)
    hidden_width = ad.value(params[1] if not isinstance(params, ControllerParams) else params.w_h).shape[1]

    owner = np.arange(batch)
    rho = ad.as_node(rho0)
    state = ControllerState.zeros(batch, hidden_width)
    prev = np.zeros((batch, layout.n_anc_m))
    weight_sums = []
    states = [rho0.copy()] if keep_states else None
    branches = []
    for t in range(exp.steps):
        state, theta = lstm_step(params, state, _inputs(coeffs[owner], prev))
        v = qm.step_isometry(theta, layout)
        if t < exp.steps - 1:
            kids = ad.reshape(qm.kraus_children(v, rho), (-1, d, d))
            w = np.real(np.trace(kids.value, axis1=-2, axis2=-1))
            parent = np.repeat(np.arange(len(owner)), n_out)
            outcome = np.tile(np.arange(n_out), len(owner))
            keep = np.flatnonzero(w >= prune_threshold)
            owner = owner[parent[keep]]
            rho = ad.take(kids, keep, axis=0)
            state = state.take(parent[keep])
            prev = enc_table[outcome[keep]]
            weight_sums.append(np.bincount(owner, weights=w[keep], minlength=batch))
        else:
            rho = qm.kraus_final(v, rho)
        if keep_states:
            agg = np.zeros((batch, d, d), dtype=complex)
            np.add.at(agg, owner, ad.value(rho))
            states.append(agg)
        if keep_branches:
            branches.append((owner.copy(), ad.value(rho).copy()))
    e_branch = _energy(rho, hmats[owner])
    per_instance = ad.einsum("ij,j->i", _segment_mean_matrix(owner, batch), e_branch)
    objective = ad.mean(per_instance)
    return RolloutResult(objective, np.asarray(per_instance.value, dtype=float), weight_sums,
                         np.stack(states, axis=1) if keep_states else None, branches)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    total = probs.sum(axis=1)
    if np.any(np.all(probs < qm.PROB_FLOOR, axis=1)):
        raise qm.DeadBranchError("a trajectory reached a state with no admissible outcome")
    cdf = np.cumsum(probs / total[:, None], axis=1)
    u = rng.random(len(probs))[:, None]
    return np.minimum(np.sum(cdf < u, axis=1), probs.shape[1] - 1)


def rollout_sampled(params, rho0, hams, exp: ExperimentConfig, trajectories: int,
                    rng: np.random.Generator, baseline: bool = True,
                    keep_states: bool = False) -> RolloutResult:
    """Monte-Carlo rollout over ``trajectories`` per instance.

    ``objective`` is a surrogate: its value is not the energy but its gradient
    is an unbiased estimate of d E / d params. ``energies`` holds the
    per-instance trajectory means.
    """
    layout = exp.layout
    rho0, coeffs = _batch_inputs(rho0, hams)
    batch, d = rho0.shape[0], rho0.shape[-1]
    if d != layout.sys_dim:
        raise tc.ShapeError(f"initial state dimension {d} does not match {layout.n_sys} system qubits")
    hmats = dense_batch(coeffs)
    n_out = layout.n_outcomes
    hidden_width = ad.value(params[1] if not isinstance(params, ControllerParams) else params.w_h).shape[1]

    enc_table = _outcome_table(layout)
    m_traj = trajectories
    owner = np.repeat(np.arange(batch), m_traj)
    n_tr = len(owner)
    rho = ad.as_node(rho0[owner])
    state = ControllerState.zeros(n_tr, hidden_width)
    prev = np.zeros((n_tr, layout.n_anc_m))
    log_p = None
    states = [rho0.copy()] if keep_states else None
    for t in range(exp.steps):
        state, theta = lstm_step(params, state, _inputs(coeffs[owner], prev))
        v = qm.step_isometry(theta, layout)
        if t < exp.steps - 1:
            kids = qm.kraus_children(v, rho)
            if n_out == 1:
                rho = ad.reshape(kids, (n_tr, d, d))
            else:
                probs = np.maximum(np.real(np.trace(kids.value, axis1=-2, axis2=-1)), 0.0)
                m = _sample_rows(probs, rng)
                sel = ad.take(ad.reshape(kids, (n_tr * n_out, d, d)), np.arange(n_tr) * n_out + m, axis=0)
                p_sel = ad.trace_real(sel)
                rho = ad.divide(sel, ad.reshape(p_sel, (n_tr, 1, 1)))
                lp = ad.log(p_sel)
                log_p = lp if log_p is None else ad.add(log_p, lp)
                prev = enc_table[m]
        else:
            rho = qm.kraus_final(v, rho)
        if keep_states:
            states.append(ad.value(rho).reshape(batch, m_traj, d, d).mean(axis=1))
    energy = _energy(rho, hmats[owner])
    ev = energy.value.reshape(batch, m_traj)
    surrogate = energy
    if log_p is not None:
        if baseline and m_traj > 1:
            b = (ev.sum(axis=1, keepdims=True) - ev) / (m_traj - 1)
        else:
            b = np.zeros_like(ev)
        adv = (ev - b).ravel()
        surrogate = ad.add(energy, ad.multiply(adv, log_p))
    objective = ad.mean(surrogate)
    return RolloutResult(objective, ev.mean(axis=1), [], np.stack(states, axis=1) if keep_states else None)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, moments: AdamState, lr=1e-3, beta1=0.9,
              beta2=0.999, eps=1e-8):
    if params.shape != grads.shape or params.shape != moments.m.shape:
        raise ValueError("adam_step: shape mismatch")
    t = moments.t + 1
    m = beta1 * moments.m + (1.0 - beta1) * grads
    v = beta2 * moments.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# -- sampling ----------------------------------------------------------------


def sample_initial_state(exp: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    if exp.init_mode == "pure":
        return qm.random_pure_state(exp.n_sys, rng)
    return qm.random_mixed_state(exp.n_sys, exp.mixture, rng)


def sample_batch(exp: ExperimentConfig, size: int, rng: np.random.Generator):
    hams = [sample_hamiltonian(exp.n_sys, rng) for _ in range(size)]
    rho0 = np.stack([sample_initial_state(exp, rng) for _ in range(size)])
    return rho0, hams


def ground_energies(hams) -> np.ndarray:
    coeffs = np.stack([h.coefficient_vector() for h in hams])
    w, _ = tc.hermitian_eig(dense_batch(coeffs))
    return w[:, 0]


def rollout(params, rho0, hams, cfg: TrainConfig, rng, keep_states=False) -> RolloutResult:
    if cfg.resolved_mode == "exact":
        return rollout_exact(params, rho0, hams, cfg.experiment, cfg.prune_threshold, keep_states)
    return rollout_sampled(params, rho0, hams, cfg.experiment, cfg.trajectories, rng, keep_states=keep_states)


def loss_and_grad(params: ControllerParams, rho0, hams, cfg: TrainConfig, rng):
    """Returns (per-instance energies, flat gradient of the batch-mean energy)."""
    with ad.Tape() as tape:
        leaves = [tape.variable(a) for a in params.arrays()]
        res = rollout(leaves, rho0, hams, cfg, rng)
    tape.backward(res.objective)
    return res.energies, np.concatenate([np.ravel(x.grad) for x in leaves])


# -- training loop -----------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    epoch: int
    params: ControllerParams
    adam: AdamState
    rng_state: dict
    loss_history: np.ndarray
    gap_history: np.ndarray

    def save(self, path):
        from .checkpoint import save_checkpoint

        save_checkpoint(self, path)

    @staticmethod
    def load(path) -> "Checkpoint":
        from .checkpoint import load_checkpoint

        return load_checkpoint(path)


METRICS_HEADER = ("epoch", "mean_loss", "mean_gap_to_Emin", "wall_ms")


def initial_checkpoint(cfg: TrainConfig) -> Checkpoint:
    exp = cfg.experiment
    rng = np.random.default_rng(cfg.seed)
    params = init_params(exp.input_width, exp.hidden, exp.output_width, rng.integers(2**63))
    return Checkpoint(cfg, 0, params, AdamState.zeros(params.count), rng.bit_generator.state,
                      np.zeros(0), np.zeros(0))


def train(cfg: TrainConfig, out_dir=None, resume: Checkpoint | None = None, progress=None) -> Checkpoint:
    """Adam on batch-mean energy with fresh (rho0, H) samples every epoch.

    Writes ``metrics.csv`` and periodic ``checkpoint.bin`` under ``out_dir``
    when given. ``progress(epoch, mean_loss, mean_gap)`` is called per epoch.
    """
    cfg.validate()
    ck = resume or initial_checkpoint(cfg)
    rng = np.random.default_rng()
    rng.bit_generator.state = ck.rng_state
    flat = ck.params.flatten()
    adam = ck.adam
    losses = list(ck.loss_history)
    gaps = list(ck.gap_history)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        fresh = ck.epoch == 0 or not metrics_path.exists()
        metrics_file = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.writer(metrics_file)
        if fresh:
            writer.writerow(METRICS_HEADER)
    params = ck.params
    epoch = ck.epoch
    try:
        for epoch in range(ck.epoch + 1, cfg.epochs + 1):
            start = time.perf_counter()
            rho0, hams = sample_batch(cfg.experiment, cfg.batch_size, rng)
            params = params.unflatten(flat)
            energies, grad = loss_and_grad(params, rho0, hams, cfg, rng)
            mean_loss = float(np.mean(energies))
            if not np.isfinite(mean_loss) or not np.all(np.isfinite(grad)):
                dump = out_dir / "failure_dump.npz" if out_dir is not None else None
                if dump is not None:
                    np.savez(dump, params=flat, grad=grad, energies=energies, rho0=rho0,
                             coeffs=np.stack([h.coefficient_vector() for h in hams]))
                raise NumericalFailure(f"non-finite loss or gradient at epoch {epoch} (dump: {dump})")
            flat, adam = adam_step(flat, grad, adam, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            gap = float(np.mean(energies - ground_energies(hams)))
            losses.append(mean_loss)
            gaps.append(gap)
            wall_ms = (time.perf_counter() - start) * 1e3
            if metrics_file is not None:
                writer.writerow([epoch, repr(mean_loss), repr(gap), f"{wall_ms:.3f}"])
            if progress is not None:
                progress(epoch, mean_loss, gap)
            if out_dir is not None and epoch % cfg.checkpoint_every == 0:
                metrics_file.flush()
                Checkpoint(cfg, epoch, params.unflatten(flat), adam, rng.bit_generator.state,
                           np.array(losses), np.array(gaps)).save(out_dir / "checkpoint.bin")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    final = Checkpoint(cfg, max(epoch, ck.epoch), params.unflatten(flat), adam, rng.bit_generator.state,
                       np.array(losses), np.array(gaps))
    if out_dir is not None:
        final.save(out_dir / "checkpoint.bin")
    return final
