"""Metrics, held-out evaluation, restarts and the ancilla-allocation grid."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tc
from .config import TrainConfig, canonical_text
from .hamiltonian import GroundSolution, dense_batch, ground_batch, sample_hamiltonian, test_family_single_qubit
from .trainer import Checkpoint, rollout_exact, rollout_sampled, sample_initial_state, train

FIDELITY_CONVENTION = "squared overlap <g|rho|g>; ground-subspace projector Tr(rho P) when gap < 1e-9"

ZZ = np.kron(tc.Z, tc.Z)


class EvalError(ValueError):
    pass


def fidelity(rho: np.ndarray, g) -> float:
    """Overlap with a ground state (vector), ground projector (matrix) or GroundSolution."""
    rho = tc.as_matrix(rho)
    if isinstance(g, GroundSolution):
        proj = g.projector
    else:
        g = tc.as_matrix(g)
        proj = np.outer(g, g.conj()) if g.ndim == 1 else g
    if proj.shape != rho.shape:
        raise tc.ShapeError(f"fidelity: state {rho.shape} vs target {proj.shape}")
    return float(np.real(np.trace(rho @ proj)))


def bloch_coordinates(rho: np.ndarray) -> tuple[float, float, float]:
    rho = tc.as_matrix(rho)
    if rho.shape != (2, 2):
        raise tc.ShapeError(f"Bloch coordinates need a 2x2 state, got {rho.shape}")
    return tuple(float(np.real(np.trace(rho @ p))) for p in (tc.X, tc.Y, tc.Z))


def zz_expectation(rho: np.ndarray) -> float:
    rho = tc.as_matrix(rho)
    if rho.shape != (4, 4):
        raise tc.ShapeError(f"ZZ expectation needs a 4x4 state, got {rho.shape}")
    return float(np.real(np.trace(rho @ ZZ)))


@dataclass(frozen=True)
class TestSpec:
    __test__ = False  # keep pytest from collecting it

    source: str = "family"  # "family" (single-qubit theta family) or "random"
    samples: int = 100
    seed: int = 20240601
    trajectories: int = 64
    mode: str = "sampled"  # or "exact"


@dataclass
class SampleRecord:
    sample_id: int
    coefficients: np.ndarray
    theta: float | None
    e_min: float
    e_final: float
    fidelity: float
    step_fidelity: list
    step_energy: list
    step_bloch: list | None = None
    step_zz: list | None = None


@dataclass
class EvalReport:
    records: list
    config_text: str
    spec: TestSpec
    fidelity_convention: str = FIDELITY_CONVENTION

    @property
    def fidelities(self) -> np.ndarray:
        return np.array([r.fidelity for r in self.records])

    @property
    def gaps(self) -> np.ndarray:
        return np.array([r.e_final - r.e_min for r in self.records])

    def aggregates(self) -> dict:
        f = self.fidelities
        return {
            "samples": len(self.records),
            "mean_fidelity": float(np.mean(f)),
            "std_fidelity": float(np.std(f)),
            "mean_energy_gap": float(np.mean(self.gaps)),
            "mean_step_fidelity": np.mean([r.step_fidelity for r in self.records], axis=0).tolist(),
            "mean_step_zz": (np.mean([r.step_zz for r in self.records], axis=0).tolist()
                             if self.records and self.records[0].step_zz is not None else None),
        }

    def validate(self, tol: float = 1e-9) -> None:
        for r in self.records:
            if not (-tol <= r.fidelity <= 1 + tol) or any(not (-tol <= f <= 1 + tol) for f in r.step_fidelity):
                raise EvalError(f"sample {r.sample_id}: fidelity out of [0, 1]")
            if r.e_final < r.e_min - tol or any(e < r.e_min - tol for e in r.step_energy):
                raise EvalError(f"sample {r.sample_id}: energy below the ground energy")
            if r.step_bloch is not None and any(math.hypot(*b) > 1 + tol for b in r.step_bloch):
                raise EvalError(f"sample {r.sample_id}: Bloch vector longer than 1")
            if r.step_zz is not None and any(abs(z) > 1 + tol for z in r.step_zz):
                raise EvalError(f"sample {r.sample_id}: ZZ expectation outside [-1, 1]")


def make_test_set(cfg: TrainConfig, spec: TestSpec):
    """Deterministic (rho0, Hamiltonians, thetas) for a named seed."""
    exp = cfg.experiment
    rng = np.random.default_rng(spec.seed)
    if spec.source == "family":
        if exp.n_sys != 1:
            raise EvalError("the theta family is single-qubit only")
        thetas = rng.uniform(0.0, 2 * np.pi, spec.samples)
        hams = [test_family_single_qubit(t) for t in thetas]
    elif spec.source == "random":
        thetas = [None] * spec.samples
        hams = [sample_hamiltonian(exp.n_sys, rng) for _ in range(spec.samples)]
    else:
        raise EvalError(f"unknown test source {spec.source!r}")
    rho0 = np.stack([sample_initial_state(exp, rng) for _ in range(spec.samples)])
    return rho0, hams, list(thetas)


def evaluate(ck: Checkpoint, spec: TestSpec = TestSpec()) -> EvalReport:
    """Roll the trained controller on a fixed test set and record per-step metrics."""
    cfg = ck.config
    exp = cfg.experiment
    if ck.params.input_width != exp.input_width or ck.params.output_width != exp.output_width:
        raise EvalError("checkpoint parameters do not match its experiment layout")
    rho0, hams, thetas = make_test_set(cfg, spec)
    if spec.mode == "exact":
        res = rollout_exact(ck.params, rho0, hams, exp, cfg.prune_threshold, keep_states=True)
    elif spec.mode == "sampled":
        rng = np.random.default_rng([spec.seed, 1])
        res = rollout_sampled(ck.params, rho0, hams, exp, spec.trajectories, rng, keep_states=True)
    else:
        raise EvalError(f"unknown evaluation mode {spec.mode!r}")
    states = res.states  # (B, T+1, d, d)
    coeffs = np.stack([h.coefficient_vector() for h in hams])
    mats = dense_batch(coeffs)
    grounds = ground_batch(mats)
    records = []
    for i, (g, h) in enumerate(zip(grounds, mats)):
        traj = states[i]
        step_f = [fidelity(s, g) for s in traj]
        step_e = [float(np.real(np.trace(s @ h))) for s in traj]
        rec = SampleRecord(i, coeffs[i], thetas[i], g.energy, step_e[-1], step_f[-1], step_f, step_e)
        if exp.n_sys == 1:
            rec.step_bloch = [bloch_coordinates(s) for s in traj]
        if exp.n_sys == 2:
            rec.step_zz = [zz_expectation(s) for s in traj]
        records.append(rec)
    report = EvalReport(records, canonical_text(cfg), spec)
    report.validate()
    return report


def write_report(report: EvalReport, out_dir, prefix: str = "") -> dict:
    """eval_report.csv, bloch_steps.csv (single qubit) and eval_summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps = len(report.records[0].step_fidelity) if report.records else 0
    with open(out_dir / f"{prefix}eval_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["sample_id", "E_min", "E_final", "fidelity"]
        header += [f"fidelity_t{t}" for t in range(steps)]
        header += [f"energy_t{t}" for t in range(steps)]
        has_zz = bool(report.records) and report.records[0].step_zz is not None
        if has_zz:
            header += [f"zz_t{t}" for t in range(steps)]
        w.writerow(header)
        for r in report.records:
            row = [r.sample_id, repr(r.e_min), repr(r.e_final), repr(r.fidelity)]
            row += [repr(x) for x in r.step_fidelity] + [repr(x) for x in r.step_energy]
            if has_zz:
                row += [repr(x) for x in r.step_zz]
            w.writerow(row)
    if report.records and report.records[0].step_bloch is not None:
        with open(out_dir / f"{prefix}bloch_steps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "step", "x", "y", "z"])
            for r in report.records:
                for t, (x, y, z) in enumerate(r.step_bloch):
                    w.writerow([r.sample_id, t, repr(x), repr(y), repr(z)])
    summary = {
        **report.aggregates(),
        "fidelity_convention": report.fidelity_convention,
        "test_spec": asdict(report.spec),
        "config": report.config_text,
    }
    (out_dir / f"{prefix}eval_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def default_test_spec(cfg: TrainConfig, **kw) -> TestSpec:
    source = "family" if cfg.experiment.n_sys == 1 else "random"
    return TestSpec(source=source, **kw)


@dataclass
class RestartResult:
    best: Checkpoint
    best_index: int
    reports: list = field(default_factory=list)

    @property
    def mean_fidelities(self) -> list[float]:
        return [r.aggregates()["mean_fidelity"] for r in self.reports]


def train_with_restarts(cfg: TrainConfig, restarts: int, spec: TestSpec, out_dir=None,
                        progress=None) -> RestartResult:
    """Train ``restarts`` seeds (cfg.seed, cfg.seed+1, ...) and keep the best held-out mean fidelity."""
    cks, reports = [], []
    for r in range(restarts):
        run_cfg = replace(cfg, seed=cfg.seed + r)
        sub = Path(out_dir) / f"restart_{r}" if out_dir is not None else None
        cb = (lambda ep, l, g, r=r: progress(r, ep, l, g)) if progress else None
        ck = train(run_cfg, sub, progress=cb)
        rep = evaluate(ck, spec)
        if sub is not None:
            write_report(rep, sub)
        cks.append(ck)
        reports.append(rep)
    fids = [rep.aggregates()["mean_fidelity"] for rep in reports]
    best = int(np.argmax(fids))
    return RestartResult(cks[best], best, reports)


ABLATION_HEADER = ("N_anc", "N_anc_m", "restart", "mean_fidelity", "selected_flag")
TABLE_CELLS = [(2, 1), (2, 2), (3, 1), (3, 2), (3, 3), (4, 1), (4, 2), (4, 3), (4, 4)]


def run_ablation(base: TrainConfig, cells, restarts: int, spec: TestSpec, out_dir=None,
                 progress=None) -> list[tuple]:
    """Train each (N_anc, N_anc_m) cell ``restarts`` times; rows as in ablation.csv.

    Every cell shares the same test set. Rows of a finished cell are appended
    to ``ablation.csv`` before the next cell starts.
    """
    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(ABLATION_HEADER)
    for n_anc, n_m in cells:
        if not 1 <= n_m <= n_anc:
            raise ValueError(f"invalid cell N_anc={n_anc}, N_anc_m={n_m}")
        cfg = replace(base, experiment=replace(base.experiment, n_anc_m=n_m, n_anc_t=n_anc - n_m)).validate()
        cell_dir = out_dir / f"cell_{n_anc}_{n_m}" if out_dir is not None else None
        cb = (lambda r, ep, l, g, c=(n_anc, n_m): progress(c, r, ep, l, g)) if progress else None
        res = train_with_restarts(cfg, restarts, spec, cell_dir, cb)
        cell_rows = [(n_anc, n_m, r, f, int(r == res.best_index)) for r, f in enumerate(res.mean_fidelities)]
        rows.extend(cell_rows)
        if out_dir is not None:
            with open(out_dir / "ablation.csv", "a", newline="") as fh:
                w = csv.writer(fh)
                for row in cell_rows:
                    w.writerow([row[0], row[1], row[2], repr(row[3]), row[4]])
    return rows


def best_by_cell(rows) -> dict[tuple[int, int], float]:
    out: dict[tuple[int, int], float] = {}
    for n_anc, n_m, _, f, _ in rows:
        out[(n_anc, n_m)] = max(out.get((n_anc, n_m), -np.inf), f)
    return out
