"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Criteria 6 to 8 train real controllers and take a long time (about an hour for
the single-qubit runs and a few hours for the two-qubit gate on one core).
Outputs are archived under ``artifacts/acceptance`` (override with
``MFPREP_ARTIFACTS``). The full ancilla grid runs only with
``MFPREP_FULL_ABLATION=1``.
"""

import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from mfprep import autodiff as ad
from mfprep import evaluate as ev
from mfprep import hamiltonian as hm
from mfprep import quantum as qm
from mfprep import tensor as tc
from mfprep import trainer as tr
from mfprep.config import PRESETS, ExperimentConfig, TrainConfig
from mfprep.controller import init_params
from conftest import central_difference, random_density, random_hermitian, record_criterion

ARTIFACTS = Path(os.environ.get("MFPREP_ARTIFACTS", Path(__file__).resolve().parents[1] / "artifacts" / "acceptance"))
FULL_GRID = os.environ.get("MFPREP_FULL_ABLATION") == "1"
TEST_SAMPLES = 100


def check(number, name, ok, detail):
    record_criterion(number, name, bool(ok), detail)
    assert ok, detail


def params_for(exp, seed, scale=1.0):
    p = init_params(exp.input_width, exp.hidden, exp.output_width, seed)
    return p.unflatten(scale * p.flatten())


# -- 1: numerical kernels ----------------------------------------------------


def test_criterion_1_numerical_kernels():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_trace = 0.0
    for n in range(1, 7):
        for _ in range(20):
            m = random_density(2**n, rng) * rng.uniform(0.1, 10)
            keep = sorted(rng.choice(n, size=rng.integers(0, n + 1), replace=False).tolist())
            worst_trace = max(worst_trace, abs(np.trace(tc.partial_trace(m, n, keep)) - np.trace(m)))
    worst_res = worst_orth = 0.0
    count = 0
    for n in (2, 4, 8, 16, 64):
        hs = np.stack([random_hermitian(n, rng, scale=rng.uniform(0.1, 10)) for _ in range(200)])
        w, v = tc.hermitian_eig(hs)
        for k in range(len(hs)):
            norm = np.linalg.norm(hs[k])
            worst_res = max(worst_res, np.linalg.norm(hs[k] @ v[k] - v[k] * w[k]) / norm)
            worst_orth = max(worst_orth, np.max(np.abs(v[k].conj().T @ v[k] - np.eye(n))))
            count += 1
    elapsed = time.perf_counter() - start
    ok = worst_trace <= 1e-12 and worst_res <= 1e-9 and count == 1000 and elapsed < 60
    check(1, "numerical kernels", ok,
          f"trace err {worst_trace:.2e} (<=1e-12), eig residual/|H|_F {worst_res:.2e} (<=1e-9) on {count} "
          f"matrices, orthonormality {worst_orth:.1e}, {elapsed:.1f}s (<60s)")


# -- 2: channel ----------------------------------------------------------------


def test_criterion_2_channel():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    layouts = [qm.StepLayout(1, 1, 0), qm.StepLayout(1, 2, 2), qm.StepLayout(2, 2, 2), qm.StepLayout(2, 1, 1),
               qm.StepLayout(1, 3, 0)]
    complete = True
    for lay in layouts:
        total = sum(qm.projector(qm.outcome_bits(m, lay.n_anc_m), lay) for m in range(lay.n_outcomes))
        complete &= bool(np.array_equal(total, np.eye(2**lay.n_total)))
    worst_w = worst_herm = 0.0
    min_eig = np.inf
    for lay in layouts[:4]:
        tree = [qm.BranchState(random_density(lay.sys_dim, rng), 1.0)]
        for _ in range(4):
            theta = rng.uniform(-np.pi, np.pi, lay.parameter_count)
            tree = [kid for br in tree for kid in qm.step_channel_exact(br, theta, lay) if kid.weight > 1e-12]
            worst_w = max(worst_w, abs(sum(b.weight for b in tree) - 1))
            for b in tree:
                rho = ad.value(b.rho)
                worst_herm = max(worst_herm, np.max(np.abs(rho - rho.conj().T)))
                min_eig = min(min_eig, np.linalg.eigvalsh((rho + rho.conj().T) / 2).min())
    # also through full trained-style rollouts on the fast path
    exp = ExperimentConfig(1, 2, 2, 5, hidden=16)
    res = tr.rollout_exact(params_for(exp, 3, 3.0), *tr.sample_batch(exp, 8, rng), exp, keep_branches=True)
    for ws in res.weight_sums:
        worst_w = max(worst_w, np.max(np.abs(ws - 1)))
    for _, rhos in res.branch_states:
        worst_herm = max(worst_herm, np.max(np.abs(rhos - np.conj(np.swapaxes(rhos, -1, -2)))))
        min_eig = min(min_eig, np.linalg.eigvalsh((rhos + np.conj(np.swapaxes(rhos, -1, -2))) / 2).min())
    worst_discard = 0.0
    for lay in layouts:
        for _ in range(10):
            rho = random_density(lay.sys_dim, rng)
            theta = rng.normal(size=lay.parameter_count) * 3
            summed = sum(ad.value(k.rho) for k in qm.step_channel_exact(qm.BranchState(rho, 1.0), theta, lay))
            u = ad.value(qm.build_step_unitary(theta, lay))
            traced = tc.partial_trace(u @ np.kron(rho, qm.ancilla_reset(lay)) @ u.conj().T, lay.n_total,
                                      lay.system_qubits)
            worst_discard = max(worst_discard, np.max(np.abs(summed - traced)))
    elapsed = time.perf_counter() - start
    ok = complete and worst_w <= 1e-9 and worst_herm <= 1e-9 and min_eig >= -1e-9 and worst_discard <= 1e-10 \
        and elapsed < 60
    check(2, "channel", ok,
          f"sum P_m = I exactly: {complete}; weight-sum err {worst_w:.1e}; hermiticity {worst_herm:.1e}; "
          f"min eig {min_eig:.1e}; measure-discard vs trace-out {worst_discard:.1e}; {elapsed:.1f}s")


# -- 3: gradient ---------------------------------------------------------------


def test_criterion_3_gradient():
    start = time.perf_counter()
    exp = ExperimentConfig(1, 2, 2, 2)  # single-qubit layout, default widths, T = 2
    rng = np.random.default_rng(303)
    p = params_for(exp, 7, 2.0)
    rho0, hams = tr.sample_batch(exp, 4, rng)
    _, grad = tr.loss_and_grad(p, rho0, hams, TrainConfig(exp, mode="exact"), None)
    idx = rng.choice(p.count, 200, replace=False)
    flat = p.flatten()

    def f(sub):
        x = flat.copy()
        x[idx] = sub
        return float(tr.rollout_exact(p.unflatten(x), rho0, hams, exp).objective.value)

    fd = central_difference(f, flat[idx], h=1e-5)
    err = np.abs(grad[idx] - fd)
    within = err <= 1e-4 * np.abs(fd) + 1e-7
    big = np.abs(fd) > 1e-5
    rel_big = float(np.max(err[big] / np.abs(fd[big]))) if big.any() else 0.0
    elapsed = time.perf_counter() - start
    ok = bool(within.all()) and rel_big <= 1e-4 and elapsed < 300
    check(3, "gradient vs finite differences", ok,
          f"{within.sum()}/200 params within rel 1e-4 (abs floor 1e-7); max rel err on {big.sum()} params "
          f"with |g|>1e-5: {rel_big:.2e}; {elapsed:.1f}s (<300s)")


# -- 4: estimator ----------------------------------------------------------------


def test_criterion_4_estimator():
    start = time.perf_counter()
    exp = ExperimentConfig(1, 1, 2, 3)
    rng = np.random.default_rng(404)
    p = params_for(exp, 11, 3.0)
    rho0, hams = tr.sample_batch(exp, 4, rng)
    exact = tr.rollout_exact(p, rho0, hams, exp)
    exact_loss = float(exact.objective.value)

    # loss: 10^5 trajectories, 25000 per instance
    per = 25_000
    energies = []
    for i in range(4):
        res = tr.rollout_sampled(p, np.repeat(rho0[i : i + 1], per, axis=0), [hams[i]] * per, exp, 1, rng)
        energies.append(res.energies)
    energies = np.array(energies)
    est_loss = energies.mean()
    se_loss = np.sqrt(np.sum(energies.var(axis=1, ddof=1) / per)) / 4
    z_loss = (est_loss - exact_loss) / se_loss

    # gradient: 200 independent estimates at the training trajectory count
    _, g_exact = tr.loss_and_grad(p, rho0, hams, TrainConfig(exp, mode="exact"), None)
    samples = []
    for _ in range(200):
        with ad.Tape() as tape:
            leaves = [tape.variable(a) for a in p.arrays()]
            res = tr.rollout_sampled(leaves, rho0, hams, exp, 32, rng)
        tape.backward(res.objective)
        samples.append(np.concatenate([np.ravel(x.grad) for x in leaves]))
    samples = np.array(samples)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    # parameters the energy does not depend on carry pure roundoff in both estimators
    floor = 1e-12 * np.max(np.abs(g_exact))
    roundoff = (np.abs(g_exact) < floor) & (np.max(np.abs(samples), axis=0) < floor)
    roundoff_ok = bool(np.all(np.abs(mean[roundoff] - g_exact[roundoff]) <= floor))
    z = (mean[~roundoff] - g_exact[~roundoff]) / se[~roundoff]
    n_out = int(np.sum(np.abs(z) > 3))
    # with ~10^4 correlated coordinates a few 3-SE excursions are expected; cap them at the Gaussian rate
    nominal = 2 * stats.norm.sf(3)
    top = np.argsort(-np.abs(g_exact))[:10]
    z_top = (mean[top] - g_exact[top]) / se[top]
    dirs = rng.normal(size=(10, g_exact.size))
    proj = samples @ dirs.T
    z_dir = (proj.mean(axis=0) - dirs @ g_exact) / (proj.std(axis=0, ddof=1) / np.sqrt(len(samples)))
    elapsed = time.perf_counter() - start
    ok = abs(z_loss) <= 3 and n_out <= nominal * z.size and np.all(np.abs(z_top) <= 3) \
        and np.all(np.abs(z_dir) <= 3) and roundoff_ok and elapsed < 600
    check(4, "sampled vs exact estimator", ok,
          f"loss z={z_loss:+.2f} (10^5 traj); gradient: {n_out}/{z.size} coords beyond 3 SE "
          f"(cap {nominal * z.size:.0f}), {int(roundoff.sum())} roundoff-level coords agree: {roundoff_ok}, top-10 max |z|={np.max(np.abs(z_top)):.2f}, "
          f"10 projections max |z|={np.max(np.abs(z_dir)):.2f}; {elapsed:.1f}s (<600s)")


# -- 5: variational bound -----------------------------------------------------------


def test_criterion_5_variational_bound():
    rng = np.random.default_rng(505)
    worst = np.inf
    count = 0
    configs = [ExperimentConfig(1, 2, 2, 5, hidden=16), ExperimentConfig(1, 1, 0, 3, hidden=8),
               ExperimentConfig(2, 1, 1, 4, init_mode="pure", hidden=16),
               ExperimentConfig(2, 2, 2, 3, init_mode="pure", hidden=8),
               ExperimentConfig(3, 1, 1, 2, init_mode="mixed", hidden=8)]
    for exp in configs:
        for seed in range(3):
            p = params_for(exp, seed, scale=[0.5, 3.0, 10.0][seed])
            rho0, hams = tr.sample_batch(exp, 6, rng)
            emin = tr.ground_energies(hams)
            hmats = hm.dense_batch(np.stack([h.coefficient_vector() for h in hams]))
            res = tr.rollout_exact(p, rho0, hams, exp, keep_states=True, keep_branches=True)
            worst = min(worst, np.min(res.energies - emin))
            step_e = np.real(np.einsum("btij,bji->bt", res.states, hmats))
            worst = min(worst, np.min(step_e - emin[:, None]))
            owner, rhos = res.branch_states[-1]
            w = np.real(np.trace(rhos, axis1=-2, axis2=-1))
            e_b = np.real(np.einsum("bij,bji->b", rhos, hmats[owner]))
            live = w > 1e-9
            worst = min(worst, np.min(e_b[live] / w[live] - emin[owner[live]]))
            samp = tr.rollout_sampled(p, rho0, hams, exp, 16, rng, keep_states=True)
            worst = min(worst, np.min(samp.energies - emin))
            count += len(res.energies) * (exp.steps + 2) + int(live.sum()) + len(samp.energies)
    # short training runs in both modes: every recorded gap is E - E_min
    for mode in ("exact", "sampled"):
        ck = tr.train(TrainConfig(ExperimentConfig(1, 2, 2, 5, hidden=16), mode=mode, epochs=20, batch_size=8))
        worst = min(worst, np.min(ck.gap_history))
        count += len(ck.gap_history)
    ok = worst >= -1e-9
    check(5, "variational bound", ok, f"min (E - E_min) = {worst:+.3e} over {count} energies (>= -1e-9)")


# -- 6 to 8: experiments ---------------------------------------------------------


@pytest.fixture(scope="module")
def single_qubit_runs():
    cfg = PRESETS["single"]
    spec = ev.TestSpec("family", samples=TEST_SAMPLES)
    out = ARTIFACTS / "single_qubit"
    res = ev.train_with_restarts(cfg, 3, spec, out)
    summary = ev.write_report(res.reports[res.best_index], out / "best")
    summary["best_restart"] = res.best_index
    (out / "best" / "restarts.json").write_text(json.dumps({"mean_fidelity": res.mean_fidelities}, indent=2))
    return res, summary


def test_criterion_6_single_qubit(single_qubit_runs):
    res, summary = single_qubit_runs
    fid, gap = summary["mean_fidelity"], summary["mean_energy_gap"]
    trend = []
    for rep_ck in [res.best]:
        loss = rep_ck.loss_history
        tenth = max(1, len(loss) // 10)
        trend.append(np.median(loss[-tenth:]) < np.median(loss[:tenth]))
    ok = fid >= 0.90 and gap <= 0.1 and all(trend)
    fids = ", ".join(f"{f:.4f}" for f in res.mean_fidelities)
    check(6, "single-qubit experiment", ok,
          f"best of 3 restarts (restart {res.best_index}): mean fidelity {fid:.4f} (>=0.90), mean E-E_min "
          f"{gap:.4f} (<=0.1) on {summary['samples']} theta-family samples; restart fidelities [{fids}]; "
          f"late-vs-early loss trend ok: {all(trend)}")


def _ablation(cells, out):
    spec = ev.TestSpec("random", samples=TEST_SAMPLES)
    rows = ev.run_ablation(PRESETS["two"], cells, 3, spec, out)
    return rows, ev.best_by_cell(rows)


@pytest.fixture(scope="module")
def two_qubit_gate():
    return _ablation([(2, 1), (2, 2)], ARTIFACTS / "two_qubit_gate")


def test_criterion_7_two_qubit_gate(two_qubit_gate):
    _, best = two_qubit_gate
    all_measured, best_cell = best[(2, 2)], max(best.values())
    ok = all_measured < best_cell
    check("7 (N_anc=2 gate)", "two-qubit ancilla allocation", ok,
          f"best mean fidelity N_anc_m=1: {best[(2, 1)]:.4f}, N_anc_m=2 (all measured): {best[(2, 2)]:.4f}; "
          f"all-measured strictly below best: {ok} (reference 0.853 < 0.908)")


@pytest.mark.skipif(not FULL_GRID, reason="full ancilla grid runs only with MFPREP_FULL_ABLATION=1")
def test_criterion_7_full_grid():
    _, best = _ablation(ev.TABLE_CELLS, ARTIFACTS / "two_qubit_grid")
    a = {n: best[(n, n)] < max(f for (k, _), f in best.items() if k == n) for n in (2, 3, 4)}
    top = {n: max(f for (k, _), f in best.items() if k == n) for n in (2, 4)}
    b = top[4] > top[2]
    c = best[(4, 3)] >= 0.90
    table = "; ".join(f"({n},{m})={f:.3f}" for (n, m), f in sorted(best.items()))
    check("7 (full grid)", "two-qubit ancilla allocation", all(a.values()) and b and c,
          f"(a) all-measured below best per N_anc: {a}; (b) best N_anc=4 {top[4]:.3f} > N_anc=2 {top[2]:.3f}: {b}; "
          f"(c) cell (4,3) {best[(4, 3)]:.3f} >= 0.90: {c}; {table}")


def test_criterion_8_two_stage_diagnostic(single_qubit_runs, two_qubit_gate):
    res, _ = single_qubit_runs
    rep1 = res.reports[res.best_index]
    bloch = np.array([r.step_bloch for r in rep1.records])  # (samples, T+1, 3)
    f1 = np.array([r.step_fidelity for r in rep1.records])
    gate_dir = ARTIFACTS / "two_qubit_gate"
    rows, best = two_qubit_gate
    cell = max((k for k in best if k[0] == 2), key=lambda k: best[k])
    chosen = [r for r in rows if (r[0], r[1]) == cell and r[4] == 1][0]
    ck2 = tr.Checkpoint.load(gate_dir / f"cell_{cell[0]}_{cell[1]}" / f"restart_{chosen[2]}" / "checkpoint.bin")
    rep2 = ev.evaluate(ck2, ev.TestSpec("random", samples=TEST_SAMPLES))
    ev.write_report(rep2, ARTIFACTS / "two_stage", prefix="two_qubit_")
    ev.write_report(rep1, ARTIFACTS / "two_stage", prefix="single_qubit_")
    zz = np.array([r.step_zz for r in rep2.records])
    f2 = np.array([r.step_fidelity for r in rep2.records])
    diag = {
        "single_qubit": {
            "mean_bloch_per_step": bloch.mean(axis=0).tolist(),
            "bloch_spread_per_step": bloch.std(axis=0).sum(axis=1).tolist(),
            "mean_fidelity_per_step": f1.mean(axis=0).tolist(),
        },
        "two_qubit": {
            "cell": list(cell),
            "mean_zz_per_step": zz.mean(axis=0).tolist(),
            "mean_fidelity_per_step": f2.mean(axis=0).tolist(),
        },
    }
    (ARTIFACTS / "two_stage" / "diagnostic.json").write_text(json.dumps(diag, indent=2) + "\n")
    has_steps = bloch.shape[1] == PRESETS["single"].experiment.steps + 1 and \
        zz.shape[1] == PRESETS["two"].experiment.steps + 1
    archived = all((ARTIFACTS / "two_stage" / name).exists() for name in
                   ("single_qubit_bloch_steps.csv", "two_qubit_eval_report.csv", "diagnostic.json"))
    spread = " ".join(f"{s:.2f}" for s in diag["single_qubit"]["bloch_spread_per_step"])
    zz_line = " ".join(f"{s:+.2f}" for s in diag["two_qubit"]["mean_zz_per_step"])
    check(8, "two-stage diagnostic archived", has_steps and archived,
          f"per-step Bloch spread (1 qubit) [{spread}]; per-step mean ZZ (2 qubits, cell {cell}) [{zz_line}]; "
          f"pattern reported, not asserted; files in {ARTIFACTS / 'two_stage'}")
