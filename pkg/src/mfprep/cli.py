"""Command-line entry point: ``mfprep {train,eval,rollout,oracle,ablation}``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")


def _pin_threads() -> None:
    # only effective before numpy is first imported (true for the console script)
    for var in _THREAD_VARS:
        os.environ[var] = "1"


def _parse_cells(text: str) -> list[tuple[int, int]]:
    cells = []
    for item in text.split(","):
        a, _, b = item.strip().partition(":")
        try:
            cells.append((int(a), int(b)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad cell {item!r}, expected N_anc:N_anc_m") from None
    return cells


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfprep", description=__doc__)
    p.add_argument("--config", help="key = value config file (may start with 'preset = name')")
    p.add_argument("--preset", default="single", help="preset used when --config is absent (single|two)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="training seed (train/ablation) or sampling seed (eval/rollout)")
    p.add_argument("--deterministic", action="store_true", help="pin math libraries to one thread")
    p.add_argument("--out-dir", default=".", help="directory for outputs (default: cwd)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a controller, writing metrics.csv and checkpoint.bin")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")

    def eval_opts(q):
        q.add_argument("--samples", type=int, default=100)
        q.add_argument("--trajectories", type=int, default=64)
        q.add_argument("--mode", choices=("sampled", "exact"), default="sampled")
        q.add_argument("--source", choices=("family", "random"), help="default: family for 1 qubit")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a seeded test set")
    e.add_argument("checkpoint")
    eval_opts(e)

    r = sub.add_parser("rollout", help="dump per-step states and metrics for one instance")
    r.add_argument("checkpoint")
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--hamiltonian", help="Hamiltonian text file")
    g.add_argument("--theta", type=float, help="single-qubit family member")
    r.add_argument("--initial", choices=("zero", "mixed", "random"), default="random",
                   help="initial state: |0..0>, maximally mixed, or drawn per the config")
    r.add_argument("--trajectories", type=int, default=1024, help="used when exact mode is too large")

    o = sub.add_parser("oracle", help="print E_min and the ground state of a Hamiltonian")
    g = o.add_mutually_exclusive_group(required=True)
    g.add_argument("hamiltonian", nargs="?", help="Hamiltonian text file")
    g.add_argument("--theta", type=float, help="single-qubit family member")

    a = sub.add_parser("ablation", help="train and evaluate a grid of ancilla allocations")
    a.add_argument("--cells", type=_parse_cells, help="comma list of N_anc:N_anc_m (default: full grid)")
    a.add_argument("--restarts", type=int, default=3)
    eval_opts(a)
    a.add_argument("--quiet", action="store_true")
    return p


def _load_cfg(args):
    from .config import PRESETS, ConfigError, load_config, with_overrides

    if args.config:
        cfg = load_config(args.config)
    else:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}")
        cfg = PRESETS[args.preset]
    if args.set:
        pairs = {}
        for item in args.set:
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            pairs[key.strip()] = val.strip()
        cfg = with_overrides(cfg, pairs)
    if args.seed is not None and args.command in ("train", "ablation"):
        cfg = with_overrides(cfg, {"seed": args.seed})
    return cfg.validate()


def _test_spec(args, cfg):
    from .evaluate import TestSpec, default_test_spec

    kw = dict(samples=args.samples, trajectories=args.trajectories, mode=args.mode)
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.source:
        return TestSpec(source=args.source, **kw)
    return default_test_spec(cfg, **kw)


def _print_progress(prefix=""):
    def cb(epoch, loss, gap):
        if epoch % 100 == 0:
            print(f"{prefix}epoch {epoch:6d}  loss {loss:+.5f}  gap {gap:.5f}", flush=True)
    return cb


def cmd_train(args, out: Path) -> int:
    from .trainer import Checkpoint, train

    resume = Checkpoint.load(args.resume) if args.resume else None
    cfg = resume.config if resume and not (args.config or args.set) else _load_cfg(args)
    ck = train(cfg, out, resume=resume, progress=None if args.quiet else _print_progress())
    gaps = ck.gap_history
    tail = float(gaps[-100:].mean()) if len(gaps) else float("nan")
    print(f"trained {ck.epoch} epochs; mean gap over last 100 epochs {tail:.5f}; wrote {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args, out: Path) -> int:
    from .evaluate import evaluate, write_report
    from .trainer import Checkpoint

    ck = Checkpoint.load(args.checkpoint)
    spec = _test_spec(args, ck.config)
    summary = write_report(evaluate(ck, spec), out)
    print(f"mean fidelity {summary['mean_fidelity']:.4f} +- {summary['std_fidelity']:.4f}  "
          f"mean gap {summary['mean_energy_gap']:.5f}  ({summary['samples']} samples)")
    return EXIT_OK


def cmd_rollout(args, out: Path) -> int:
    import numpy as np

    from .evaluate import bloch_coordinates, fidelity, zz_expectation
    from .hamiltonian import ground, load_hamiltonian, test_family_single_qubit, to_dense
    from .trainer import Checkpoint, rollout_exact, rollout_sampled, sample_initial_state

    ck = Checkpoint.load(args.checkpoint)
    exp = ck.config.experiment
    h = test_family_single_qubit(args.theta) if args.theta is not None else load_hamiltonian(args.hamiltonian)
    if h.n != exp.n_sys:
        raise ValueError(f"Hamiltonian has {h.n} qubits, checkpoint expects {exp.n_sys}")
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    d = 2**exp.n_sys
    if args.initial == "zero":
        rho0 = np.zeros((d, d), complex)
        rho0[0, 0] = 1
    elif args.initial == "mixed":
        rho0 = np.eye(d, dtype=complex) / d
    else:
        rho0 = sample_initial_state(exp, rng)
    if exp.exact_branches <= 2**16:
        res, mode = rollout_exact(ck.params, rho0[None], [h], exp, keep_states=True), "exact"
    else:
        res = rollout_sampled(ck.params, rho0[None], [h], exp, args.trajectories, rng, keep_states=True)
        mode = f"sampled K={args.trajectories}"
    hm = to_dense(h)
    g = ground(hm)
    states = res.states[0]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rollout_steps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["step", "energy", "fidelity", "purity"]
        head += ["x", "y", "z"] if exp.n_sys == 1 else ["zz"] if exp.n_sys == 2 else []
        w.writerow(head)
        for t, s in enumerate(states):
            row = [t, repr(float(np.real(np.trace(s @ hm)))), repr(fidelity(s, g)),
                   repr(float(np.real(np.trace(s @ s))))]
            if exp.n_sys == 1:
                row += [repr(c) for c in bloch_coordinates(s)]
            elif exp.n_sys == 2:
                row.append(repr(zz_expectation(s)))
            w.writerow(row)
    payload = {"mode": mode, "seed": seed, "E_min": g.energy,
               "states": [{"re": s.real.tolist(), "im": s.imag.tolist()} for s in states]}
    (out / "rollout_states.json").write_text(json.dumps(payload) + "\n")
    print(f"{mode}: final energy {float(np.real(np.trace(states[-1] @ hm))):+.6f}  E_min {g.energy:+.6f}  "
          f"fidelity {fidelity(states[-1], g):.5f}")
    return EXIT_OK


def cmd_oracle(args, out: Path) -> int:
    from .hamiltonian import ground, load_hamiltonian, test_family_single_qubit, to_dense

    h = test_family_single_qubit(args.theta) if args.theta is not None else load_hamiltonian(args.hamiltonian)
    g = ground(to_dense(h))
    print(f"E_min = {g.energy:.12f}")
    print(f"gap   = {g.gap:.12f}")
    if g.subspace.shape[1] > 1:
        print(f"ground subspace is {g.subspace.shape[1]}-fold degenerate; basis columns follow")
    labels = [format(i, f"0{h.n}b") for i in range(2**h.n)]
    for k in range(g.subspace.shape[1]):
        vec = g.subspace[:, k]
        for lab, amp in zip(labels, vec):
            print(f"  |{lab}>  {amp.real:+.10f} {amp.imag:+.10f}i")
        if k + 1 < g.subspace.shape[1]:
            print()
    return EXIT_OK


def cmd_ablation(args, out: Path) -> int:
    from .evaluate import TABLE_CELLS, best_by_cell, run_ablation

    cfg = _load_cfg(args)
    spec = _test_spec(args, cfg)
    cells = args.cells or TABLE_CELLS

    def progress(cell, restart, epoch, loss, gap):
        if not args.quiet and epoch % 500 == 0:
            print(f"cell {cell} restart {restart} epoch {epoch} gap {gap:.5f}", flush=True)

    rows = run_ablation(cfg, cells, args.restarts, spec, out, progress)
    print("N_anc N_anc_m best_mean_fidelity")
    for (n, m), f in best_by_cell(rows).items():
        print(f"{n:5d} {m:7d} {f:.4f}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout, "oracle": cmd_oracle,
            "ablation": cmd_ablation}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        _pin_threads()
    from .checkpoint import CheckpointError
    from .trainer import NumericalFailure

    out = Path(args.out_dir)
    try:
        return COMMANDS[args.command](args, out)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
