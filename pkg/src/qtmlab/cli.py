"""Command-line front end: instance generation, solves, sweeps, combined runs.

Every command is driven by a JSON config plus a seed and emits JSON/CSV only;
identical config and seed reproduce identical bytes. Exit codes: 0 certified,
1 ran but uncertified, 2 usage or parse error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .aggregation import write_transcript
from .analysis import BoundReport, certify_instance
from .core import (
    GeneratorSpec,
    MechanismParams,
    ValueProfile,
    compute_stats,
    generate_instance,
    load_instance,
    save_instance,
)
from .equilibrium import CONVERGED, solve_instance, solve_instance_multistart
from .squap import SquapConfig, StageError, run_impractical_squap, run_practical_squap

__all__ = ["main"]

EXIT_CERTIFIED = 0
EXIT_UNCERTIFIED = 1
EXIT_USAGE = 2
EXIT_SOLVER = 3

BR_SLACK_TOL = 1e-6

SWEEP_COLUMNS = [
    "id",
    "seed",
    "n",
    "m",
    "T",
    "G",
    "D",
    "ppoa",
    "p1",
    "focResidual",
    "brSlack",
    "status",
    "certified",
    "bound_ppoa_spread",
    "margin_ppoa_spread",
    "bound_ppoa_gap",
    "margin_ppoa_gap",
    "bound_p1_half",
    "margin_p1_half",
    "bound_p1_gap",
    "margin_p1_gap",
    "bound_ppoa_m_floor",
    "margin_ppoa_m_floor",
]

BOUNDS_COLUMNS = ["id", "bound", "value", "measured", "margin", "kind", "applicable"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        return f"{x:.17g}"
    return str(x)


def _write_csv(path: Path, schema: str, columns: list[str], rows: list[dict]) -> None:
    lines = [f"# qtmlab-csv-schema: {schema}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col)) for col in columns))
    path.write_text("\n".join(lines) + "\n")


def _write_bounds_csv(path: Path, instance_id: str, reports: list[BoundReport]) -> None:
    rows = [
        {
            "id": instance_id,
            "bound": b.name,
            "value": b.value,
            "measured": b.satisfied_by,
            "margin": b.margin,
            "kind": b.kind,
            "applicable": b.applicable,
        }
        for b in reports
    ]
    _write_csv(path, "bounds-v1", BOUNDS_COLUMNS, rows)


def _load_config(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in {path} at byte {exc.pos}: {exc.msg}")


class UsageError(Exception):
    pass


def _resolve_path(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _params_from(config: dict, profile: ValueProfile) -> MechanismParams:
    c = config.get("c")
    try:
        if c is None or c == "half_max":
            return MechanismParams.half_max(profile)
        return MechanismParams(float(c))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid mechanism parameter: {exc}")


def cmd_generate(config: dict, seed: int, out: Path, base: Path) -> int:
    gen = config.get("generator", {})
    try:
        spec = GeneratorSpec(**gen)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid generator spec: {exc}")
    profile = generate_instance(spec, seed)
    out.mkdir(parents=True, exist_ok=True)
    save_instance(out / config.get("filename", "instance.json"), profile)
    return EXIT_CERTIFIED


def cmd_solve(config: dict, seed: int, out: Path, base: Path, mode: str) -> int:
    if "instance" not in config:
        raise UsageError("solve config needs an 'instance' path")
    try:
        profile, external = load_instance(_resolve_path(base, config["instance"]))
    except FileNotFoundError as exc:
        raise UsageError(f"instance not found: {exc.filename}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in instance at byte {exc.pos}: {exc.msg}")
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid instance: {exc}")

    params = _params_from(config, profile)
    tol = float(config.get("tol", 1e-10))
    with_br = mode == "certified"

    multistart = int(config.get("multistart", 0))
    if multistart > 0:
        solutions = solve_instance_multistart(profile, params, n_starts=multistart, seed=seed, tol=tol, with_br=with_br)
        if not solutions:
            print("solver failure: no fixed point converged", file=sys.stderr)
            return EXIT_SOLVER
        sol = solutions[0]
    else:
        solutions = None
        sol = solve_instance(profile, params, tol=tol, with_br=with_br)

    if sol.status != CONVERGED:
        print(f"solver failure: status {sol.status}", file=sys.stderr)
        return EXIT_SOLVER

    reports = certify_instance(sol, profile, params, external=external, all_solutions=solutions)
    out.mkdir(parents=True, exist_ok=True)
    sol.write_json(out / "certificate.json", seed=seed, params=params)
    _write_bounds_csv(out / "bounds.csv", config.get("id", "instance"), reports)

    certified = (
        sol.foc_residual <= tol
        and (not with_br or sol.br_slack <= BR_SLACK_TOL)
        and all(b.satisfied for b in reports if b.applicable)
        and with_br
    )
    return EXIT_CERTIFIED if certified else EXIT_UNCERTIFIED


def _sweep_row(args: tuple) -> dict:
    """One sweep instance; module-level so process pools can run it."""
    kind, ident, seed, payload, tol = args
    row: dict = {"id": ident, "seed": seed}
    try:
        if kind == "spread":
            spec = GeneratorSpec(family="spread", spread=payload["T"])
            profile = generate_instance(spec, seed)
            params = MechanismParams.half_max(profile)
            sol = solve_instance(profile, params, tol=tol)
            solutions = None
        else:  # uniform family, multi-start fixed point
            spec = GeneratorSpec(family="uniform", n=payload["n"], m=payload["m"])
            profile = generate_instance(spec, seed)
            params = MechanismParams.half_max(profile)
            solutions = solve_instance_multistart(
                profile, params, n_starts=payload.get("starts", 6), seed=seed, tol=tol
            )
            if not solutions:
                row["status"] = "no-convergence"
                row["certified"] = False
                return row
            sol = solutions[0]
        stats = compute_stats(profile)
        reports = certify_instance(sol, profile, params, all_solutions=solutions)
        by_name = {}
        for b in reports:
            by_name.setdefault(b.name, b)
        row.update(
            n=profile.n,
            m=profile.m,
            T=stats.spread,
            G=stats.gap,
            D=stats.disagreement,
            focResidual=sol.foc_residual,
            brSlack=sol.br_slack,
            status=sol.status,
        )
        order = np.argsort(-profile.aggregates, kind="stable")
        row["p1"] = float(sol.p.p[order[0]])
        for name in ("ppoa_spread", "ppoa_gap", "p1_half", "p1_gap", "ppoa_m_floor"):
            if name in by_name:
                row[f"bound_{name}"] = by_name[name].value
                row[f"margin_{name}"] = by_name[name].margin
        if "ppoa_spread" in by_name:
            row["ppoa"] = by_name["ppoa_spread"].satisfied_by
        row["certified"] = sol.status == CONVERGED and all(
            b.satisfied for b in reports if b.applicable
        )
    except Exception as exc:  # per-row failures recorded, sweep continues
        row["status"] = f"error: {exc}"
        row["certified"] = False
    return row


def cmd_sweep(config: dict, seed: int, out: Path, base: Path, jobs: int) -> int:
    kind = config.get("kind", "spread")
    tol = float(config.get("tol", 1e-10))
    tasks: list[tuple] = []
    if kind == "spread":
        grid = config.get("T", [])
        seeds_per = int(config.get("seedsPer", 1))
        if not grid or seeds_per < 1:
            raise UsageError("spread sweep needs a nonempty T grid and seedsPer >= 1")
        for T in grid:
            for j in range(seeds_per):
                s = seed + 1000 * len(tasks) + j
                tasks.append((kind, f"T{T}-s{j}", s, {"T": float(T)}, tol))
    elif kind == "uniform":
        ms = config.get("m", [])
        count = int(config.get("count", 0))
        n = int(config.get("n", 10))
        if not ms or count < 1:
            raise UsageError("uniform sweep needs a nonempty m list and count >= 1")
        idx = 0
        for m in ms:
            for j in range(count):
                tasks.append(
                    (kind, f"m{m}-s{j}", seed + idx, {"n": n, "m": int(m), "starts": int(config.get("starts", 6))}, tol)
                )
                idx += 1
    else:
        raise UsageError(f"unknown sweep kind {kind!r}")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_row, tasks))
    else:
        rows = [_sweep_row(t) for t in tasks]

    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", "sweep-v1", SWEEP_COLUMNS, rows)
    if all(row.get("certified") for row in rows):
        return EXIT_CERTIFIED
    return EXIT_UNCERTIFIED


def cmd_squap(config: dict, seed: int, out: Path, base: Path) -> int:
    if "instance" not in config or "B" not in config:
        raise UsageError("squap config needs 'instance' and 'B'")
    try:
        profile, _ = load_instance(_resolve_path(base, config["instance"]))
    except FileNotFoundError as exc:
        raise UsageError(f"instance not found: {exc.filename}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed JSON in instance at byte {exc.pos}: {exc.msg}")
    except (ValueError, KeyError) as exc:
        raise UsageError(f"invalid instance: {exc}")

    try:
        base_config = SquapConfig(
            aggregation=config.get("aggregation", "market"),
            epsilon=float(config.get("epsilon", 0.25)),
            beta=config.get("beta"),
            c=config.get("c"),
            redistribute=bool(config.get("redistribute", False)),
            seed=seed,
            n_participants=int(config.get("nParticipants", 4)),
            initial=tuple(config["initial"]) if config.get("initial") is not None else None,
            manipulator=config.get("manipulator"),
            variances=tuple(config["variances"]) if config.get("variances") is not None else None,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid squap config: {exc}")

    practical = bool(config.get("practical", False))
    runner = run_practical_squap if practical else run_impractical_squap
    out.mkdir(parents=True, exist_ok=True)

    if "seeds" in config or "epsilons" in config:  # batch sweep: one JSON document per line
        seed_grid = [int(s) for s in config.get("seeds", [seed])]
        eps_grid = [float(e) for e in config.get("epsilons", [base_config.epsilon])]
        runs = []
        try:
            for eps in eps_grid:
                for run_seed in seed_grid:
                    runs.append(
                        runner(
                            profile,
                            config["B"],
                            replace(base_config, seed=run_seed, epsilon=eps, beta=None),
                        )
                    )
        except StageError as exc:
            print(f"solver failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        lines = [json.dumps(r.to_doc(), sort_keys=True) for r in runs]
        (out / "runs.jsonl").write_text("\n".join(lines) + "\n")
        return EXIT_CERTIFIED if all(r.certified for r in runs) else EXIT_UNCERTIFIED

    try:
        run = runner(profile, config["B"], base_config)
    except StageError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER

    run.write_json(out / "run.json")
    _write_bounds_csv(out / "bounds.csv", config.get("id", "squap"), run.bounds)
    write_transcript(out / "transcript.jsonl", run.transcript)
    return EXIT_CERTIFIED if run.certified else EXIT_UNCERTIFIED


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="qtmlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "solve", "sweep", "squap"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON config path")
        cmd.add_argument("--seed", type=int, default=None, help="seed override")
        cmd.add_argument("--out", default=".", help="output directory")
        cmd.add_argument("--jobs", type=int, default=None, help="parallel sweep workers")
        cmd.add_argument("--mode", choices=("certified", "measure"), default="certified")

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0

    try:
        config = _load_config(args.config)
        base = Path(args.config).resolve().parent
        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        out = Path(args.out)
        jobs = args.jobs
        if jobs is None:
            jobs = int(os.environ.get("QTMLAB_JOBS", "1"))

        if args.command == "generate":
            return cmd_generate(config, seed, out, base)
        if args.command == "solve":
            return cmd_solve(config, seed, out, base, args.mode)
        if args.command == "sweep":
            return cmd_sweep(config, seed, out, base, jobs)
        return cmd_squap(config, seed, out, base)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
