"""Batch front-end: data generation, experiment runs, scoring, reporting.

Subcommands:
    gen-data  render a synthetic task spec (JSON) to a task file (JSONL)
    run       execute every configured arm x seed and write reports
    score     conformal-score a JSONL file of probability vectors
    report    summarize one run directory, or diff two

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Defaults for --seed/--seeds/--out may also be supplied via the environment
variables XMCL_SEED, XMCL_SEEDS, XMCL_OUT.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .banks import save_banks
from .conformal import CpConfig, SimplexError, prediction_set
from .data import SynthSpec, TaskFileError, generate_synthetic_task, save_task
from .losses import JmmdSpec
from .trainer import ExperimentConfig, Schedule, report_to_csv, run_sequence

ARMS = ("full", "no_mpm", "alpha_zero", "no_aux")


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 2."""


def _require(payload: dict, key: str):
    if key not in payload:
        raise ConfigError(f"missing config key: {key!r}")
    return payload[key]


def _build_dataclass(cls, payload: dict, what: str):
    try:
        return cls(**payload)
    except TypeError as e:
        raise ConfigError(f"bad {what} section: {e}") from e
    except ValueError as e:
        raise ConfigError(f"bad {what} section: {e}") from e


def parse_experiment_config(payload: dict) -> tuple[ExperimentConfig, dict]:
    """Translate a config-file dict into an ExperimentConfig plus run settings."""
    tasks: list[SynthSpec | str] = []
    for i, entry in enumerate(_require(payload, "tasks")):
        if not isinstance(entry, dict):
            raise ConfigError(f"tasks[{i}] must be an object")
        if "path" in entry:
            tasks.append(str(entry["path"]))
        else:
            tasks.append(_build_dataclass(SynthSpec, entry, f"tasks[{i}]"))
    if not tasks:
        raise ConfigError("config key 'tasks' must name at least one task")

    schedule = _build_dataclass(Schedule, payload.get("schedule", {}), "schedule")
    cp = _build_dataclass(CpConfig, payload.get("cp", {}), "cp")
    jmmd_payload = dict(payload.get("jmmd", {}))
    if "layer_set" in jmmd_payload and jmmd_payload["layer_set"] is not None:
        jmmd_payload["layer_set"] = tuple(jmmd_payload["layer_set"])
    jmmd = _build_dataclass(JmmdSpec, jmmd_payload, "jmmd")

    encoder = payload.get("encoder", {})
    pk = payload.get("pk", {})
    train = payload.get("train", {})
    eval_opts = payload.get("eval", {})
    try:
        config = ExperimentConfig(
            tasks=tasks,
            schedule=schedule,
            cp=cp,
            jmmd=jmmd,
            hidden_dims=tuple(encoder.get("hidden_dims", (128, 128))),
            embedding_dim=int(encoder.get("embedding_dim", 64)),
            temperature=float(encoder.get("temperature", 0.07)),
            pk_p=int(pk.get("p", 16)),
            pk_k=int(pk.get("k", 4)),
            mpm=bool(payload.get("mpm", True)),
            triplet_margin=float(train.get("triplet_margin", 0.3)),
            label_smoothing=float(train.get("label_smoothing", 0.1)),
            use_cosine_eval=bool(eval_opts.get("use_cosine", False)),
            swap_eval_direction=bool(eval_opts.get("swap_direction", False)),
            freeze_shared_on_replay=bool(train.get("freeze_shared_on_replay", False)),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e

    arms = payload.get("arms", ["full"])
    for arm in arms:
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}; choose from {ARMS}")
    settings = {
        "arms": list(arms),
        "seed": int(payload.get("seed", 0)),
        "seeds": int(payload.get("seeds", 1)),
        "reverse_order": bool(payload.get("reverse_order", False)),
    }
    return config, settings


def arm_config(base: ExperimentConfig, arm: str) -> ExperimentConfig:
    if arm == "full":
        return base
    if arm == "no_mpm":
        return dataclasses.replace(base, mpm=False)
    if arm == "alpha_zero":
        return dataclasses.replace(base, jmmd=dataclasses.replace(base.jmmd, alpha=0.0))
    if arm == "no_aux":
        tasks = [
            dataclasses.replace(t, num_aux_ids=0) if isinstance(t, SynthSpec) else t
            for t in base.tasks
        ]
        return dataclasses.replace(base, tasks=tasks)
    raise ConfigError(f"unknown arm {arm!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    payload = json.loads(Path(args.spec).read_text())
    spec = _build_dataclass(SynthSpec, payload, "task spec")
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    dataset = generate_synthetic_task(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_task(dataset, out)
    print(
        f"wrote {out} ({len(dataset.train)} train / {len(dataset.query)} query / "
        f"{len(dataset.gallery)} gallery samples)"
    )
    return 0


def cmd_run(args) -> int:
    config, settings = parse_experiment_config(json.loads(Path(args.config).read_text()))
    arms = args.arm or settings["arms"]
    for arm in arms:
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}; choose from {ARMS}")
    seed = settings["seed"] if args.seed is None else args.seed
    seeds = settings["seeds"] if args.seeds is None else args.seeds
    reverse = settings["reverse_order"] or args.reverse_order
    if reverse:
        config = dataclasses.replace(config, tasks=list(reversed(config.tasks)))
    out_root = Path(args.out)
    for arm in arms:
        cfg = arm_config(config, arm)
        for i in range(seeds):
            master = seed + i
            report, exp = run_sequence(cfg, master)
            report["arm"] = arm
            run_dir = out_root / arm / f"seed_{master}"
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "report.json").write_text(
                json.dumps(report, sort_keys=True, indent=1) + "\n"
            )
            (run_dir / "metrics.csv").write_text(report_to_csv(report))
            save_banks(exp.banks, run_dir / "banks.jsonl")
            final = report["steps"][-1]["average"]
            print(
                f"[{arm} seed {master}] steps={len(report['steps'])} "
                f"final avg mAP={final['mAP']:.2f} r1={final['r1']:.2f}"
            )
    return 0


def cmd_score(args) -> int:
    config = CpConfig(lam=args.lam, k_reg=args.k_reg, tau=args.tau)
    out_lines = []
    for lineno, raw in enumerate(Path(args.input).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as e:
            raise TaskFileError(lineno, f"invalid JSON ({e.msg})") from e
        pi = row["pi"] if isinstance(row, dict) else row
        try:
            ps = prediction_set(np.asarray(pi, dtype=np.float64), config)
        except SimplexError as e:
            raise TaskFileError(lineno, str(e)) from e
        out_lines.append(
            json.dumps(
                {
                    "set_size": ps.size,
                    "conf": ps.conf,
                    "unc": ps.unc,
                    "members": ps.members.tolist(),
                },
                sort_keys=True,
            )
        )
    text = "\n".join(out_lines) + ("\n" if out_lines else "")
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out} ({len(out_lines)} rows)")
    else:
        sys.stdout.write(text)
    return 0


def _load_run_rows(run_dir: Path) -> tuple[list[dict], list[str]]:
    """All metrics rows under <dir>/<arm>/<seed>/metrics.csv, plus warnings."""
    rows, warnings = [], []
    csvs = sorted(run_dir.glob("*/seed_*/metrics.csv"))
    direct = run_dir / "metrics.csv"
    if direct.exists():
        csvs.append(direct)
    if not csvs:
        raise ConfigError(f"no metrics.csv found under {run_dir}")
    for path in csvs:
        arm = path.parent.parent.name if path.parent.name.startswith("seed_") else "run"
        seed = path.parent.name.removeprefix("seed_") if arm != "run" else "0"
        lines = path.read_text().strip().split("\n")
        if lines[0] != "step,task_id,mAP,r1,r5,r10":
            warnings.append(f"{path}: unexpected header, skipped")
            continue
        for line in lines[1:]:
            step, task_id, m, r1, r5, r10 = line.split(",")
            rows.append(
                {
                    "arm": arm,
                    "seed": seed,
                    "step": int(step),
                    "task_id": int(task_id),
                    "mAP": float(m),
                    "r1": float(r1),
                }
            )
        report_path = path.parent / "report.json"
        if report_path.exists():
            payload = json.loads(report_path.read_text())
            warnings.extend(f"{path.parent}: {w}" for w in payload.get("warnings", []))
    return rows, warnings


def _summarize(rows: list[dict]) -> list[dict]:
    """Median-over-seeds mAP/r1 per (arm, step, task), plus per-step averages."""
    out = []
    arms = sorted({r["arm"] for r in rows})
    for arm in arms:
        arm_rows = [r for r in rows if r["arm"] == arm]
        steps = sorted({r["step"] for r in arm_rows})
        tasks = sorted({r["task_id"] for r in arm_rows})
        for step in steps:
            per_task = {}
            for task in tasks:
                cell = [r for r in arm_rows if r["step"] == step and r["task_id"] == task]
                if cell:
                    per_task[task] = (
                        float(np.median([r["mAP"] for r in cell])),
                        float(np.median([r["r1"] for r in cell])),
                    )
            if not per_task:
                continue
            avg_map = float(np.mean([v[0] for v in per_task.values()]))
            avg_r1 = float(np.mean([v[1] for v in per_task.values()]))
            for task, (m, r1) in sorted(per_task.items()):
                out.append(
                    {"arm": arm, "step": step, "task_id": str(task), "mAP": m, "r1": r1}
                )
            out.append(
                {"arm": arm, "step": step, "task_id": "avg", "mAP": avg_map, "r1": avg_r1}
            )
    return out


def _print_table(summary: list[dict], title: str) -> None:
    print(title)
    print(f'{"arm":<12}{"step":>5}{"task":>8}{"mAP":>10}{"r1":>10}')
    for row in summary:
        print(
            f'{row["arm"]:<12}{row["step"]:>5}{row["task_id"]:>8}'
            f'{row["mAP"]:>10.2f}{row["r1"]:>10.2f}'
        )


def cmd_report(args) -> int:
    rows, warnings = _load_run_rows(Path(args.run_dir))
    summary = _summarize(rows)
    _print_table(summary, f"run summary: {args.run_dir} (medians over seeds)")
    for w in warnings:
        print(f"warning: {w}")

    if args.diff:
        other_rows, other_warnings = _load_run_rows(Path(args.diff))
        other = {
            (r["arm"], r["step"], r["task_id"]): r for r in _summarize(other_rows)
        }
        print()
        print(f'diff vs {args.diff} (this minus other)')
        print(f'{"arm":<12}{"step":>5}{"task":>8}{"dmAP":>10}{"dr1":>10}')
        for row in summary:
            key = (row["arm"], row["step"], row["task_id"])
            if key in other:
                print(
                    f'{row["arm"]:<12}{row["step"]:>5}{row["task_id"]:>8}'
                    f'{row["mAP"] - other[key]["mAP"]:>10.2f}'
                    f'{row["r1"] - other[key]["r1"]:>10.2f}'
                )
        for w in other_warnings:
            print(f"warning: {w}")

    csv_lines = ["arm,step,task_id,mAP,r1"]
    csv_lines += [
        f'{r["arm"]},{r["step"]},{r["task_id"]},{r["mAP"]!r},{r["r1"]!r}' for r in summary
    ]
    out = Path(args.out) if args.out else Path(args.run_dir) / "summary.csv"
    out.write_text("\n".join(csv_lines) + "\n")
    print(f"\nwrote {out}")
    return 0


# ---------------------------------------------------------------------------


def _env_int(name: str) -> int | None:
    value = os.environ.get(name)
    return int(value) if value else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmcl",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic task spec to a task file")
    g.add_argument("--spec", required=True, help="JSON file with SynthSpec fields")
    g.add_argument("--out", required=True, help="output task file (JSONL)")
    g.add_argument("--seed", type=int, default=_env_int("XMCL_SEED"))
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run every configured arm x seed")
    r.add_argument("--config", required=True, help="experiment config (JSON)")
    r.add_argument("--out", default=os.environ.get("XMCL_OUT", "runs"), help="output directory")
    r.add_argument("--seed", type=int, default=_env_int("XMCL_SEED"), help="master seed")
    r.add_argument("--seeds", type=int, default=_env_int("XMCL_SEEDS"), help="seed count")
    r.add_argument("--reverse-order", action="store_true", help="train tasks in reverse")
    r.add_argument("--arm", action="append", choices=ARMS, help="restrict arms (repeatable)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("score", help="conformal-score probability vectors")
    s.add_argument("--input", required=True, help="JSONL: one probability vector per line")
    s.add_argument("--out", help="output JSONL (default: stdout)")
    s.add_argument("--lam", type=float, default=0.3)
    s.add_argument("--k-reg", type=int, default=10)
    s.add_argument("--tau", type=float, default=5.0)
    s.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir")
    p.add_argument("--diff", help="second run directory to diff against")
    p.add_argument("--out", help="summary CSV path (default: <run_dir>/summary.csv)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        # covers ConfigError, bad task specs/files, and invalid experiment setups
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
