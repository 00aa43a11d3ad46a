"""Command-line entry points: generate, solve, collect-demo, train, evaluate.

Every command writes ``manifest.json`` into its output directory, holding the
command, the resolved arguments and the artifacts it produced, so a run can
be repeated from the manifest alone.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .engine import Limits, solve
from .instances import read_instance, write_instance
from .policies import make_policy
from .qnet import save_params
from .replay import load_transitions, save_transitions
from .trainer import InstanceFamily, TrainerConfig, collect_demonstrations, train

__all__ = [
    "main",
    "cmd_generate",
    "cmd_solve",
    "cmd_collect_demo",
    "cmd_train",
    "cmd_evaluate",
    "win_counts",
]

MANIFEST = "manifest.json"
INSTANCE_SUFFIX = ".milp"


class CliError(Exception):
    """A user-facing failure: bad input, missing artifact, unwritable path."""


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, Path):
        return str(v)
    return v


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from exc


def write_manifest(out: Path, command: str, config: dict, seed, artifacts: Sequence) -> Path:
    manifest = {
        "command": command,
        "config": {k: _json_value(v) for k, v in config.items()},
        "seed": seed,
        "artifacts": sorted(str(Path(a).name) for a in artifacts),
        "version": __version__,
    }
    path = out / MANIFEST
    _write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise CliError(f"missing file: {path}") from exc


def _limits(work, nodes) -> Limits:
    return Limits(max_work=math.inf if work is None else float(work),
                  max_nodes=math.inf if nodes is None else float(nodes))


def _family(kind: str, params: dict) -> InstanceFamily:
    try:
        return InstanceFamily(kind, params)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


# -- generate ---------------------------------------------------------------

def cmd_generate(family: str, params: dict, count: int, seed: int, out_dir) -> list[Path]:
    """Write ``count`` instances with seeds ``seed, seed+1, ...``."""
    out = _out_dir(out_dir)
    fam = _family(family, params)
    paths = []
    for k in range(count):
        path = out / f"{family}_{seed + k:06d}{INSTANCE_SUFFIX}"
        _write(path, write_instance(fam.make(seed + k)))
        paths.append(path)
    write_manifest(out, "generate", {"family": family, **params, "count": count}, seed, paths)
    return paths


# -- solve ------------------------------------------------------------------

def _policy(name: str, seed: int):
    try:
        return make_policy(name, seed=seed)
    except FileNotFoundError as exc:
        raise CliError(f"missing checkpoint: {exc.filename}") from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def cmd_solve(instance_path, policy: str, limits: Limits, seed: int = 0, out_dir=None):
    """Solve one instance; returns the report and writes JSON + bound CSV."""
    instance = read_instance(_read_text(instance_path))
    report = solve(instance, _policy(policy, seed), limits)
    if out_dir is not None:
        out = _out_dir(out_dir)
        _write(out / "report.json", report.to_json() + "\n")
        _write(out / "trace.csv", report.trace_csv())
        write_manifest(out, "solve", {"instance": str(instance_path), "policy": policy,
                                      "limits_work": limits.max_work,
                                      "limits_nodes": limits.max_nodes},
                       seed, [out / "report.json", out / "trace.csv"])
    return report


# -- collect-demo / train ---------------------------------------------------

def _load_config(path, overrides: dict) -> TrainerConfig:
    data = json.loads(_read_text(path)) if path is not None else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainerConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad config: {exc}") from exc


def _train_sampler(cfg: TrainerConfig):
    fam = cfg.instance_family
    return lambda k: fam.make(cfg.seed * 1_000_000 + k)


def cmd_collect_demo(cfg: TrainerConfig, out_dir, n: int | None = None,
                     expert: str | None = None) -> Path:
    out = _out_dir(out_dir)
    n = cfg.demo_size if n is None else n
    expert = cfg.demo_expert if expert is None else expert
    demos = collect_demonstrations(_train_sampler(cfg), n, cfg.limits, expert, cfg.seed)
    path = out / "demos.npz"
    save_transitions(path, demos)
    write_manifest(out, "collect-demo", {**cfg.to_dict(), "demo_size": n, "demo_expert": expert},
                   cfg.seed, [path])
    return path


def cmd_train(cfg: TrainerConfig, out_dir, demos_path=None):
    """Train one arm; writes the eval curve, both checkpoints and a config echo."""
    out = _out_dir(out_dir)
    demos = None
    if demos_path is not None:
        if not Path(demos_path).exists():
            raise CliError(f"missing demonstrations: {demos_path}")
        demos = load_transitions(demos_path)
    report = train(cfg, _train_sampler(cfg), demos=demos)
    paths = {
        "eval_curve.csv": report.eval_curve_csv(),
        "config.json": json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
        "train_report.json": json.dumps({
            "G_best": report.G_best,
            "admitted_episodes": report.admitted_episodes,
            "admitted_transitions": report.admitted_transitions,
            "eval_curve": [[s, g] for s, g in report.eval_curve],
        }, indent=2) + "\n",
    }
    for name, text in paths.items():
        _write(out / name, text)
    save_params(out / "theta.npz", report.theta)
    save_params(out / "theta_superior.npz", report.theta_superior)
    artifacts = [out / n for n in paths] + [out / "theta.npz", out / "theta_superior.npz"]
    config = {**cfg.to_dict(), "demos": None if demos_path is None else str(demos_path)}
    write_manifest(out, "train", config, cfg.seed, artifacts)
    return report


# -- evaluate ---------------------------------------------------------------

def win_counts(scores: dict[str, list[float]]) -> dict[str, float]:
    """Per instance the highest return wins one point; tied leaders share it."""
    names = list(scores)
    wins = {n: 0.0 for n in names}
    n_inst = len(next(iter(scores.values()))) if scores else 0
    for i in range(n_inst):
        best = max(scores[n][i] for n in names)
        leaders = [n for n in names if scores[n][i] == best]
        for n in leaders:
            wins[n] += 1.0 / len(leaders)
    return wins


def cmd_evaluate(policies: Sequence[str], instance_dir, limits: Limits, seed: int = 0,
                 out_dir=None) -> dict:
    """Score every policy on every instance; returns the score table."""
    files = sorted(Path(instance_dir).glob(f"*{INSTANCE_SUFFIX}"))
    if not files:
        raise CliError(f"no {INSTANCE_SUFFIX} instances in {instance_dir}")
    instances = [read_instance(_read_text(f)) for f in files]
    labels = list(dict.fromkeys(policies))
    if len(labels) != len(policies):
        # duplicate policies still count as separate competitors
        labels = [f"{p}#{k}" for k, p in enumerate(policies)]
    scores = {}
    for label, name in zip(labels, policies):
        policy = _policy(name, seed)  # policies keep no state across trees
        scores[label] = [solve(inst, policy, limits).dual_integral for inst in instances]
    wins = win_counts(scores)
    table = {
        "instances": [f.name for f in files],
        "policies": {lab: {"mean_score": math.fsum(s) / len(s), "wins": wins[lab], "scores": s}
                     for lab, s in scores.items()},
    }
    if out_dir is not None:
        out = _out_dir(out_dir)
        _write(out / "scores.json", json.dumps(table, indent=2) + "\n")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["instance"] + labels)
        for i, f in enumerate(files):
            writer.writerow([f.name] + [repr(scores[lab][i]) for lab in labels])
        _write(out / "scores.csv", buf.getvalue())
        write_manifest(out, "evaluate", {"policies": list(policies), "instances": str(instance_dir),
                                         "limits_work": limits.max_work,
                                         "limits_nodes": limits.max_nodes},
                       seed, [out / "scores.json", out / "scores.csv"])
    return table


def format_table(table: dict) -> str:
    n = len(table["instances"])
    w = max([24] + [len(lab) + 2 for lab in table["policies"]])
    lines = [f"{'policy':<{w}}{'mean score':>16}{'wins':>12}"]
    for lab, row in table["policies"].items():
        lines.append(f"{lab:<{w}}{row['mean_score']:>16.4f}{row['wins']:>8.2f}/{n}")
    return "\n".join(lines)


# -- argument parsing -------------------------------------------------------

def _common(p: argparse.ArgumentParser, work_default=None):
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default 0, or the config file's seed)")
    p.add_argument("--limits-work", type=float, default=work_default,
                   help="work-clock budget (simplex iterations + 1 per LP); default unlimited"
                   if work_default is None else f"work-clock budget (default {work_default:g})")
    p.add_argument("--limits-nodes", type=float, default=None)
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="branchrl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write seeded instances")
    g.add_argument("--family", choices=("set_cover", "knapsack"), default="set_cover")
    g.add_argument("--n-rows", type=int, default=20)
    g.add_argument("--n-cols", type=int, default=20)
    g.add_argument("--density", type=float, default=0.5)
    g.add_argument("--cost-max", type=int, default=1)
    g.add_argument("--n-items", type=int, default=12)
    g.add_argument("--n-cons", type=int, default=2)
    g.add_argument("--count", type=int, default=10)
    _common(g)

    s = sub.add_parser("solve", help="solve one instance and emit the bound curve")
    s.add_argument("instance")
    s.add_argument("--policy", default="sb",
                   help="sb, pc, mostinf, random or learned:<checkpoint.npz>")
    _common(s)

    for name, text in (("collect-demo", "roll out an expert and save transitions"),
                       ("train", "train one arm from a JSON config")):
        c = sub.add_parser(name, help=text)
        c.add_argument("--config", default=None, help="JSON file of trainer settings")
        _common(c)
        if name == "collect-demo":
            c.add_argument("--n", type=int, default=None)
            c.add_argument("--expert", choices=("sb", "pc", "mixed"), default=None)
        else:
            c.add_argument("--demos", default=None, help="transitions file from collect-demo")

    e = sub.add_parser("evaluate", help="score policies on an instance directory")
    e.add_argument("instances", help="directory of instance files")
    e.add_argument("--policies", default="sb,pc,random",
                   help="comma-separated policy names")
    _common(e, work_default=2000.0)
    return parser


def _run(args) -> int:
    limits = _limits(args.limits_work, args.limits_nodes)
    seed = 0 if args.seed is None else args.seed
    if args.command == "generate":
        if args.family == "set_cover":
            params = {"n_rows": args.n_rows, "n_cols": args.n_cols,
                      "density": args.density, "cost_max": args.cost_max}
        else:
            params = {"n_items": args.n_items, "n_cons": args.n_cons}
        paths = cmd_generate(args.family, params, args.count, seed, args.out or ".")
        print(f"wrote {len(paths)} instances to {args.out or '.'}")
    elif args.command == "solve":
        report = cmd_solve(args.instance, args.policy, limits, seed, args.out)
        print(report.to_json())
    elif args.command in ("collect-demo", "train"):
        overrides = {"seed": args.seed, "max_work": args.limits_work,
                     "max_nodes": args.limits_nodes}
        cfg = _load_config(args.config, overrides)
        out = args.out or "."
        if args.command == "collect-demo":
            print(cmd_collect_demo(cfg, out, args.n, args.expert))
        else:
            report = cmd_train(cfg, out, args.demos)
            print(report.eval_curve_csv(), end="")
    else:
        policies = [p.strip() for p in args.policies.split(",") if p.strip()]
        print(format_table(cmd_evaluate(policies, args.instances, limits, seed, args.out)))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except CliError as exc:
        print(f"branchrl: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # parse errors, checkpoint shape mismatches
        print(f"branchrl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
