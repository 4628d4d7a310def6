"""``voltvar train|eval|pf|mbo|plot --config <path> [--seed N] [--out DIR]``.

Exit codes: 0 ok, 2 configuration or input error, 3 run-quality failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import alsac, baselines, multiagent
from .config import ConfigError, RunConfig, load_config
from .env import VoltVarEnv, generate_synthetic_profiles, list_profiles, read_profiles
from .grid import CaseError, load_case
from .io import atomic_write_text, average_metrics, format_value, write_metrics
from .plot import PlotError, plot_metrics
from .powerflow import Diverged, Injection, solve, violation_metric

EXIT_OK, EXIT_INPUT, EXIT_QUALITY = 0, 2, 3
EVAL_COLUMNS = ["method", "power_loss_mw", "voltage_violation_pu"]


class InputError(Exception):
    pass


def _case(cfg: RunConfig):
    path = cfg.case_path()
    dev = cfg.devices_path()
    try:
        return load_case(path, dev)
    except OSError as exc:
        raise InputError(f"cannot read {exc.filename}: {exc.strerror}") from None
    except (CaseError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _days(cfg: RunConfig, case, which: str):
    directory = cfg.profiles if which == "train" else cfg.test_profiles
    if directory is not None:
        try:
            days = read_profiles(cfg.resolve(directory), case)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
        if not days:
            raise InputError(f"no profiles found in {cfg.resolve(directory)}")
        return days
    if which == "train":
        return generate_synthetic_profiles(cfg.synthetic_seed, cfg.train_days, case)
    return generate_synthetic_profiles(cfg.test_seed, cfg.test_days, case)


def _agents(cfg: RunConfig, case):
    if cfg.observe == "full":
        return multiagent.single_full_agent(case)
    path = cfg.agents_path()
    if path is None:
        return multiagent.device_agents(case)
    try:
        agents = multiagent.parse_agent_map(path.read_text())
        multiagent.validate_agents(case, agents)
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None
    return agents


def method_label(cfg: RunConfig) -> str:
    if cfg.algorithm in ("sac", "ddpg"):
        return f"{cfg.algorithm}_delta{format_value(float(cfg.delta))}"
    return cfg.algorithm


def train_one(cfg: RunConfig, case, days, seed: int, progress=None):
    env = VoltVarEnv(case)
    acfg = cfg.algo_config()
    if cfg.algorithm == "alsac":
        return alsac.train(env, days, acfg, seed, progress)
    if cfg.algorithm == "sac":
        return baselines.sac_penalty_train(env, days, cfg.delta, acfg, seed, progress)
    if cfg.algorithm == "ddpg":
        return baselines.ddpg_train(env, days, cfg.delta, acfg, seed, progress)
    if cfg.algorithm == "ctde":
        return multiagent.train_ctde(env, days, _agents(cfg, case), acfg, seed, progress)
    raise InputError(f"algorithm {cfg.algorithm!r} has no training stage; use `voltvar mbo`")


def checkpoint_path(out: Path, seed: int) -> Path:
    return out / f"checkpoint_seed{seed}.vvt"


def cmd_train(cfg: RunConfig, seeds, out: Path) -> int:
    case = _case(cfg)
    if cfg.algorithm == "mbo":
        raise InputError("algorithm 'mbo' has no training stage; use `voltvar mbo`")
    days = _days(cfg, case, "train")
    per_seed = []
    worst = 0.0
    for seed in seeds:
        res = train_one(cfg, case, days, seed)
        write_metrics(out / f"metrics_seed{seed}.csv", res.metrics)
        if res.log:
            write_metrics(out / f"agents_seed{seed}.csv", res.log, ["episode", "agent_id", "entropy_estimate"])
        alsac.save_checkpoint(checkpoint_path(out, seed), res.agent)
        per_seed.append(res.metrics)
        worst = max(worst, res.truncated_episodes / max(len(res.metrics), 1))
        print(f"seed {seed}: final mean loss {res.metrics[-1]['mean_loss_mw']:.6f} MW, "
              f"mean cost {res.metrics[-1]['mean_cost_pu']:.6f} p.u., "
              f"{res.truncated_episodes} truncated episode(s)")
    write_metrics(out / "metrics_mean.csv", average_metrics(per_seed))
    if worst > 0.5:
        print(f"error: more than half of the episodes ended in power-flow divergence ({worst:.0%})",
              file=sys.stderr)
        return EXIT_QUALITY
    return EXIT_OK


def _overlap_warning(cfg: RunConfig):
    if cfg.profiles is None or cfg.test_profiles is None:
        return
    common = set(list_profiles(cfg.resolve(cfg.profiles))) & set(list_profiles(cfg.resolve(cfg.test_profiles)))
    if common:
        print(f"warning: test profiles share labels with training profiles: {', '.join(sorted(common))}",
              file=sys.stderr)


def eval_rows(cfg: RunConfig, seeds, out: Path):
    case = _case(cfg)
    days = _days(cfg, case, "test")
    env = VoltVarEnv(case)
    if cfg.algorithm == "mbo":
        loss, viol = baselines.mbo_evaluate(env, days, cfg.mbo_budget)
        return [{"method": "mbo", "power_loss_mw": loss, "voltage_violation_pu": viol}]
    results = []
    for seed in seeds:
        path = cfg.resolve(cfg.checkpoint) if cfg.checkpoint is not None else checkpoint_path(out, seed)
        try:
            agent = alsac.load_checkpoint(path, case)
        except OSError as exc:
            raise InputError(f"cannot read checkpoint {exc.filename}: {exc.strerror}") from None
        except (ValueError, KeyError) as exc:
            raise InputError(f"{path}: checkpoint does not match this configuration: {exc}") from None
        if agent.obs_dim != env.obs_dim or agent.act_dim != env.action_dim:
            raise InputError(f"{path}: checkpoint was trained for a different feeder")
        results.append(alsac.evaluate_policy(agent, env, days))
        if cfg.checkpoint is not None:
            break
    loss, viol = np.mean(results, axis=0)
    return [{"method": method_label(cfg), "power_loss_mw": float(loss), "voltage_violation_pu": float(viol)}]


def cmd_eval(cfg: RunConfig, seeds, out: Path) -> int:
    _overlap_warning(cfg)
    rows = eval_rows(cfg, seeds, out)
    write_metrics(out / "eval.csv", rows, EVAL_COLUMNS)
    for r in rows:
        print(f"{r['method']}: loss {r['power_loss_mw']:.6f} MW, violation {r['voltage_violation_pu']:.6f} p.u.")
    return EXIT_OK


def mbo_csv(results) -> str:
    m = len(results[0].q) if results else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss_mw", "violation_pu"] + [f"q_{j + 1}" for j in range(m)])
    for t, r in enumerate(results):
        w.writerow([t, format_value(r.loss_mw), format_value(r.violation_pu)] + [format_value(q) for q in r.q])
    return buf.getvalue()


def cmd_mbo(cfg: RunConfig, seeds, out: Path) -> int:
    case = _case(cfg)
    days = _days(cfg, case, "test")
    env = VoltVarEnv(case)
    infeasible = 0
    for k, day in enumerate(days):
        results = baselines.mbo_day(env, day, cfg.mbo_budget, seeds[0])
        infeasible += sum(not r.feasible for r in results)
        label = day.name or f"day{k}"
        atomic_write_text(out / f"mbo_{label}.csv", mbo_csv(results))
        print(f"{label}: mean loss {np.mean([r.loss_mw for r in results]):.6f} MW, "
              f"mean violation {np.mean([r.violation_pu for r in results]):.6f} p.u.")
    if infeasible:
        print(f"warning: {infeasible} step(s) had no zero-violation setting", file=sys.stderr)
    return EXIT_OK


def cmd_pf(cfg: RunConfig, injections: str | None, load_scale: float) -> int:
    case = _case(cfg)
    inj = Injection.from_loads(case, load_scale)
    if injections is not None:
        inj = _read_injections(Path(injections), case, inj)
    try:
        sol = solve(case, inj)
    except Diverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_QUALITY
    print("bus,vm_pu,va_deg")
    for b, v in zip(case.bus_ids, sol.voltages):
        print(f"{b},{abs(v):.8f},{np.degrees(np.angle(v)):.6f}")
    print(f"total_loss_mw,{sol.total_loss:.10f}")
    print(f"violation_pu,{violation_metric(sol):.10f}")
    print(f"iterations,{sol.iterations}")
    return EXIT_OK


def _read_injections(path: Path, case, base: Injection) -> Injection:
    """CSV ``bus,p_mw,q_mvar`` (generator convention); listed buses replace the nominal values."""
    p, q = base.p.copy(), base.q.copy()
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or [h.strip() for h in rows[0]] != ["bus", "p_mw", "q_mvar"]:
            raise ValueError("header must be bus,p_mw,q_mvar")
        for row in rows[1:]:
            i = case.bus_index(int(row[0]))
            p[i], q[i] = float(row[1]), float(row[2])
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except (ValueError, KeyError, IndexError) as exc:
        raise InputError(f"{path}: {exc}") from None
    return Injection(p, q)


def cmd_plot(cfg: RunConfig, metrics: str | None, columns, output: str | None, out: Path) -> int:
    src = metrics or (cfg.resolve(cfg.metrics) if cfg.metrics else out / "metrics_mean.csv")
    cols = columns or list(cfg.columns)
    dst = Path(output) if output else out / "plot.svg"
    try:
        plot_metrics(src, cols, dst)
    except OSError as exc:
        raise InputError(f"cannot read {src}: {exc.strerror}") from None
    except PlotError as exc:
        raise InputError(str(exc)) from None
    print(f"wrote {dst}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voltvar", description="Volt/VAR control benchmark")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("train", "train agents, one run per seed"),
                       ("eval", "evaluate checkpoints (or the MBO reference) on test profiles"),
                       ("pf", "solve one power flow and print the result"),
                       ("mbo", "run the model-based reference on the test profiles"),
                       ("plot", "render metrics columns to SVG")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=name in ("train", "eval", "mbo"), help="run configuration file")
        sp.add_argument("--seed", type=int, help="run only this seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        if name == "pf":
            sp.add_argument("--injections", help="CSV bus,p_mw,q_mvar overriding nominal injections")
            sp.add_argument("--load-scale", type=float, default=1.0, help="multiplier on nominal loads")
        if name == "plot":
            sp.add_argument("--metrics", help="metrics CSV to plot")
            sp.add_argument("--columns", nargs="+", help="columns to draw")
            sp.add_argument("--output", help="SVG path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
        out = Path(args.out) if args.out else cfg.out_dir()
        if args.command == "train":
            return cmd_train(cfg, seeds, out)
        if args.command == "eval":
            return cmd_eval(cfg, seeds, out)
        if args.command == "mbo":
            return cmd_mbo(cfg, seeds, out)
        if args.command == "pf":
            return cmd_pf(cfg, args.injections, args.load_scale)
        return cmd_plot(cfg, args.metrics, args.columns, args.output, out)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
