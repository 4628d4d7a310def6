"""Benchmark protocol on the 33-bus feeder: train every method, score it on held-out days.

Runs take tens of minutes each on one core, so finished records are memoized on
disk. The cache key covers the protocol settings and the numeric source of the
package, so editing an algorithm invalidates stale records automatically.
"""
from __future__ import annotations

import ast
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import alsac, baselines
from .config import RunConfig

# modules whose arithmetic feeds the protocol numbers
_NUMERIC_MODULES = ("alsac", "baselines", "env", "grid", "multiagent", "nn", "powerflow", "_sweep_py", "config")

METHODS = ("alsac", "sac_delta0.5", "sac_delta5", "ddpg_delta0.5", "ddpg_delta5", "ctde")


@dataclass(frozen=True)
class Protocol:
    case: str = "bundled:case33bw"
    synthetic_seed: int = 1000
    train_days: int = 200
    test_seed: int = 2000
    test_days: int = 10
    seeds: tuple[int, ...] = (0, 1, 2)
    episodes: int = 600
    mbo_budget: int = 2000


def run_config(method: str, proto: Protocol) -> RunConfig:
    """Default hyperparameters everywhere; only the algorithm and penalty differ."""
    base = RunConfig(case=proto.case, synthetic_seed=proto.synthetic_seed, train_days=proto.train_days,
                     test_seed=proto.test_seed, test_days=proto.test_days, seeds=proto.seeds,
                     episodes=proto.episodes, mbo_budget=proto.mbo_budget, target_entropy=-1.0)
    if method in ("alsac", "ctde", "mbo"):
        return replace(base, algorithm=method)
    algo, _, delta = method.partition("_delta")
    if algo not in ("sac", "ddpg") or not delta:
        raise ValueError(f"unknown protocol method {method!r}")
    return replace(base, algorithm=algo, delta=float(delta))


def source_digest() -> str:
    """Hash of the numeric modules with docstrings and comments stripped."""
    h = hashlib.sha256()
    here = Path(__file__).parent
    for name in _NUMERIC_MODULES:
        tree = ast.parse((here / f"{name}.py").read_text())
        for node in ast.walk(tree):
            body = getattr(node, "body", None)
            if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                    and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
                node.body = body[1:] or [ast.Pass()]
        h.update(name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def cache_dir() -> Path:
    env = os.environ.get("VOLTVAR_PROTOCOL_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "voltvar" / "protocol"


def record_key(method: str, seed: int | None, proto: Protocol) -> str:
    payload = json.dumps({"method": method, "seed": seed, "protocol": asdict(proto), "code": source_digest()},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def _compute(method: str, seed: int | None, proto: Protocol, progress=None) -> dict:
    from .cli import _case, _days, train_one
    from .env import VoltVarEnv

    cfg = run_config(method, proto)
    case = _case(cfg)
    env = VoltVarEnv(case)
    test = _days(cfg, case, "test")
    start = time.perf_counter()
    if method == "mbo":
        loss, viol = baselines.mbo_evaluate(env, test, proto.mbo_budget)
        return {"method": method, "seed": None, "test_loss_mw": loss, "test_violation_pu": viol,
                "seconds": time.perf_counter() - start}
    res = train_one(cfg, case, _days(cfg, case, "train"), seed, progress)
    loss, viol = alsac.evaluate_policy(res.agent, env, test)
    tail = res.metrics[-10:]
    return {
        "method": method,
        "seed": seed,
        "test_loss_mw": loss,
        "test_violation_pu": viol,
        "final_train_loss_mw": float(np.nanmean([m["mean_loss_mw"] for m in tail])),
        "final_train_cost_pu": float(np.nanmean([m["mean_cost_pu"] for m in tail])),
        "final_lambda": float(res.metrics[-1]["lambda"]),
        "truncated_episodes": int(res.truncated_episodes),
        "seconds": time.perf_counter() - start,
    }


def result(method: str, seed: int | None = None, proto: Protocol = Protocol(), recompute: bool = False,
           progress=None) -> dict:
    """One (method, seed) record, read from the cache when present."""
    if method == "mbo":
        seed = None
    elif seed is None:
        raise ValueError("learning methods need a seed")
    path = cache_dir() / f"{method}-{'ref' if seed is None else seed}-{record_key(method, seed, proto)}.json"
    if path.exists() and not recompute:
        return json.loads(path.read_text())
    rec = _compute(method, seed, proto, progress)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(rec, indent=1, sort_keys=True))
    tmp.replace(path)
    return rec


def summary(method: str, proto: Protocol = Protocol()) -> dict:
    """Seed-averaged test loss and violation."""
    if method == "mbo":
        rec = result("mbo", proto=proto)
        return {"test_loss_mw": rec["test_loss_mw"], "test_violation_pu": rec["test_violation_pu"]}
    recs = [result(method, s, proto) for s in proto.seeds]
    return {"test_loss_mw": float(np.mean([r["test_loss_mw"] for r in recs])),
            "test_violation_pu": float(np.mean([r["test_violation_pu"] for r in recs]))}


def cached(method: str, seed: int | None = None, proto: Protocol = Protocol()) -> bool:
    seed = None if method == "mbo" else seed
    path = cache_dir() / f"{method}-{'ref' if seed is None else seed}-{record_key(method, seed, proto)}.json"
    return path.exists()
