"""Penalty-reward SAC and DDPG baselines, plus the model-based reference optimizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alsac import (
    ALSAC,
    AlgoConfig,
    Batch,
    ReplayBuffer,
    ObsNormalizer,
    TrainResult,
    run_training,
    seed_streams,
    soft_update,
)
from .env import DayProfile, VoltVarEnv
from .grid import NetworkCase
from .nn import Adam, Mlp
from .powerflow import Diverged, Injection, solve, total_loss, violation_metric

DEFAULT_PENALTIES = (0.5, 5.0)
MBO_PENALTY = 1e3


@dataclass(frozen=True)
class PenaltyConfig:
    delta: float = 5.0

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("penalty coefficient must be non-negative")


def penalized_reward(reward, cost, delta):
    """Reward with the constraint cost folded in linearly."""
    if np.any(np.asarray(cost) < 0):
        raise ValueError("cost must be non-negative")
    return reward - delta * cost


def sac_penalty_train(env: VoltVarEnv, days, delta: float, config: AlgoConfig, seed: int,
                      progress=None) -> TrainResult:
    """SAC on the penalized reward: no cost critics, lambda held at zero."""
    agent = ALSAC(env.obs_dim, env.action_dim, config, seed_streams(seed)[0], penalty=PenaltyConfig(delta).delta)
    return run_training(agent, env, days, config, seed, progress)


# --- DDPG -----------------------------------------------------------------

class DDPG:
    """Deterministic tanh actor, one critic, target copies of both."""

    algo = "ddpg"

    def __init__(self, obs_dim, act_dim, config: AlgoConfig, init_rng, penalty: float):
        PenaltyConfig(penalty)
        self.config = config
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.penalty = penalty
        self.noise = config.exploration_noise
        hidden = config.hidden
        self.actor = Mlp([obs_dim, *hidden, act_dim], init_rng, config.dtype)
        self.critic = Mlp([obs_dim + act_dim, *hidden, 1], init_rng, config.dtype)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, config.lr)
        self.critic_opt = Adam(self.critic.params, config.lr)
        self.normalizer = ObsNormalizer(obs_dim)

    def _pi(self, net, s):
        out, cache = net.forward(s)
        return np.tanh(out), cache

    def act(self, obs, rng, deterministic=False):
        s = self.normalizer(np.asarray(obs, dtype=float)[None, :])
        a = self._pi(self.actor, s)[0][0]
        if deterministic or rng is None or self.noise == 0.0:
            return a
        return np.clip(a + self.noise * rng.standard_normal(self.act_dim), -1.0, 1.0)

    def fit_normalizer(self, buffer: ReplayBuffer):
        if self.config.normalize_obs:
            self.normalizer.fit(buffer.contents().s)

    def critic_target_values(self, nb: Batch):
        a2, _ = self._pi(self.actor_target, nb.s2)
        q2 = self.critic_target(np.concatenate([nb.s2, a2], axis=1))[:, 0]
        r = penalized_reward(nb.r, nb.c, self.penalty)
        return r + self.config.gamma * (1.0 - nb.done) * q2

    def update(self, batch: Batch, rng=None) -> dict:
        nb = Batch(self.normalizer(batch.s), batch.a, batch.r, batch.c, self.normalizer(batch.s2), batch.done)
        n = len(nb)
        y = self.critic_target_values(nb)
        pred, cache = self.critic.forward(np.concatenate([nb.s, nb.a], axis=1))
        err = pred[:, 0] - y
        closs = float(np.mean(err * err))
        grads, _ = self.critic.backward(cache, (2.0 / n) * err[:, None], input_grad=False)
        self.critic_opt.step(self.critic.params, grads)

        a, acache = self._pi(self.actor, nb.s)
        q, qcache = self.critic.forward(np.concatenate([nb.s, a], axis=1))
        _, gx = self.critic.backward(qcache, np.full((n, 1), 1.0 / n, dtype=q.dtype), param_grads=False)
        grad_out = gx[:, self.obs_dim:] * (1.0 - a * a)
        agrads, _ = self.actor.backward(acache, grad_out, input_grad=False)
        self.actor_opt.step(self.actor.params, agrads, ascent=True)

        eta = self.config.eta
        soft_update(self.critic_target, self.critic, eta)
        soft_update(self.actor_target, self.actor, eta)
        return {"critic_loss": closs, "cost_critic_loss": None, "entropy": None,
                "q_mean": float(np.mean(q))}

    def tensors(self) -> dict:
        out = {}
        out.update(self.actor.named_params("actor"))
        out.update(self.actor_target.named_params("actor_target"))
        out.update(self.critic.named_params("critic"))
        out.update(self.critic_target.named_params("critic_target"))
        out["obs_mean"] = self.normalizer.mean
        out["obs_std"] = self.normalizer.std
        return out

    def meta(self) -> dict:
        return {"algo": self.algo, "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "penalty": self.penalty, "config": self.config.to_dict()}

    def load_tensors(self, tensors: dict):
        for name, arr in self.tensors().items():
            if name not in tensors:
                raise ValueError(f"checkpoint lacks tensor {name!r}")
            if tensors[name].shape != arr.shape:
                raise ValueError(f"checkpoint tensor {name!r} has shape {tensors[name].shape}, expected {arr.shape}")
            arr[...] = tensors[name]
        self.normalizer.mean = tensors["obs_mean"].copy()
        self.normalizer.std = tensors["obs_std"].copy()


def ddpg_train(env: VoltVarEnv, days, delta: float, config: AlgoConfig, seed: int,
               progress=None) -> TrainResult:
    agent = DDPG(env.obs_dim, env.action_dim, config, seed_streams(seed)[0], delta)
    return run_training(agent, env, days, config, seed, progress)


# --- model-based reference ------------------------------------------------

class Infeasible(RuntimeError):
    """No zero-violation setting was found; ``result`` holds the best one seen."""

    def __init__(self, result: "MboResult"):
        super().__init__(f"no feasible setting within {result.evaluations} evaluations "
                         f"(best violation {result.violation_pu:.3g} p.u.)")
        self.result = result


@dataclass(frozen=True, eq=False)
class MboResult:
    q: np.ndarray  # MVar per device
    loss_mw: float
    violation_pu: float
    evaluations: int

    @property
    def feasible(self) -> bool:
        return self.violation_pu == 0.0


@dataclass(frozen=True)
class MboSettings:
    population: int = 64
    elites: int = 8
    cem_rounds: int = 10
    polish_tol: float = 1e-7  # final step, as a fraction of each box width


def _candidates(lo, hi, rng, settings: MboSettings):
    """Deterministic generator of candidate batches; the caller sends back their rank keys."""
    width = hi - lo
    mean = 0.5 * (lo + hi)
    std = 0.5 * width
    pts = np.vstack([mean, np.clip(np.zeros_like(lo), lo, hi)])
    keys = yield pts
    i = int(np.argmin(keys))
    x, fx = pts[i].copy(), keys[i]
    for _ in range(settings.cem_rounds):
        pts = np.clip(mean + std * rng.standard_normal((settings.population, lo.size)), lo, hi)
        keys = yield pts
        order = np.argsort(keys, kind="stable")
        if keys[order[0]] < fx:
            x, fx = pts[order[0]].copy(), keys[order[0]]
        elite = pts[order[: settings.elites]]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), 1e-3 * width)
    # compass polish around the incumbent
    step = 0.125 * width
    while np.any(step > settings.polish_tol * width):
        trial = np.repeat(x[None, :], 2 * lo.size, axis=0)
        for j in range(lo.size):
            trial[2 * j, j] += step[j]
            trial[2 * j + 1, j] -= step[j]
        trial = np.clip(trial, lo, hi)
        keys = yield trial
        i = int(np.argmin(keys))
        if keys[i] < fx:
            x, fx = trial[i].copy(), keys[i]
        else:
            step = 0.5 * step


def _rank_key(loss, viol):
    # feasible points always beat infeasible ones; infeasible ranked by exact penalty
    return np.where(viol > 0, 1e12 + loss + MBO_PENALTY * viol, loss)


def mbo_solve(env, day: DayProfile, t: int, budget: int = 2000, seed: int = 0,
              settings: MboSettings = MboSettings()) -> MboResult:
    """Lowest-loss device setting for one profile row.

    Cross-entropy search over the box of device Q settings followed by a
    compass polish. Every candidate gets an exact power-flow solve. The
    candidate sequence does not depend on ``budget``; a smaller budget only
    truncates it, so the reported optimum never gets worse as budget grows.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if isinstance(env, NetworkCase):
        if not env.devices:
            return _uncontrolled(env, day, t)
        env = VoltVarEnv(env)
    lo, hi = env.bounds[:, 0].astype(float), env.bounds[:, 1].astype(float)
    rng = np.random.default_rng(seed)
    gen = _candidates(lo, hi, rng, settings)
    used = 0
    best_x, best_loss, best_viol, best_key = None, np.inf, np.inf, np.inf
    pts = next(gen)
    while True:
        pts = pts[: budget - used]
        loss, viol, _ = env.evaluate_batch(day, t, pts)
        keys = _rank_key(loss, viol)
        used += len(pts)
        i = int(np.argmin(keys))
        if keys[i] < best_key:
            best_x, best_loss, best_viol, best_key = pts[i].copy(), float(loss[i]), float(viol[i]), float(keys[i])
        if used >= budget:
            break
        try:
            pts = gen.send(keys)
        except StopIteration:
            break
    res = MboResult(best_x, best_loss, best_viol, used)
    if not res.feasible:
        raise Infeasible(res)
    return res


def _uncontrolled(case: NetworkCase, day: DayProfile, t: int) -> MboResult:
    p = np.array([-b.nominal_load_p for b in case.buses]) * day.loads[t]
    q = np.array([-b.nominal_load_q for b in case.buses]) * day.loads[t]
    try:
        sol = solve(case, Injection(p, q))
    except Diverged:
        raise Infeasible(MboResult(np.zeros(0), np.inf, np.inf, 1)) from None
    res = MboResult(np.zeros(0), total_loss(sol), violation_metric(sol), 1)
    if not res.feasible:
        raise Infeasible(res)
    return res


def mbo_day(env: VoltVarEnv, day: DayProfile, budget: int = 2000, seed: int = 0, strict: bool = False):
    """Per-step MBO over a whole day. Infeasible steps keep their best-found setting."""
    out = []
    for t in range(day.loads.shape[0]):
        try:
            out.append(mbo_solve(env, day, t, budget, seed))
        except Infeasible as exc:
            if strict:
                raise
            out.append(exc.result)
    return out


def mbo_evaluate(env: VoltVarEnv, days, budget: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Mean per-step loss (MW) and violation (p.u.) of the reference over ``days``."""
    res = [r for day in days for r in mbo_day(env, day, budget, seed)]
    return float(np.mean([r.loss_mw for r in res])), float(np.mean([r.violation_pu for r in res]))
