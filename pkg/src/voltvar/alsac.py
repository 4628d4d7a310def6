"""Augmented-Lagrangian soft actor-critic.

Per environment step, once the buffer is warm: sample a batch, fit the twin
reward critics and twin cost critics, move the multipliers, take one ascent
step on the augmented Lagrangian for the actor, then Polyak-average the
target critics.  The same machinery runs the penalty-reward SAC baseline
(cost critics off, lambda pinned at zero).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .env import STEPS_PER_DAY, DayProfile, VoltVarEnv
from .powerflow import Diverged
from .nn import Adam, Mlp, PolicyHead, load_tensors, sample_squashed, save_tensors, squashed_backward


@dataclass
class AlgoConfig:
    gamma: float = 0.995
    lr: float = 5e-4
    alpha_lr: float = 1e-5
    lambda_lr: float = 1e-5
    batch_size: int = 256
    hidden: tuple[int, ...] = (256, 256)
    init_alpha: float = 0.0
    init_lambda: float = 0.0
    target_entropy: float | None = None  # None means -(action dim)
    cost_bound: float = 0.0
    eta: float = 0.995
    warmup: int = 1000
    buffer_capacity: int = 100_000
    episodes: int = 200
    steps: int = STEPS_PER_DAY
    updates_per_step: int = 1
    normalize_obs: bool = True
    exploration_noise: float = 0.1  # DDPG only
    dtype: str = "float32"  # network arithmetic; checkpoints are always float64

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name in ("lr", "batch_size", "episodes", "steps", "buffer_capacity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("alpha_lr", "lambda_lr", "init_alpha", "init_lambda", "warmup"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlgoConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LagrangeState:
    alpha: float
    lam: float
    alpha_lr: float
    lambda_lr: float  # doubles as the augmented-penalty coefficient
    target_entropy: float
    cost_bound: float

    @property
    def penalty(self) -> float:
        return self.lambda_lr


@dataclass(frozen=True, eq=False)
class Transition:
    s: np.ndarray
    a: np.ndarray
    reward: float
    cost: float
    s2: np.ndarray
    done: bool = False

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError("cost must be non-negative")


@dataclass(frozen=True, eq=False)
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    c: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __len__(self):
        return self.r.shape[0]


class Underfilled(RuntimeError):
    pass


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform batch sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.c = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def push(self, tr: Transition):
        i = self.head
        self.s[i] = tr.s
        self.a[i] = tr.a
        self.r[i] = tr.reward
        self.c[i] = tr.cost
        self.s2[i] = tr.s2
        self.done[i] = float(tr.done)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _chronological(self) -> np.ndarray:
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.head) % self.capacity

    def contents(self) -> Batch:
        idx = self._chronological()
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.c[idx], self.s2[idx], self.done[idx])

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Distinct rows drawn uniformly; the returned arrays are copies."""
        if self.size < batch_size:
            raise Underfilled(f"buffer holds {self.size} transitions, batch needs {batch_size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.c[idx], self.s2[idx], self.done[idx])


buffer_push = ReplayBuffer.push
buffer_sample = ReplayBuffer.sample


class ObsNormalizer:
    """Affine input standardization, fitted once on warm-up data and then frozen."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.std = np.ones(dim)

    def fit(self, states: np.ndarray):
        self.mean = states.mean(axis=0)
        std = states.std(axis=0)
        self.std = np.where(std < 1e-8, 1.0, std)

    def __call__(self, s):
        return (s - self.mean) / self.std


class GaussianActor:
    """Squashed-Gaussian policy over (a column subset of) the normalized state."""

    def __init__(self, obs_dim, act_dim, hidden, rng, lr, obs_index=None, dtype="float64"):
        self.obs_index = None if obs_index is None else np.asarray(obs_index, dtype=np.intp)
        in_dim = obs_dim if obs_index is None else len(self.obs_index)
        self.head = PolicyHead(in_dim, act_dim, hidden, rng, dtype)
        self.opt = Adam(self.head.params, lr)
        self.act_dim = act_dim

    def view(self, s):
        return s if self.obs_index is None else s[:, self.obs_index]

    def sample(self, s, xi):
        return sample_squashed(self.head, self.view(s), xi)

    def mean_action(self, s):
        return self.head.mean_action(self.view(s))

    def backward(self, cache, grad_a, grad_logp):
        return squashed_backward(self.head, cache, grad_a, grad_logp)

    def ascend(self, grads):
        self.opt.step(self.head.params, grads, ascent=True)

    def named_params(self, prefix):
        return self.head.trunk.named_params(prefix)


class CriticEnsemble:
    """Twin reward critics and (optionally) twin cost critics with target copies."""

    def __init__(self, in_dim, hidden, rng, lr, use_cost=True, dtype="float64"):
        sizes = [in_dim, *hidden, 1]
        self.q = [Mlp(sizes, rng, dtype), Mlp(sizes, rng, dtype)]
        self.qc = [Mlp(sizes, rng, dtype), Mlp(sizes, rng, dtype)] if use_cost else []
        self.q_target = [m.copy() for m in self.q]
        self.qc_target = [m.copy() for m in self.qc]
        self.q_opt = [Adam(m.params, lr) for m in self.q]
        self.qc_opt = [Adam(m.params, lr) for m in self.qc]

    @property
    def use_cost(self) -> bool:
        return bool(self.qc)

    def online(self):
        return self.q + self.qc

    def targets(self):
        return self.q_target + self.qc_target

    def named_params(self):
        out = {}
        for name, nets in (("q", self.q), ("q_target", self.q_target), ("qc", self.qc), ("qc_target", self.qc_target)):
            for i, net in enumerate(nets):
                out.update(net.named_params(f"{name}{i + 1}"))
        return out


# --- update pieces --------------------------------------------------------

def bellman_targets(r, c, done, q1, q2, qc1, qc2, logp, alpha, gamma):
    """Soft reward target from the smaller twin, cost target from the larger."""
    live = gamma * (1.0 - done)
    y = r + live * (np.minimum(q1, q2) - alpha * logp)
    yc = None if qc1 is None else c + live * np.maximum(qc1, qc2)
    return y, yc


def critic_targets(batch: Batch, critics: CriticEnsemble, policy, alpha, gamma, xi, reward=None):
    """Targets from a fresh policy sample at s'. ``batch`` holds normalized states."""
    a2, logp2, _ = policy.sample(batch.s2, xi)
    x2 = np.concatenate([batch.s2, a2], axis=1)
    q1, q2 = (net(x2)[:, 0] for net in critics.q_target)
    qc1 = qc2 = None
    if critics.use_cost:
        qc1, qc2 = (net(x2)[:, 0] for net in critics.qc_target)
    r = batch.r if reward is None else reward
    return bellman_targets(r, batch.c, batch.done, q1, q2, qc1, qc2, logp2, alpha, gamma)


def _fit(net: Mlp, opt: Adam, x, y) -> float:
    pred, cache = net.forward(x)
    err = pred[:, 0] - y
    loss = float(np.mean(err * err))
    grads, _ = net.backward(cache, (2.0 / len(y)) * err[:, None], input_grad=False)
    opt.step(net.params, grads)
    return loss


def update_critics(critics: CriticEnsemble, batch: Batch, y, yc):
    """One Adam step per critic on its squared error; returns pre-step mean losses."""
    x = np.concatenate([batch.s, batch.a], axis=1)
    loss = 0.5 * sum(_fit(net, opt, x, y) for net, opt in zip(critics.q, critics.q_opt))
    closs = float("nan")
    if critics.use_cost:
        closs = 0.5 * sum(_fit(net, opt, x, yc) for net, opt in zip(critics.qc, critics.qc_opt))
    return loss, closs


def lagrangian_value(mean_q, mean_logp, mean_qc, lag: LagrangeState) -> float:
    slack = lag.cost_bound - mean_qc
    return (
        mean_q
        + lag.alpha * (-lag.target_entropy - mean_logp)
        + lag.lam * slack
        + 0.5 * lag.penalty * slack * slack
    )


def update_multipliers(lag: LagrangeState, mean_logp: float, mean_qc: float | None):
    """Projected multiplier steps: each grows while its constraint is violated."""
    entropy = -mean_logp
    lag.alpha = max(0.0, lag.alpha + lag.alpha_lr * (lag.target_entropy - entropy))
    if mean_qc is not None:
        lag.lam = max(0.0, lag.lam + lag.lambda_lr * (mean_qc - lag.cost_bound))
    return lag.alpha, lag.lam


def soft_update(target: Mlp, online: Mlp, eta: float):
    """target <- eta * target + (1 - eta) * online, in place."""
    for t, o in zip(target.params, online.params):
        t *= eta
        t += (1.0 - eta) * o


# --- agent ----------------------------------------------------------------

def seed_streams(seed: int):
    """Independent generators for init, policy noise, batch sampling, episode order."""
    init, noise, sample, order = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(init), np.random.default_rng(noise),
            np.random.default_rng(sample), np.random.default_rng(order))


class ALSAC:
    algo = "alsac"

    def __init__(self, obs_dim, act_dim, config: AlgoConfig, init_rng, penalty: float | None = None,
                 policy=None):
        self.config = config
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.penalty = penalty
        use_cost = penalty is None
        if penalty is not None:
            self.algo = "sac"
        self.policy = policy if policy is not None else GaussianActor(
            obs_dim, act_dim, config.hidden, init_rng, config.lr, dtype=config.dtype)
        self.critics = CriticEnsemble(obs_dim + act_dim, config.hidden, init_rng, config.lr, use_cost,
                                      config.dtype)
        target_entropy = -float(act_dim) if config.target_entropy is None else config.target_entropy
        self.lag = LagrangeState(
            config.init_alpha,
            config.init_lambda if use_cost else 0.0,
            config.alpha_lr,
            config.lambda_lr if use_cost else 0.0,
            target_entropy,
            config.cost_bound,
        )
        self.normalizer = ObsNormalizer(obs_dim)

    # acting

    def act(self, obs, rng, deterministic=False):
        s = self.normalizer(np.asarray(obs, dtype=float)[None, :])
        if deterministic:
            return self.policy.mean_action(s)[0]
        a, _, _ = self.policy.sample(s, rng.standard_normal((1, self.act_dim)))
        return a[0]

    def fit_normalizer(self, buffer: ReplayBuffer):
        if self.config.normalize_obs:
            self.normalizer.fit(buffer.contents().s)

    # learning

    def update(self, batch: Batch, rng) -> dict:
        """One full update on a raw batch, in the fixed critic/multiplier/actor/target order."""
        nb = Batch(self.normalizer(batch.s), batch.a, batch.r, batch.c, self.normalizer(batch.s2), batch.done)
        closs = self._update_critics(nb, rng)
        fresh = self._fresh_sample(nb, rng)
        self._update_multipliers(fresh)
        value = self._update_actor(nb, fresh)
        self._update_targets()
        return {
            "critic_loss": closs[0],
            "cost_critic_loss": closs[1],
            "entropy": -fresh["mean_logp"],
            "lagrangian": value,
            "alpha": self.lag.alpha,
            "lambda": self.lag.lam,
        }

    def _update_critics(self, nb: Batch, rng):
        xi = rng.standard_normal((len(nb), self.act_dim))
        reward = nb.r if self.penalty is None else nb.r - self.penalty * nb.c
        y, yc = critic_targets(nb, self.critics, self.policy, self.lag.alpha, self.config.gamma, xi, reward)
        return update_critics(self.critics, nb, y, yc)

    def _fresh_sample(self, nb: Batch, rng) -> dict:
        xi = rng.standard_normal((len(nb), self.act_dim))
        a, logp, cache = self.policy.sample(nb.s, xi)
        x = np.concatenate([nb.s, a], axis=1)
        out = {"a": a, "logp": logp, "cache": cache, "mean_logp": float(np.mean(logp))}
        q = [net.forward(x) for net in self.critics.q]
        out["q"] = q
        out["q_pick"] = q[0][0][:, 0] <= q[1][0][:, 0]
        out["mean_q"] = float(np.mean(np.where(out["q_pick"], q[0][0][:, 0], q[1][0][:, 0])))
        out["mean_qc"] = None
        if self.critics.use_cost:
            qc = [net.forward(x) for net in self.critics.qc]
            out["qc"] = qc
            out["qc_pick"] = qc[0][0][:, 0] >= qc[1][0][:, 0]
            out["mean_qc"] = float(np.mean(np.where(out["qc_pick"], qc[0][0][:, 0], qc[1][0][:, 0])))
        return out

    def _update_multipliers(self, fresh: dict):
        update_multipliers(self.lag, fresh["mean_logp"], fresh["mean_qc"])

    def _update_actor(self, nb: Batch, fresh: dict) -> float:
        value, grads = self.actor_gradients(nb, fresh)
        self.policy.ascend(grads)
        return value

    def actor_gradients(self, nb: Batch, fresh: dict):
        """Lagrangian value and its gradient w.r.t. the actor, critics held fixed."""
        n = len(nb)
        lag = self.lag
        mean_qc = fresh["mean_qc"] if fresh["mean_qc"] is not None else lag.cost_bound
        value = lagrangian_value(fresh["mean_q"], fresh["mean_logp"], mean_qc, lag)
        grad_a = self._action_grad(self.critics.q, fresh["q"], fresh["q_pick"], 1.0 / n)
        if self.critics.use_cost:
            # d/dE[Qc] of the lambda term plus the quadratic penalty
            coef = -(lag.lam + lag.penalty * (lag.cost_bound - mean_qc))
            if coef != 0.0:
                grad_a = grad_a + self._action_grad(self.critics.qc, fresh["qc"], fresh["qc_pick"], coef / n)
        grad_logp = np.full(n, -lag.alpha / n, dtype=grad_a.dtype)
        return value, self.policy.backward(fresh["cache"], grad_a, grad_logp)

    def _action_grad(self, nets, outs, pick, scale):
        grad = 0.0
        for net, (_, cache), sel in zip(nets, outs, (pick, ~pick)):
            upstream = (scale * sel)[:, None]
            _, gx = net.backward(cache, upstream, param_grads=False)
            grad = grad + gx[:, self.obs_dim:]
        return grad

    def _update_targets(self):
        eta = self.config.eta
        for t, o in zip(self.critics.targets(), self.critics.online()):
            soft_update(t, o, eta)

    # persistence

    def tensors(self) -> dict:
        out = dict(self.policy.named_params("actor"))
        out.update(self.critics.named_params())
        out["obs_mean"] = self.normalizer.mean
        out["obs_std"] = self.normalizer.std
        return out

    def meta(self) -> dict:
        return {
            "algo": self.algo,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "penalty": self.penalty,
            "config": self.config.to_dict(),
            "lagrange": asdict(self.lag),
        }

    def load_tensors(self, tensors: dict):
        for name, arr in self.tensors().items():
            if name not in tensors:
                raise ValueError(f"checkpoint lacks tensor {name!r}")
            if tensors[name].shape != arr.shape:
                raise ValueError(f"checkpoint tensor {name!r} has shape {tensors[name].shape}, expected {arr.shape}")
            arr[...] = tensors[name]
        self.normalizer.mean = tensors["obs_mean"].copy()
        self.normalizer.std = tensors["obs_std"].copy()


def save_checkpoint(path, agent):
    """Tensor file at ``path`` plus a JSON sidecar ``<path>.json`` with the run settings."""
    from .io import atomic_write_text

    save_tensors(path, agent.tensors())
    atomic_write_text(str(path) + ".json", json.dumps(agent.meta(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, case=None):
    """Rebuild an agent from :func:`save_checkpoint` output. Multi-agent runs need ``case``."""
    meta = json.loads(Path(str(path) + ".json").read_text())
    config = AlgoConfig.from_dict(meta["config"])
    rng = np.random.default_rng(0)
    algo = meta["algo"]
    if algo == "ddpg":
        from .baselines import DDPG

        agent = DDPG(meta["obs_dim"], meta["act_dim"], config, rng, meta["penalty"])
    elif algo == "ctde":
        from .multiagent import MultiAgentSystem

        agent = MultiAgentSystem.from_meta(meta, config, rng, case)
    else:
        agent = ALSAC(meta["obs_dim"], meta["act_dim"], config, rng, meta["penalty"])
    agent.load_tensors(load_tensors(path))
    if "lagrange" in meta and hasattr(agent, "lag"):
        for k, v in meta["lagrange"].items():
            setattr(agent.lag, k, v)
    return agent


# --- training loop --------------------------------------------------------

@dataclass
class TrainResult:
    agent: object
    metrics: list[dict]
    truncated_episodes: int = 0
    log: list = field(default_factory=list)


def run_training(agent, env: VoltVarEnv, days: list[DayProfile], config: AlgoConfig, seed: int,
                 progress=None) -> TrainResult:
    """Shared episode loop for every learning agent."""
    _, noise_rng, sample_rng, order_rng = seed_streams(seed)
    explore_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    buffer = ReplayBuffer(config.buffer_capacity, env.obs_dim, env.action_dim)
    start = max(config.warmup, config.batch_size)
    perm = order_rng.permutation(len(days))
    total = 0
    metrics = []
    log = []
    truncated = 0
    for episode in range(config.episodes):
        if episode and episode % len(days) == 0:
            perm = order_rng.permutation(len(days))
        day = days[perm[episode % len(days)]]
        try:
            state = env.reset(day)
        except Diverged:
            # nothing to act on: the day is unsolvable even with every device idle
            truncated += 1
            metrics.append(_episode_row(episode, [np.nan], [np.nan], [], agent))
            if progress is not None:
                progress(metrics[-1])
            continue
        losses, costs, stats = [], [], []
        diverged = False
        for _ in range(config.steps):
            if total < start:
                a = explore_rng.uniform(-1.0, 1.0, size=env.action_dim)
            else:
                a = agent.act(state.obs, noise_rng)
            out = env.step(a)
            buffer.push(Transition(state.obs, a, out.reward, out.cost, out.next_state.obs, out.diverged))
            losses.append(out.loss_mw)
            costs.append(out.cost)
            total += 1
            if total == start:
                agent.fit_normalizer(buffer)
            if total >= start:
                for _ in range(config.updates_per_step):
                    stats.append(agent.update(buffer.sample(config.batch_size, sample_rng), noise_rng))
            state = out.next_state
            if out.done:
                diverged = out.diverged
                break
        truncated += int(diverged)
        metrics.append(_episode_row(episode, losses, costs, stats, agent))
        if stats and "agent_entropy" in stats[0]:
            per_agent = np.mean([st["agent_entropy"] for st in stats], axis=0)
            for ag, h in zip(agent.agents, per_agent):
                log.append({"episode": episode, "agent_id": ag.agent_id, "entropy_estimate": float(h)})
        if progress is not None:
            progress(metrics[-1])
    return TrainResult(agent, metrics, truncated, log)


def _episode_row(episode, losses, costs, stats, agent) -> dict:
    def mean_of(key):
        vals = [s[key] for s in stats if s.get(key) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    lag = getattr(agent, "lag", None)
    return {
        "episode": episode,
        "mean_loss_mw": float(np.mean(losses)),
        "mean_cost_pu": float(np.mean(costs)),
        "alpha": lag.alpha if lag is not None else float("nan"),
        "lambda": lag.lam if lag is not None else float("nan"),
        "critic_loss": mean_of("critic_loss"),
        "cost_critic_loss": mean_of("cost_critic_loss"),
        "entropy_estimate": mean_of("entropy"),
    }


def train(env: VoltVarEnv, days, config: AlgoConfig, seed: int, progress=None) -> TrainResult:
    """AL-SAC on ``days`` (one day per episode, reshuffled each pass)."""
    init_rng = seed_streams(seed)[0]
    agent = ALSAC(env.obs_dim, env.action_dim, config, init_rng)
    return run_training(agent, env, days, config, seed, progress)


def evaluate_policy(agent, env: VoltVarEnv, days) -> tuple[float, float]:
    """Greedy (mean-action) rollout; mean per-step loss (MW) and violation (p.u.)."""
    losses, costs = [], []
    for day in days:
        state = env.reset(day)
        while True:
            out = env.step(agent.act(state.obs, None, deterministic=True))
            losses.append(out.loss_mw)
            costs.append(out.cost)
            state = out.next_state
            if out.done:
                break
    return float(np.mean(losses)), float(np.mean(costs))
