"""Centralized training, decentralized execution.

Each agent owns a squashed-Gaussian actor that sees only the measurements of
its own bus(es) and drives its own device(s). Critics, replay and the (alpha,
lambda) pair are shared and see the global state and the joint action.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .alsac import ALSAC, AlgoConfig, GaussianActor, TrainResult, run_training, seed_streams
from .env import GridState, VoltVarEnv
from .grid import NetworkCase
from .io import atomic_write_text


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    devices: tuple[int, ...]  # 0-based device indices, in joint-action order
    buses: tuple[int, ...] = ()  # observed bus ids
    full_observation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(int(d) for d in self.devices))
        object.__setattr__(self, "buses", tuple(int(b) for b in self.buses))
        if not self.devices:
            raise ValueError(f"agent {self.agent_id} controls no device")
        if not self.full_observation and not self.buses:
            raise ValueError(f"agent {self.agent_id} observes nothing")

    @property
    def act_dim(self) -> int:
        return len(self.devices)


def local_indices(case: NetworkCase, agent: AgentSpec) -> np.ndarray | None:
    """Positions of [V, P, Q] for each observed bus in the global observation."""
    if agent.full_observation:
        return None
    n = case.n_bus
    idx = []
    for b in agent.buses:
        i = case.bus_index(b)
        idx += [2 * n + i, i, n + i]
    return np.array(idx, dtype=np.intp)


def local_obs(state: GridState | np.ndarray, agent: AgentSpec, case: NetworkCase) -> np.ndarray:
    obs = state.obs if isinstance(state, GridState) else np.asarray(state)
    idx = local_indices(case, agent)
    return obs.copy() if idx is None else obs[..., idx]


def device_agents(case: NetworkCase) -> list[AgentSpec]:
    """One agent per device, each watching the bus its device sits on."""
    return [AgentSpec(k + 1, (k,), (d.bus,)) for k, d in enumerate(case.devices)]


def single_full_agent(case: NetworkCase) -> list[AgentSpec]:
    return [AgentSpec(1, tuple(range(len(case.devices))), (), True)]


def validate_agents(case: NetworkCase, agents: list[AgentSpec]):
    seen = []
    for ag in agents:
        for d in ag.devices:
            if not 0 <= d < len(case.devices):
                raise ValueError(f"agent {ag.agent_id}: no device {d + 1}")
        seen += ag.devices
        for b in ag.buses:
            case.bus_index(b)
    if sorted(seen) != list(range(len(case.devices))):
        raise ValueError("every device must be driven by exactly one agent")
    if len({ag.agent_id for ag in agents}) != len(agents):
        raise ValueError("duplicate agent id")


# --- agent map files ------------------------------------------------------

_LINE = re.compile(r"^agent\s+(\d+)\s+device\s+(\d+)\s+bus\s+(\d+)$")


def parse_agent_map(text: str) -> list[AgentSpec]:
    """``agent <id> device <idx> bus <id>`` per line, device indices 1-based.

    Several lines with the same agent id give that agent several devices.
    """
    devices: dict[int, list[int]] = {}
    buses: dict[int, list[int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if m is None:
            raise ValueError(f"line {lineno}: expected 'agent <id> device <idx> bus <id>'")
        aid, dev, bus = (int(g) for g in m.groups())
        if dev < 1:
            raise ValueError(f"line {lineno}: device indices start at 1")
        devices.setdefault(aid, []).append(dev - 1)
        if bus not in buses.setdefault(aid, []):
            buses[aid].append(bus)
    return [AgentSpec(aid, tuple(devices[aid]), tuple(buses[aid])) for aid in devices]


def serialize_agent_map(agents: list[AgentSpec], case: NetworkCase) -> str:
    lines = []
    for ag in agents:
        for d in ag.devices:
            lines.append(f"agent {ag.agent_id} device {d + 1} bus {case.devices[d].bus}")
    return "\n".join(lines) + "\n"


def write_agent_map(path, agents, case):
    atomic_write_text(path, serialize_agent_map(agents, case))


# --- joint policy ---------------------------------------------------------

class JointPolicy:
    """Per-agent actors presented to the trainer as one policy over the joint action.

    The joint log-density is the sum of the agents' log-densities. Gradients
    for agent i only ever reach agent i's parameters.
    """

    def __init__(self, agents, actors, act_dim):
        self.agents = list(agents)
        self.actors = list(actors)
        self.act_dim = act_dim
        self.cols = [np.array(ag.devices, dtype=np.intp) for ag in self.agents]
        self.last_logp = [float("nan")] * len(self.actors)

    def sample(self, s, xi):
        xi = np.asarray(xi).reshape(s.shape[0], self.act_dim)
        a = None
        logp = None
        caches = []
        for k, (actor, cols) in enumerate(zip(self.actors, self.cols)):
            ak, lk, ck = actor.sample(s, xi[:, cols])
            if a is None:
                a = np.empty((s.shape[0], self.act_dim), dtype=ak.dtype)
                logp = lk
            else:
                logp = logp + lk
            a[:, cols] = ak
            caches.append(ck)
            self.last_logp[k] = float(np.mean(lk))
        return a, logp, caches

    def mean_action(self, s):
        a = None
        for actor, cols in zip(self.actors, self.cols):
            ak = actor.mean_action(s)
            if a is None:
                a = np.empty((s.shape[0], self.act_dim), dtype=ak.dtype)
            a[:, cols] = ak
        return a

    def backward(self, caches, grad_a, grad_logp):
        return [actor.backward(c, grad_a[:, cols], grad_logp)
                for actor, cols, c in zip(self.actors, self.cols, caches)]

    def ascend(self, grads):
        # fixed agent order
        for actor, g in zip(self.actors, grads):
            actor.ascend(g)

    def named_params(self, prefix):
        if len(self.actors) == 1:
            return self.actors[0].named_params(prefix)
        out = {}
        for ag, actor in zip(self.agents, self.actors):
            out.update(actor.named_params(f"{prefix}{ag.agent_id}"))
        return out


class MultiAgentSystem(ALSAC):
    """AL-SAC with the centralized actor swapped for per-agent local actors."""

    algo = "ctde"

    def __init__(self, case: NetworkCase, agents: list[AgentSpec], config: AlgoConfig, init_rng):
        validate_agents(case, agents)
        obs_dim = 3 * case.n_bus
        act_dim = len(case.devices)
        actors = [GaussianActor(obs_dim, ag.act_dim, config.hidden, init_rng, config.lr,
                                obs_index=local_indices(case, ag), dtype=config.dtype)
                  for ag in agents]
        self.case = case
        self.agents = list(agents)
        super().__init__(obs_dim, act_dim, config, init_rng, policy=JointPolicy(agents, actors, act_dim))

    def update(self, batch, rng) -> dict:
        stats = super().update(batch, rng)
        stats["agent_entropy"] = [-x for x in self.policy.last_logp]
        return stats

    def act_agents(self, obs, xi=None, deterministic=False):
        """Joint action from per-agent local views; ``xi`` holds one draw per device."""
        s = self.normalizer(np.asarray(obs, dtype=float)[None, :])
        if deterministic:
            return self.policy.mean_action(s)[0]
        a, _, _ = self.policy.sample(s, np.asarray(xi, dtype=float)[None, :])
        return a[0]

    def meta(self) -> dict:
        out = super().meta()
        out["agents"] = [{"agent_id": ag.agent_id, "devices": list(ag.devices), "buses": list(ag.buses),
                          "full_observation": ag.full_observation} for ag in self.agents]
        out["case"] = {"n_bus": self.case.n_bus}
        return out

    @classmethod
    def from_meta(cls, meta: dict, config: AlgoConfig, rng, case: NetworkCase | None = None):
        if case is None:
            raise ValueError("restoring a multi-agent checkpoint needs the case it was trained on")
        if case.n_bus != meta["case"]["n_bus"]:
            raise ValueError("checkpoint was trained on a different feeder")
        agents = [AgentSpec(d["agent_id"], tuple(d["devices"]), tuple(d["buses"]), d["full_observation"])
                  for d in meta["agents"]]
        return cls(case, agents, config, rng)


def decentralized_act(system: MultiAgentSystem, state, xi=None, deterministic=False):
    obs = state.obs if isinstance(state, GridState) else state
    return system.act_agents(obs, xi, deterministic)


def ctde_update(system: MultiAgentSystem, batch, rng) -> dict:
    return system.update(batch, rng)


def train_ctde(env: VoltVarEnv, days, agents: list[AgentSpec], config: AlgoConfig, seed: int,
               progress=None) -> TrainResult:
    system = MultiAgentSystem(env.case, agents, config, seed_streams(seed)[0])
    return run_training(system, env, days, config, seed, progress)
