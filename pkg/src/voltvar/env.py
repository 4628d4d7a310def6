"""Volt/VAR control as a constrained MDP over 96-step days.

Observation: net injections P and Q (p.u. on the case base) and voltage
magnitudes, laid out as ``[P_1..P_N, Q_1..Q_N, V_1..V_N]``.  Action: one
normalized reactive setpoint in [-1, 1] per device.  Reward is minus the
feeder loss in MW; cost is the summed voltage-band excursion in p.u.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import NetworkCase, qg_bounds
from .powerflow import Diverged, Injection, solve, sweep_system, total_loss, violation_metric

STEPS_PER_DAY = 96


@dataclass(frozen=True, eq=False)
class DayProfile:
    loads: np.ndarray  # (96, n_bus) multipliers on nominal P and Q
    gen: np.ndarray  # (96, n_iber) available inverter active power, MW
    name: str = ""

    def __post_init__(self):
        loads = np.asarray(self.loads, dtype=float)
        gen = np.asarray(self.gen, dtype=float)
        if gen.ndim == 1 and gen.size == 0:
            gen = gen.reshape(loads.shape[0], 0)
        if loads.ndim != 2 or loads.shape[0] != STEPS_PER_DAY:
            raise ValueError(f"load profile must have {STEPS_PER_DAY} rows, got {loads.shape[0] if loads.ndim else 0}")
        if gen.ndim != 2 or gen.shape[0] != STEPS_PER_DAY:
            raise ValueError(f"generation profile must have {STEPS_PER_DAY} rows")
        if not (np.all(np.isfinite(loads)) and np.all(np.isfinite(gen))):
            raise ValueError("profiles must be finite")
        if np.any(gen < 0):
            raise ValueError("available generation must be non-negative")
        object.__setattr__(self, "loads", loads)
        object.__setattr__(self, "gen", gen)


@dataclass(frozen=True, eq=False)
class GridState:
    obs: np.ndarray
    t: int


@dataclass(frozen=True, eq=False)
class StepOutcome:
    next_state: GridState
    reward: float
    cost: float
    done: bool
    diverged: bool = False
    loss_mw: float = 0.0


def scale_action(a, bounds: np.ndarray) -> np.ndarray:
    """Map normalized actions in [-1, 1] onto ``bounds`` rows ``(q_min, q_max)`` (MVar)."""
    a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + (a + 1.0) / 2.0 * (hi - lo)


class VoltVarEnv:
    """Single feeder, one day per episode."""

    def __init__(self, case: NetworkCase, loss_penalty_cap: float = 10.0, cost_cap: float = 1.0):
        if not case.devices:
            raise ValueError("case has no reactive-support devices")
        self.case = case
        self.loss_penalty_cap = loss_penalty_cap
        self.cost_cap = cost_cap
        self.n_bus = case.n_bus
        self.device_bus = np.array([case.bus_index(d.bus) for d in case.devices], dtype=np.intp)
        self.iber = [i for i, d in enumerate(case.devices) if d.kind == "IBER"]
        self.p_max = np.array([case.devices[i].p_max for i in self.iber])
        self.bounds = np.array([qg_bounds(d) for d in case.devices], dtype=float)
        self.load_p = np.array([b.nominal_load_p for b in case.buses])
        self.load_q = np.array([b.nominal_load_q for b in case.buses])
        self.slack = case.bus_index(case.slack_bus)
        self.day: DayProfile | None = None
        self.t = 0
        self.done = True

    @property
    def obs_dim(self) -> int:
        return 3 * self.n_bus

    @property
    def action_dim(self) -> int:
        return len(self.case.devices)

    def check_profile(self, day: DayProfile):
        if day.loads.shape[1] != self.n_bus:
            raise ValueError(f"load profile has {day.loads.shape[1]} buses, case has {self.n_bus}")
        if day.gen.shape[1] != len(self.iber):
            raise ValueError(f"generation profile has {day.gen.shape[1]} columns for {len(self.iber)} IBERs")
        if np.any(day.gen > self.p_max + 1e-12):
            raise ValueError("available generation exceeds an IBER's p_max")

    def injection(self, day: DayProfile, t: int, q_dev: np.ndarray) -> Injection:
        """Net bus injection at row ``t`` with device reactive outputs ``q_dev`` (MVar)."""
        p = -self.load_p * day.loads[t]
        q = -self.load_q * day.loads[t]
        if self.iber:
            np.add.at(p, self.device_bus[self.iber], day.gen[t])
        np.add.at(q, self.device_bus, q_dev)
        return Injection(p, q)

    def _observe(self, inj: Injection, sol) -> np.ndarray:
        base = self.case.base_mva
        p = inj.p / base
        q = inj.q / base
        # the slack bus reports what the substation delivers
        p[self.slack] += sol.slack_power.real / base
        q[self.slack] += sol.slack_power.imag / base
        return np.concatenate([p, q, sol.vm])

    def reset(self, day: DayProfile) -> GridState:
        self.check_profile(day)
        self.day = day
        self.t = 0
        self.done = False
        inj = self.injection(day, 0, np.zeros(self.action_dim))
        sol = solve(self.case, inj)
        return GridState(self._observe(inj, sol), 0)

    def step(self, a) -> StepOutcome:
        if self.done or self.day is None:
            raise RuntimeError("episode finished; call reset()")
        q_dev = scale_action(a, self.bounds)
        inj = self.injection(self.day, self.t, q_dev)
        self.t += 1
        try:
            sol = solve(self.case, inj)
        except Diverged:
            self.done = True
            obs = np.zeros(self.obs_dim)
            return StepOutcome(GridState(obs, self.t), -self.loss_penalty_cap, self.cost_cap, True, True,
                               self.loss_penalty_cap)
        loss = total_loss(sol)
        cost = violation_metric(sol)
        self.done = self.t >= STEPS_PER_DAY
        return StepOutcome(GridState(self._observe(inj, sol), self.t), -loss, cost, self.done, False, loss)

    def evaluate_batch(self, day: DayProfile, t: int, q_dev: np.ndarray):
        """Loss (MW), violation (p.u.) and divergence flag for each row of ``q_dev``."""
        q_dev = np.atleast_2d(q_dev)
        base = self.injection(day, t, np.zeros(self.action_dim))
        s_load = np.tile(-(base.p + 1j * base.q), (q_dev.shape[0], 1))
        for j, b in enumerate(self.device_bus):
            s_load[:, b] -= 1j * q_dev[:, j]
        s_load /= self.case.base_mva
        sys_ = sweep_system(self.case)
        V, J, _, status = sys_.solve_loads(s_load)
        diverged = status == 2
        loss = sys_.losses_mw(J)
        viol = violation_metric(np.abs(V), sys_.v_min, sys_.v_max)
        loss = np.where(diverged, np.inf, loss)
        viol = np.where(diverged, np.inf, viol)
        return loss, viol, diverged


# --- synthetic data -------------------------------------------------------

def _bump(h, center, width):
    d = (h - center + 12.0) % 24.0 - 12.0
    return np.exp(-0.5 * (d / width) ** 2)


def diurnal_load_shape(steps: int = STEPS_PER_DAY) -> np.ndarray:
    """Residential-style curve: low overnight, morning shoulder, evening peak."""
    h = np.arange(steps) * 24.0 / steps
    return 0.5 + 0.22 * _bump(h, 8.0, 1.8) + 0.15 * _bump(h, 13.0, 3.0) + 0.55 * _bump(h, 19.0, 2.2)


def solar_shape(steps: int = STEPS_PER_DAY) -> np.ndarray:
    h = np.arange(steps) * 24.0 / steps
    x = np.clip((h - 6.0) / 12.0, 0.0, 1.0)
    return np.sin(np.pi * x) ** 1.5


def generate_synthetic_profiles(seed: int, n_days: int, case: NetworkCase,
                                mult_range=(0.4, 1.3)) -> list[DayProfile]:
    """Deterministic synthetic days: diurnal loads with per-bus noise, cloudy solar."""
    if n_days < 1:
        raise ValueError("n_days must be at least 1")
    rng = np.random.default_rng(seed)
    n = case.n_bus
    ibers = [d for d in case.devices if d.kind == "IBER"]
    p_max = np.array([d.p_max for d in ibers])
    base_load = diurnal_load_shape()
    sun = solar_shape()
    days = []
    for k in range(n_days):
        level = rng.uniform(0.8, 1.12)
        bus_scale = rng.uniform(0.85, 1.15, size=n)
        wiggle = _smooth_noise(rng, (STEPS_PER_DAY, n), sigma=0.05, rho=0.9)
        loads = level * base_load[:, None] * bus_scale[None, :] + wiggle
        loads = np.clip(loads, *mult_range)

        clearness = rng.uniform(0.25, 1.0)
        clouds = _smooth_noise(rng, (STEPS_PER_DAY, len(ibers)), sigma=0.35 * (1.0 - clearness) + 0.03, rho=0.8)
        gen = p_max[None, :] * sun[:, None] * np.clip(clearness + clouds, 0.0, 1.0)
        gen = np.clip(gen, 0.0, p_max[None, :])
        days.append(DayProfile(loads, gen, name=f"synthetic_{seed}_{k:03d}"))
    return days


def _smooth_noise(rng, shape, sigma, rho):
    out = np.empty(shape)
    x = rng.normal(0.0, sigma, size=shape[1:])
    innovation = sigma * np.sqrt(1.0 - rho**2)
    for t in range(shape[0]):
        out[t] = x
        x = rho * x + rng.normal(0.0, innovation, size=shape[1:])
    return out


# --- profile CSV files ----------------------------------------------------

def write_profile(day: DayProfile, case: NetworkCase, directory, label: str):
    """Write ``loads_<label>.csv`` and ``gen_<label>.csv`` into ``directory``."""
    from .io import atomic_write_text

    directory = Path(directory)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [f"bus_{b}" for b in case.bus_ids])
    for t, row in enumerate(day.loads):
        w.writerow([t] + [repr(float(v)) for v in row])
    atomic_write_text(directory / f"loads_{label}.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step"] + [f"der_{j + 1}" for j in range(day.gen.shape[1])])
    for t, row in enumerate(day.gen):
        w.writerow([t] + [repr(float(v)) for v in row])
    atomic_write_text(directory / f"gen_{label}.csv", buf.getvalue())


def _read_table(path: Path, prefix: str, expected: list[str] | None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    if header[0] != "step" or any(not h.startswith(prefix) for h in header[1:]):
        raise ValueError(f"{path}: header must be step,{prefix}...")
    if expected is not None and header[1:] != expected:
        raise ValueError(f"{path}: columns {header[1:]} do not match {expected}")
    data = rows[1:]
    if len(data) != STEPS_PER_DAY:
        raise ValueError(f"{path}: expected {STEPS_PER_DAY} data rows, found {len(data)}")
    out = np.empty((STEPS_PER_DAY, len(header) - 1))
    for t, row in enumerate(data):
        if len(row) != len(header) or int(row[0]) != t:
            raise ValueError(f"{path}: malformed row {t + 2}")
        out[t] = [float(v) for v in row[1:]]
    return out


def read_profile(directory, label: str, case: NetworkCase) -> DayProfile:
    directory = Path(directory)
    loads = _read_table(directory / f"loads_{label}.csv", "bus_", [f"bus_{b}" for b in case.bus_ids])
    n_iber = sum(d.kind == "IBER" for d in case.devices)
    gen = _read_table(directory / f"gen_{label}.csv", "der_", [f"der_{j + 1}" for j in range(n_iber)])
    return DayProfile(loads, gen, name=label)


def list_profiles(directory) -> list[str]:
    """Day labels with both a loads and a gen file, sorted."""
    directory = Path(directory)
    labels = {p.name[len("loads_"):-4] for p in directory.glob("loads_*.csv")}
    return sorted(l for l in labels if (directory / f"gen_{l}.csv").exists())


def read_profiles(directory, case: NetworkCase) -> list[DayProfile]:
    return [read_profile(directory, label, case) for label in list_profiles(directory)]
