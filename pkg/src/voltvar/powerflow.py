"""Backward/forward sweep power flow for radial feeders.

Injections follow the generator convention: positive P/Q is power fed into
the bus, loads are negative.  The compiled sweep kernel is used when it has
been built; ``VOLTVAR_PURE_PYTHON=1`` forces the NumPy fallback.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _sweep_py
from .grid import DEFAULT_VMAX, DEFAULT_VMIN, NetworkCase

try:
    if os.environ.get("VOLTVAR_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from ._sweep import sweep as _compiled_sweep
except ImportError:
    _compiled_sweep = None

BACKENDS = {"python": _sweep_py.sweep}
if _compiled_sweep is not None:
    BACKENDS["cython"] = _compiled_sweep
BACKEND = "cython" if _compiled_sweep is not None else "python"

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
DIVERGENCE_FLOOR = 0.3  # p.u.


class Diverged(RuntimeError):
    """Sweep blew up (|V| below the floor or NaN): the loading is infeasible."""


@dataclass(frozen=True)
class Injection:
    p: np.ndarray  # MW, case bus order
    q: np.ndarray  # MVar

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError("p and q must be 1-D arrays of equal length")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @classmethod
    def zeros(cls, case: NetworkCase) -> "Injection":
        return cls(np.zeros(case.n_bus), np.zeros(case.n_bus))

    @classmethod
    def from_loads(cls, case: NetworkCase, scale: float = 1.0) -> "Injection":
        p = np.array([-b.nominal_load_p for b in case.buses]) * scale
        q = np.array([-b.nominal_load_q for b in case.buses]) * scale
        return cls(p, q)


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    case: NetworkCase
    voltages: np.ndarray  # complex p.u., case bus order
    branch_currents: np.ndarray  # complex p.u., from_bus -> to_bus, case branch order
    slack_power: complex  # MVA drawn from the slack
    converged: bool
    iterations: int

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.voltages)

    @property
    def total_loss(self) -> float:
        return total_loss(self)


class SweepSystem:
    """Per-case arrays for the sweep, in breadth-first order."""

    def __init__(self, case: NetworkCase):
        order = case._order
        self.case = case
        self.perm = np.array([case.bus_index(b) for b in order.order], dtype=np.intp)
        self.parent = np.ascontiguousarray(order.parent_pos, dtype=np.intp)
        z = np.zeros(case.n_bus, dtype=np.complex128)
        sign = np.ones(case.n_bus)
        for k in range(1, case.n_bus):
            br = case.branches[order.branch_index[k]]
            z[k] = complex(br.r, br.x)
            if br.from_bus == order.order[k]:
                sign[k] = -1.0
        self.z = z
        self.sign = sign
        self.branch_of = order.branch_index
        self.r = np.array([br.r for br in case.branches])
        self.v_min = np.array([b.v_min for b in case.buses])
        self.v_max = np.array([b.v_max for b in case.buses])

    def solve_loads(self, s_load_pu: np.ndarray, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                    backend: str | None = None):
        """Raw batched solve. ``s_load_pu`` is (rows, n_bus) consumption in case order.

        Returns voltages and slack-to-bus currents in case order plus per-row
        iteration counts and status codes (0 converged, 1 max_iter, 2 diverged).
        """
        kernel = BACKENDS[backend or BACKEND]
        s = np.ascontiguousarray(np.atleast_2d(s_load_pu)[:, self.perm], dtype=np.complex128)
        V, J, iters, status = kernel(self.parent, self.z, s, 1.0, tol, max_iter, DIVERGENCE_FLOOR)
        Vc = np.empty_like(V)
        Vc[:, self.perm] = V
        Jc = np.empty_like(J)
        Jc[:, self.perm] = J
        return Vc, Jc, np.asarray(iters), np.asarray(status)

    def losses_mw(self, J_case: np.ndarray) -> np.ndarray:
        """Loss per row from currents in case bus order."""
        Jb = J_case[:, self.perm[1:]]
        r = self.r[self.branch_of[1:]]
        return (np.abs(Jb) ** 2 @ r) * self.case.base_mva


_systems: dict[int, SweepSystem] = {}


def sweep_system(case: NetworkCase) -> SweepSystem:
    sys_ = _systems.get(id(case))
    if sys_ is None or sys_.case is not case:
        if len(_systems) > 64:
            _systems.clear()
        sys_ = SweepSystem(case)
        _systems[id(case)] = sys_
    return sys_


def solve(case: NetworkCase, inj: Injection, tol: float = DEFAULT_TOL,
          max_iter: int = DEFAULT_MAX_ITER, backend: str | None = None) -> PowerFlowSolution:
    """Backward current sweep / forward voltage sweep until max |dV| < tol."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    if inj.p.shape[0] != case.n_bus:
        raise ValueError(f"injection has {inj.p.shape[0]} entries for {case.n_bus} buses")
    sys_ = sweep_system(case)
    s_load = -(inj.p + 1j * inj.q) / case.base_mva
    V, J, iters, status = sys_.solve_loads(s_load[None, :], tol, max_iter, backend)
    if status[0] == _sweep_py.DIVERGED:
        raise Diverged(f"sweep diverged after {iters[0]} iterations (|V| < {DIVERGENCE_FLOOR} p.u. or NaN)")
    V, J = V[0], J[0]
    order = case._order
    currents = np.zeros(len(case.branches), dtype=np.complex128)
    for k in range(1, case.n_bus):
        b = order.order[k]
        currents[order.branch_index[k]] = sys_.sign[k] * J[case.bus_index(b)]
    slack_idx = case.bus_index(case.slack_bus)
    slack_power = complex(V[slack_idx] * np.conj(J[slack_idx]) * case.base_mva)
    return PowerFlowSolution(case, V, currents, slack_power, bool(status[0] == 0), int(iters[0]))


def total_loss(sol: PowerFlowSolution) -> float:
    """Series loss in MW: sum of r |I|^2 over branches, scaled to MW."""
    r = np.array([br.r for br in sol.case.branches])
    return float(np.sum(r * np.abs(sol.branch_currents) ** 2) * sol.case.base_mva)


def violation_metric(v, v_min=DEFAULT_VMIN, v_max=DEFAULT_VMAX) -> float:
    """Sum over buses of the voltage-band excursion in p.u. (never negative).

    ``v`` is either a :class:`PowerFlowSolution`, in which case the per-bus
    limits of its case are used, or an array of magnitudes.
    """
    if isinstance(v, PowerFlowSolution):
        sys_ = sweep_system(v.case)
        v_min, v_max, v = sys_.v_min, sys_.v_max, v.vm
    v = np.asarray(v, dtype=float)
    over = np.maximum(v - v_max, 0.0)
    under = np.maximum(v_min - v, 0.0)
    total = np.sum(over + under, axis=-1)
    return float(total) if total.ndim == 0 else total
