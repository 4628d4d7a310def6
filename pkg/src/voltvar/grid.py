"""Radial feeder description: case files, device files and device capability.

Case files are plain text made of keyword blocks::

    baseMVA 10
    baseKV 12.66
    bus
    # id  type  Pd_MW  Qd_MVar  [Vmin  Vmax]
    1  3  0     0
    2  1  0.1   0.06
    branch
    # from  to  r  x  unit(0 = p.u., 1 = ohm)
    1  2  0.0922  0.0470  1

Device files hold one device per line, ``IBER <bus> <s_mva> <pmax_mw>`` or
``SVC <bus> <qmin_mvar> <qmax_mvar>``.
"""
from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

SLACK = 3
PQ = 1

DEFAULT_VMIN = 0.95
DEFAULT_VMAX = 1.05


class CaseError(ValueError):
    """Invalid case or device data."""


class CaseSyntaxError(CaseError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NotRadial(CaseError):
    """Branch graph is not a spanning tree rooted at the slack bus."""


@dataclass(frozen=True)
class Bus:
    id: int
    nominal_load_p: float = 0.0  # MW
    nominal_load_q: float = 0.0  # MVar
    v_min: float = DEFAULT_VMIN
    v_max: float = DEFAULT_VMAX

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise CaseError(f"bus {self.id}: v_min {self.v_min} must be below v_max {self.v_max}")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float  # p.u.
    x: float  # p.u.

    def __post_init__(self):
        if self.r < 0 or self.x < 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: negative impedance")
        if self.r == 0 and self.x == 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus}: zero impedance")


@dataclass(frozen=True)
class DeviceSpec:
    kind: str  # "IBER" or "SVC"
    bus: int
    s_rating: float | None = None  # MVA, IBER only
    p_max: float | None = None  # MW, IBER only
    q_min: float | None = None  # MVar, SVC only
    q_max: float | None = None  # MVar, SVC only

    def __post_init__(self):
        if self.kind == "IBER":
            if self.s_rating is None or self.p_max is None:
                raise CaseError("IBER needs s_rating and p_max")
            if not 0 <= self.p_max <= self.s_rating:
                raise CaseError(f"IBER at bus {self.bus}: need 0 <= p_max <= s_rating")
        elif self.kind == "SVC":
            if self.q_min is None or self.q_max is None:
                raise CaseError("SVC needs q_min and q_max")
            if self.q_min > self.q_max:
                raise CaseError(f"SVC at bus {self.bus}: q_min > q_max")
        else:
            raise CaseError(f"unknown device kind {self.kind!r}")

    @classmethod
    def iber(cls, bus: int, s_rating: float, p_max: float) -> "DeviceSpec":
        return cls("IBER", bus, s_rating=s_rating, p_max=p_max)

    @classmethod
    def svc(cls, bus: int, q_min: float, q_max: float) -> "DeviceSpec":
        return cls("SVC", bus, q_min=q_min, q_max=q_max)


@dataclass(frozen=True)
class TraversalOrder:
    """Breadth-first bus ordering from the slack with each bus's parent."""

    order: tuple[int, ...]
    parent: dict[int, int]
    # parent_pos[k] is the position in ``order`` of order[k]'s parent (-1 for the slack)
    parent_pos: np.ndarray = field(repr=False)
    # branch_index[k] is the case branch joining order[k] to its parent (-1 for the slack)
    branch_index: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    devices: tuple[DeviceSpec, ...] = ()
    slack_bus: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "devices", tuple(self.devices))
        if not self.base_mva > 0:
            raise CaseError("base_mva must be positive")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise CaseError("duplicate bus ids")
        if self.slack_bus is None or self.slack_bus not in ids:
            raise CaseError("missing slack bus")
        known = set(ids)
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise CaseError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
        for dev in self.devices:
            if dev.bus not in known:
                raise CaseError(f"{dev.kind} references unknown bus {dev.bus}")
        object.__setattr__(self, "_order", _traverse(self))
        object.__setattr__(self, "_index", {b: i for i, b in enumerate(ids)})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self, bus_id: int) -> int:
        return self._index[bus_id]

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def with_devices(self, devices) -> "NetworkCase":
        return NetworkCase(self.base_mva, self.buses, self.branches, tuple(devices), self.slack_bus)

    def __eq__(self, other):
        if not isinstance(other, NetworkCase):
            return NotImplemented
        return (
            self.base_mva == other.base_mva
            and self.buses == other.buses
            and self.branches == other.branches
            and self.devices == other.devices
            and self.slack_bus == other.slack_bus
        )

    __hash__ = None


def _traverse(case: NetworkCase) -> TraversalOrder:
    n = len(case.buses)
    if len(case.branches) != n - 1:
        raise NotRadial(f"{len(case.branches)} branches for {n} buses; a radial feeder needs {n - 1}")
    adj: dict[int, list[tuple[int, int]]] = {b.id: [] for b in case.buses}
    for k, br in enumerate(case.branches):
        if br.from_bus == br.to_bus:
            raise NotRadial(f"self-loop at bus {br.from_bus}")
        adj[br.from_bus].append((br.to_bus, k))
        adj[br.to_bus].append((br.from_bus, k))
    order = [case.slack_bus]
    parent: dict[int, int] = {}
    via: dict[int, int] = {}
    seen = {case.slack_bus}
    queue = deque([case.slack_bus])
    while queue:
        u = queue.popleft()
        for v, k in adj[u]:
            if k == via.get(u):
                continue
            if v in seen:
                raise NotRadial(f"cycle through branch {case.branches[k].from_bus}-{case.branches[k].to_bus}")
            seen.add(v)
            parent[v] = u
            via[v] = k
            order.append(v)
            queue.append(v)
    if len(order) != n:
        missing = sorted(set(adj) - seen)
        raise NotRadial(f"buses not connected to the slack: {missing[:10]}")
    pos = {b: i for i, b in enumerate(order)}
    parent_pos = np.array([-1] + [pos[parent[b]] for b in order[1:]], dtype=np.intp)
    branch_index = np.array([-1] + [via[b] for b in order[1:]], dtype=np.intp)
    return TraversalOrder(tuple(order), parent, parent_pos, branch_index)


def radial_order(case: NetworkCase) -> TraversalOrder:
    """Parent map and breadth-first ordering of ``case`` (validated at construction)."""
    return case._order


def qg_bounds(device: DeviceSpec, p_now: float | None = None) -> tuple[float, float]:
    """Reactive capability (MVar) of a device.

    Inverter headroom is taken against the active-power upper bound, not the
    instantaneous output, so ``p_now`` does not move the bounds.
    """
    if device.kind == "SVC":
        return device.q_min, device.q_max
    q = math.sqrt(max(device.s_rating**2 - device.p_max**2, 0.0))
    return -q, q


# --- case text format -----------------------------------------------------

_BLOCKS = ("basemva", "basekv", "bus", "branch")


def parse_case(text: str, devices=()) -> NetworkCase:
    """Parse case-file text into a validated :class:`NetworkCase`.

    Branch impedances flagged as ohms are converted to p.u. using ``baseKV``.
    """
    base_mva = None
    base_kv = None
    bus_rows: list[tuple[int, list[str]]] = []
    branch_rows: list[tuple[int, list[str]]] = []
    block = None
    warned: set[str] = set()

    def warn_once(key, msg):
        if key not in warned:
            warned.add(key)
            warnings.warn(msg, stacklevel=3)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split("%", 1)[0].strip()
        if not line:
            continue
        tokens = line.replace(";", " ").split()
        head = tokens[0].lower()
        if head.isalpha() or head in ("end",):
            if head == "end":
                block = None
                continue
            if head not in _BLOCKS:
                warn_once(head, f"ignoring unsupported block {tokens[0]!r}")
                block = "ignored"
                continue
            block = head
            rest = tokens[1:]
            if rest and head in ("basemva", "basekv"):
                value = _number(rest[0], lineno)
                if head == "basemva":
                    base_mva = value
                else:
                    base_kv = value
                block = None
            elif rest:
                raise CaseSyntaxError(f"unexpected values after {tokens[0]!r}", lineno)
            continue
        if block is None:
            raise CaseSyntaxError(f"data outside of a block: {raw.strip()!r}", lineno)
        if block == "ignored":
            continue
        if block == "basemva":
            base_mva = _number(tokens[0], lineno)
            block = None
        elif block == "basekv":
            base_kv = _number(tokens[0], lineno)
            block = None
        elif block == "bus":
            bus_rows.append((lineno, tokens))
        else:
            branch_rows.append((lineno, tokens))

    if base_mva is None:
        raise CaseSyntaxError("missing baseMVA")
    if not bus_rows:
        raise CaseSyntaxError("missing bus block")

    buses = []
    slack = []
    for lineno, tok in bus_rows:
        if len(tok) < 4:
            raise CaseSyntaxError("bus rows need id, type, Pd, Qd", lineno)
        if len(tok) > 6:
            warn_once("bus-cols", "ignoring bus columns beyond id, type, Pd, Qd, Vmin, Vmax")
        bus_id = _integer(tok[0], lineno)
        kind = _integer(tok[1], lineno)
        if kind not in (SLACK, PQ):
            raise CaseSyntaxError(f"bus type {kind} not supported (3 = slack, 1 = PQ)", lineno)
        if kind == SLACK:
            slack.append(bus_id)
        limits = {}
        if len(tok) >= 6:
            limits = dict(v_min=_number(tok[4], lineno), v_max=_number(tok[5], lineno))
        elif len(tok) == 5:
            raise CaseSyntaxError("bus rows give both Vmin and Vmax or neither", lineno)
        try:
            buses.append(Bus(bus_id, _number(tok[2], lineno), _number(tok[3], lineno), **limits))
        except CaseError as exc:
            raise CaseSyntaxError(str(exc), lineno) from None
    if not slack:
        raise CaseSyntaxError("missing slack bus (type 3)")
    if len(slack) > 1:
        raise CaseSyntaxError(f"more than one slack bus: {slack}")

    known = {b.id for b in buses}
    branches = []
    for lineno, tok in branch_rows:
        if len(tok) < 5:
            raise CaseSyntaxError("branch rows need from, to, r, x, unit", lineno)
        if len(tok) > 5:
            warn_once("branch-cols", "ignoring branch columns beyond from, to, r, x, unit")
        f, t = _integer(tok[0], lineno), _integer(tok[1], lineno)
        for end in (f, t):
            if end not in known:
                raise CaseSyntaxError(f"branch references unknown bus {end}", lineno)
        r, x = _number(tok[2], lineno), _number(tok[3], lineno)
        unit = _integer(tok[4], lineno)
        if unit == 1:
            if base_kv is None:
                raise CaseSyntaxError("ohmic impedances need a baseKV block", lineno)
            z_base = base_kv**2 / base_mva
            r, x = r / z_base, x / z_base
        elif unit != 0:
            raise CaseSyntaxError(f"unit flag must be 0 (p.u.) or 1 (ohm), got {unit}", lineno)
        try:
            branches.append(Branch(f, t, r, x))
        except CaseError as exc:
            raise CaseSyntaxError(str(exc), lineno) from None

    return NetworkCase(base_mva, tuple(buses), tuple(branches), tuple(devices), slack[0])


def _number(tok: str, lineno: int) -> float:
    try:
        value = float(tok)
    except ValueError:
        raise CaseSyntaxError(f"expected a number, got {tok!r}", lineno) from None
    if not math.isfinite(value):
        raise CaseSyntaxError(f"non-finite value {tok!r}", lineno)
    return value


def _integer(tok: str, lineno: int) -> int:
    value = _number(tok, lineno)
    if value != int(value):
        raise CaseSyntaxError(f"expected an integer, got {tok!r}", lineno)
    return int(value)


def serialize_case(case: NetworkCase) -> str:
    """Inverse of :func:`parse_case` on the retained fields (impedances in p.u.)."""
    lines = [f"baseMVA {case.base_mva!r}", "bus", "# id type Pd_MW Qd_MVar [Vmin Vmax]"]
    for b in case.buses:
        kind = SLACK if b.id == case.slack_bus else PQ
        row = f"{b.id} {kind} {b.nominal_load_p!r} {b.nominal_load_q!r}"
        if (b.v_min, b.v_max) != (DEFAULT_VMIN, DEFAULT_VMAX):
            row += f" {b.v_min!r} {b.v_max!r}"
        lines.append(row)
    lines += ["branch", "# from to r x unit"]
    for br in case.branches:
        lines.append(f"{br.from_bus} {br.to_bus} {br.r!r} {br.x!r} 0")
    return "\n".join(lines) + "\n"


def parse_devices(text: str, case: NetworkCase | None = None) -> tuple[DeviceSpec, ...]:
    devices = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind = tok[0].upper()
        if kind not in ("IBER", "SVC") or len(tok) != 4:
            raise CaseSyntaxError("expected 'IBER <bus> <s_mva> <pmax_mw>' or 'SVC <bus> <qmin> <qmax>'", lineno)
        bus = _integer(tok[1], lineno)
        a, b = _number(tok[2], lineno), _number(tok[3], lineno)
        try:
            dev = DeviceSpec.iber(bus, a, b) if kind == "IBER" else DeviceSpec.svc(bus, a, b)
        except CaseError as exc:
            raise CaseSyntaxError(str(exc), lineno) from None
        if case is not None and bus not in case.bus_ids:
            raise CaseSyntaxError(f"device references unknown bus {bus}", lineno)
        devices.append(dev)
    return tuple(devices)


def serialize_devices(devices) -> str:
    lines = []
    for d in devices:
        if d.kind == "IBER":
            lines.append(f"IBER {d.bus} {d.s_rating!r} {d.p_max!r}")
        else:
            lines.append(f"SVC {d.bus} {d.q_min!r} {d.q_max!r}")
    return "\n".join(lines) + "\n"


def load_case(case_path, device_path=None) -> NetworkCase:
    case = parse_case(Path(case_path).read_text())
    if device_path is not None:
        case = case.with_devices(parse_devices(Path(device_path).read_text(), case))
    return case


BUNDLED = ("case33bw", "case69", "case118zh")


def bundled_path(name: str, suffix: str = "case") -> Path:
    """Path of a bundled feeder file, e.g. ``bundled_path("case33bw", "devices")``."""
    return Path(str(resources.files("voltvar") / "data" / f"{name}.{suffix}"))


def bundled_case(name: str, with_devices: bool = True) -> NetworkCase:
    if name not in BUNDLED:
        raise KeyError(f"unknown bundled case {name!r}; choose from {BUNDLED}")
    return load_case(bundled_path(name), bundled_path(name, "devices") if with_devices else None)
