"""Run configuration: a flat ``key = value`` text file with ``#`` comments."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .alsac import AlgoConfig
from .grid import BUNDLED, bundled_path

ALGORITHMS = ("alsac", "sac", "ddpg", "mbo", "ctde")


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(",", " ").split())


def _names(v: str) -> tuple[str, ...]:
    return tuple(x for x in v.replace(",", " ").split())


def _opt_float(v: str):
    return None if v.lower() in ("none", "auto") else float(v)


def _opt_path(v: str):
    return None if v.lower() in ("", "none") else v


@dataclass
class RunConfig:
    case: str = "bundled:case33bw"
    devices: str | None = None  # defaults to the device file next to the case
    agents: str | None = None
    algorithm: str = "alsac"
    delta: float = 5.0
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs"
    profiles: str | None = None  # directory of training profile CSVs
    test_profiles: str | None = None
    synthetic_seed: int = 1000
    test_seed: int = 2000
    train_days: int = 200
    test_days: int = 10
    mbo_budget: int = 2000
    checkpoint: str | None = None
    metrics: str | None = None  # input for `plot`
    columns: tuple[str, ...] = ("mean_loss_mw",)
    observe: str = "local"  # ctde: local | full
    # algorithm settings; these mirror AlgoConfig
    gamma: float = 0.995
    lr: float = 5e-4
    alpha_lr: float = 1e-5
    lambda_lr: float = 1e-5
    batch_size: int = 256
    hidden: tuple[int, ...] = (256, 256)
    init_alpha: float = 0.0
    init_lambda: float = 0.0
    target_entropy: float | None = -1.0
    cost_bound: float = 0.0
    eta: float = 0.995
    warmup: int = 1000
    buffer_capacity: int = 100_000
    episodes: int = 200
    steps: int = 96
    updates_per_step: int = 1
    normalize_obs: bool = True
    exploration_noise: float = 0.1
    dtype: str = "float32"
    base_dir: Path = field(default=Path("."), repr=False)

    def algo_config(self) -> AlgoConfig:
        names = {f.name for f in fields(AlgoConfig)}
        return AlgoConfig(**{k: getattr(self, k) for k in names})

    def resolve(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def case_path(self) -> Path:
        if self.case.startswith("bundled:"):
            name = self.case.split(":", 1)[1]
            if name not in BUNDLED:
                raise ConfigError(f"unknown bundled case {name!r}; choose from {', '.join(BUNDLED)}")
            return bundled_path(name, "case")
        return self.resolve(self.case)

    def devices_path(self) -> Path | None:
        if self.devices is not None:
            return self.resolve(self.devices)
        p = self.case_path().with_suffix(".devices")
        return p if p.exists() else None

    def agents_path(self) -> Path | None:
        if self.agents is not None:
            return self.resolve(self.agents)
        p = self.case_path().with_suffix(".agents")
        return p if p.exists() else None

    def out_dir(self) -> Path:
        return self.resolve(self.out)


_CONVERTERS = {
    "delta": float, "synthetic_seed": int, "test_seed": int, "train_days": int, "test_days": int,
    "mbo_budget": int, "gamma": float, "lr": float, "alpha_lr": float, "lambda_lr": float,
    "batch_size": int, "init_alpha": float, "init_lambda": float, "cost_bound": float, "eta": float,
    "warmup": int, "buffer_capacity": int, "episodes": int, "steps": int, "updates_per_step": int,
    "exploration_noise": float, "seeds": _ints, "hidden": _ints, "columns": _names,
    "normalize_obs": _bool, "target_entropy": _opt_float, "devices": _opt_path, "agents": _opt_path,
    "profiles": _opt_path, "test_profiles": _opt_path, "checkpoint": _opt_path, "metrics": _opt_path,
}


def parse_config(text: str, base_dir=".") -> RunConfig:
    known = {f.name for f in fields(RunConfig)} - {"base_dir"}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: {key!r} given twice")
        try:
            values[key] = _CONVERTERS.get(key, str)(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    cfg = RunConfig(**values, base_dir=Path(base_dir))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {', '.join(ALGORITHMS)}, got {cfg.algorithm!r}")
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one seed")
    if cfg.observe not in ("local", "full"):
        raise ConfigError("observe must be 'local' or 'full'")
    if cfg.delta < 0:
        raise ConfigError("delta must be non-negative")
    if cfg.mbo_budget < 1:
        raise ConfigError("mbo_budget must be at least 1")
    case = cfg.case_path()
    if not case.is_file():
        raise ConfigError(f"case file not found: {case}")
    for label, p in (("devices", cfg.devices), ("agents", cfg.agents), ("profiles", cfg.profiles),
                     ("test_profiles", cfg.test_profiles)):
        if p is not None and not cfg.resolve(p).exists():
            raise ConfigError(f"{label} path not found: {cfg.resolve(p)}")
    try:
        cfg.algo_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        if f.name == "base_dir":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
