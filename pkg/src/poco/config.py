"""Training configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .envs import DEFAULT_DEMO_NOISE, EnvSpec, make_env


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # environment
    env: str = "point_reach"
    env_overrides: dict = field(default_factory=dict)
    # chunking / flow
    T: int = 5
    K: int = 10
    N: int = 32
    # E-M update
    gamma: float = 0.99
    eta: float = 0.1
    beta: float = 1.0
    zeta: float = 0.3
    # optimisation
    batch_size: int = 256
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    tau: float = 0.005
    actor_hidden: tuple = (512, 512, 512, 512)
    critic_hidden: tuple = (512, 512, 512, 512)
    # schedule
    offline_steps: int = 20_000
    warmup_steps: int = 5_000
    online_steps: int = 100_000
    utd_ratio: float = 1.0
    log_every: int = 100
    eval_every: int = 1_000
    eval_trials: int = 50
    # data
    n_demos: int = 50
    demo_noise: float = DEFAULT_DEMO_NOISE
    buffer_capacity: int = 1_000_000
    seed: int = 0
    demo_path: str = ""
    checkpoint_dir: str = ""
    metrics_path: str = ""
    mode: str = "sequential"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.T >= 1, "T must be >= 1"),
            (self.K >= 1, "K must be >= 1"),
            (self.N >= 1, "N must be >= 1"),
            (0 < self.gamma < 1, "gamma must lie in (0, 1)"),
            (self.eta > 0, "eta must be positive"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.zeta >= 0, "zeta must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.actor_lr > 0 and self.critic_lr > 0, "learning rates must be positive"),
            (0 <= self.tau <= 1, "tau must lie in [0, 1]"),
            (self.offline_steps >= 0 and self.warmup_steps >= 0 and self.online_steps >= 0,
             "step counts must be >= 0"),
            (self.utd_ratio > 0, "utd_ratio must be positive"),
            (self.log_every >= 1 and self.eval_every >= 1, "log/eval intervals must be >= 1"),
            (self.eval_trials >= 0, "eval_trials must be >= 0"),
            (self.n_demos >= 1, "n_demos must be >= 1"),
            (self.mode in ("sequential", "concurrent"), "mode must be sequential or concurrent"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        self.env_spec()

    def env_spec(self) -> EnvSpec:
        try:
            return make_env(self.env, **self.env_overrides)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad environment settings: {exc}") from None

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_ENV_FIELDS = {f.name: f for f in fields(EnvSpec) if f.init and f.name != "name"}


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(default, int):
        f = float(raw.replace("_", ""))
        if not f.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(f)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.split(",") if p.strip())
    return raw


def _coerce_env(name: str, raw: str):
    default = getattr(make_env("point_reach"), name)
    if name == "goals":
        vals = [float(v) for v in raw.replace("(", "").replace(")", "").replace(" ", "").split(",") if v]
        if len(vals) % 2:
            raise ValueError("goals needs x,y pairs")
        return tuple(zip(vals[::2], vals[1::2]))
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(","))
    return type(default)(raw)


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig) if f.name != "env_overrides"}
    defaults = TrainConfig()
    values: dict = {}
    env_over: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("env."):
                sub = key[4:]
                if sub not in _ENV_FIELDS:
                    raise ConfigError(f"{source}:{lineno}: unknown environment key {key!r}")
                env_over[sub] = _coerce_env(sub, raw)
            elif key in known:
                values[key] = _coerce(raw, getattr(defaults, key))
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return TrainConfig(**values, env_overrides=env_over)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(), str(path))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        if f.name == "env_overrides":
            continue
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    for k, v in cfg.env_overrides.items():
        if k == "goals":
            v = ",".join(f"{x},{y}" for x, y in v)
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"env.{k} = {v}")
    return "\n".join(lines) + "\n"
