"""Training configuration: dataclass, flat key=value files, CLI overrides.

Config files are UTF-8 text, one ``key = value`` per line, ``#`` comments.
Override keys may be written dotted (``intervener.stall_window``); dots are
treated as underscores since the config is flat.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

MODES = ("e2hil", "uniform")


@dataclass
class TrainConfig:
    task: str = "touch2"
    mode: str = "e2hil"  # "uniform" disables selection (mask forced all-ones)
    total_steps: int = 60_000
    batch_size: int = 256
    gradient_steps: int = 1
    gamma: float = 0.99
    rho_polyak: float = 0.995
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    lr_alpha: float = 3e-4
    alpha_init: float = 0.1
    target_entropy: float | None = None  # default: -action_dim
    k_draws: int = 8
    low_pct: float = 5.0
    high_pct: float = 90.0
    mask_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 5_000
    eval_episodes: int = 20
    demo_episodes: int = 10
    hidden_dim: int = 64
    hidden_layers: int = 2
    replay_capacity: int = 200_000
    demo_capacity: int = 20_000
    probe_states: int = 64
    probe_refresh: int = 1_000
    stall_window: int = 40
    stall_epsilon: float = 0.01
    oob_margin: float = 0.0
    expert_gain: float = 1.0
    max_takeover_len: int = 30
    resume_progress: float = 0.25
    expert_noise: float = 0.0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even and >= 2")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if not 0.0 <= self.rho_polyak <= 1.0:
            raise ValueError("rho_polyak must be in [0, 1]")
        if not 0.0 <= self.low_pct <= self.high_pct <= 100.0:
            raise ValueError("need 0 <= low_pct <= high_pct <= 100")
        if self.k_draws < 2:
            raise ValueError("k_draws must be >= 2")
        if self.gradient_steps < 1:
            raise ValueError("gradient_steps must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def config_defaults() -> dict:
    return dataclasses.asdict(TrainConfig())


def _coerce(key: str, raw: str):
    f = _FIELDS[key]
    text = raw.strip()
    if f.type in ("float | None", "Optional[float]") or key == "target_entropy":
        if text.lower() in ("none", "null", ""):
            return None
        return float(text)
    default = getattr(TrainConfig(), key)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def normalize_key(key: str) -> str:
    return key.strip().replace(".", "_").replace("-", "_")


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = normalize_key(key)
        if key not in _FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def load_config_file(path: str | Path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> TrainConfig:
    """File values first, then overrides; both maps use config keys."""
    merged = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            key = normalize_key(key)
            if key not in _FIELDS:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value) if isinstance(value, str) else value
    cfg = TrainConfig(**merged)
    cfg.validate()
    return cfg
