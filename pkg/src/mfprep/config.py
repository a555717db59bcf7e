"""Experiment and training configuration.

Config files are flat ``key = value`` text, one key per line, ``#`` comments.
Unknown keys and malformed values raise ``ConfigError``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .hamiltonian import MAX_QUBITS as MAX_SYS_QUBITS
from .quantum import StepLayout

EXACT_BRANCH_BUDGET = 2**20


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    n_sys: int = 1
    n_anc_m: int = 2
    n_anc_t: int = 2
    steps: int = 5
    depth: int = 2
    init_mode: str = "mixed"
    mixture: int = 4
    hidden: int = 64

    @property
    def layout(self) -> StepLayout:
        return StepLayout(self.n_sys, self.n_anc_m, self.n_anc_t, self.depth)

    @property
    def input_width(self) -> int:
        return 4**self.n_sys + self.n_anc_m

    @property
    def output_width(self) -> int:
        return self.layout.parameter_count

    @property
    def exact_branches(self) -> int:
        return 2 ** (self.n_anc_m * (self.steps - 1))


@dataclass(frozen=True)
class TrainConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    mode: str = "auto"
    auto_exact_limit: int = 256
    batch_size: int = 16
    trajectories: int = 32
    epochs: int = 3000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    prune_threshold: float = 1e-12
    checkpoint_every: int = 500

    @property
    def resolved_mode(self) -> str:
        if self.mode != "auto":
            return self.mode
        return "exact" if self.experiment.exact_branches <= self.auto_exact_limit else "sampled"

    def validate(self) -> "TrainConfig":
        e = self.experiment
        if not 1 <= e.n_sys <= MAX_SYS_QUBITS:
            raise ConfigError(f"n_sys must be in 1..{MAX_SYS_QUBITS}")
        try:
            e.layout
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if e.init_mode not in ("pure", "mixed"):
            raise ConfigError(f"init_mode must be pure or mixed, got {e.init_mode!r}")
        for name in ("steps", "mixture", "hidden", "batch_size", "trajectories", "auto_exact_limit"):
            v = getattr(e, name, None) if hasattr(e, name) else getattr(self, name)
            if v < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.checkpoint_every < 1:
            raise ConfigError("epochs must be >= 0 and checkpoint_every >= 1")
        if self.learning_rate <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ConfigError("invalid Adam hyperparameters")
        if self.mode not in ("auto", "exact", "sampled"):
            raise ConfigError(f"mode must be auto, exact or sampled, got {self.mode!r}")
        if self.resolved_mode == "exact" and e.exact_branches > EXACT_BRANCH_BUDGET:
            raise ConfigError(
                f"exact mode needs {e.exact_branches} branches, budget is {EXACT_BRANCH_BUDGET}"
            )
        return self


PRESETS = {
    "single": TrainConfig(ExperimentConfig(1, 2, 2, 5, init_mode="mixed"), epochs=3000),
    "two": TrainConfig(ExperimentConfig(2, 2, 2, 8, init_mode="pure"), epochs=8000),
}

_EXP_KEYS = {f.name: f.type for f in fields(ExperimentConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "experiment"}


def _convert(key: str, raw: str, like):
    try:
        if isinstance(like, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw.strip().strip('"')
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def with_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    exp_kw, train_kw = {}, {}
    for key, raw in values.items():
        if key in _EXP_KEYS:
            like = getattr(cfg.experiment, key)
            exp_kw[key] = _convert(key, raw, like) if isinstance(raw, str) else raw
        elif key in _TRAIN_KEYS:
            like = getattr(cfg, key)
            train_kw[key] = _convert(key, raw, like) if isinstance(raw, str) else raw
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return replace(cfg, experiment=replace(cfg.experiment, **exp_kw), **train_kw)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    base = base or TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if key in values or values:
                raise ConfigError("preset must be the first key")
            if val not in PRESETS:
                raise ConfigError(f"unknown preset {val!r}")
            base = PRESETS[val]
            continue
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    return with_overrides(base, values).validate()


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base)


def canonical_text(cfg: TrainConfig) -> str:
    """Sorted ``key = value`` lines; parse_config(canonical_text(c)) == c."""
    items = dataclasses.asdict(cfg.experiment)
    items.update({k: getattr(cfg, k) for k in _TRAIN_KEYS})
    return "".join(f"{k} = {items[k]!r}\n" if isinstance(items[k], float) else f"{k} = {items[k]}\n"
                   for k in sorted(items))
