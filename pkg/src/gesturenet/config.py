"""Run configuration: flat ``key = value`` files overridden by CLI flags."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    seed: int | None = None
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 1.0
    float_epochs: int = 0
    batch_size: int = 32
    depth_alpha: int = 3
    mode: str = "float"
    xnor_grad: bool = False
    threads: int = 1
    out: str = ""

    def validate(self, need_seed=True):
        if need_seed and self.seed is None:
            raise ConfigError("a seed is required (--seed or 'seed = N' in the config file)")
        if self.seed is not None and not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for name in ("epochs", "batch_size", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 <= self.float_epochs:
            raise ConfigError("float_epochs must be non-negative")
        if self.mode != "float" and self.float_epochs >= self.epochs:
            raise ConfigError("float_epochs must be smaller than epochs when training binarized")
        if self.depth_alpha < 0:
            raise ConfigError("depth_alpha must be non-negative")
        if self.mode not in ("float", "binarized", "both"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        return self

    def dump(self):
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k} = {'' if v is None else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def estimator_params(self):
        return {"epochs": self.epochs, "lr": self.lr, "momentum": self.momentum,
                "lr_decay": self.lr_decay, "batch_size": self.batch_size, "random_state": self.seed,
                "xnor_grad": self.xnor_grad, "float_epochs": self.float_epochs}

    def fingerprint(self):
        """Config fields that affect results (``threads`` and ``out`` do not)."""
        d = asdict(self)
        d.pop("threads")
        d.pop("out")
        return d


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if "bool" in kind:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if "int" in kind:
            return None if raw == "" else int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config(text, source="<config>"):
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then non-None ``overrides``."""
    values = {}
    if path:
        values.update(parse_config(Path(path).read_text(encoding="utf-8"), str(path)))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return RunConfig(**values)
