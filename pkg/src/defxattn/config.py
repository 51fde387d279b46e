"""Run configuration stored as a flat ``key=value`` text file.

Model keys (see :class:`~defxattn.network.ModelConfig`) and run keys share
one namespace. Tuples are comma separated, booleans are ``true``/``false``,
``#`` starts a comment. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .network import ModelConfig


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    lr_schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ncc_window: int = 5
    epochs: int = 10
    seed: int = 0
    n_train: int = 8
    n_val: int = 4
    n_labels: int = 4
    max_warp: float = 3.0
    field_sigma: float = 3.0
    multimodal: bool = False
    batch_size: int = 1
    augment: bool = False
    data_dir: str = ""
    out_dir: str = "run"

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("lr must be positive and Adam betas in [0, 1)")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigError(f"loss_weights needs three non-negative values, got {self.loss_weights}")
        if self.ncc_window < 1 or self.ncc_window % 2 == 0:
            raise ConfigError(f"ncc_window must be odd, got {self.ncc_window}")
        if self.epochs < 0 or self.n_train < 1 or self.n_val < 0 or self.n_labels < 1:
            raise ConfigError("epochs, n_train, n_val and n_labels out of range")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigError(f"lr_schedule must be constant or poly, got {self.lr_schedule!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_warp < 0 or self.field_sigma <= 0:
            raise ConfigError("max_warp must be >= 0 and field_sigma > 0")

    @property
    def n_pairs(self) -> int:
        return self.n_train + self.n_val

    def replace(self, **changes) -> "RunConfig":
        model_keys = {f.name for f in fields(ModelConfig)}
        model_changes = {k: changes.pop(k) for k in list(changes) if k in model_keys}
        model = dataclasses.replace(self.model, **model_changes) if model_changes else self.model
        return dataclasses.replace(self, model=model, **changes)

    def to_dict(self) -> dict:
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "model"}
        return {"model": self.model.to_dict(), **d}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(model=model, **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_text(self) -> str:
        lines = []
        for obj in (self.model, self):
            for f in fields(obj):
                if f.name == "model":
                    continue
                lines.append(f"{f.name}={_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def _parse(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            kind = float if default and isinstance(default[0], float) else int
            return tuple(kind(x) for x in text.split(",") if x.strip())
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _defaults() -> dict:
    out = {}
    for f in fields(ModelConfig):
        out[f.name] = f.default
    for f in fields(RunConfig):
        if f.name != "model":
            out[f.name] = f.default
    return out


def parse_overrides(pairs, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key=value`` strings (or (key, value) tuples) on top of ``base``."""
    base = base or RunConfig()
    defaults = _defaults()
    changes = {}
    for item in pairs:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            key, value = item.split("=", 1)
        else:
            key, value = item
        key, value = key.strip(), str(value).strip()
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _parse(value, defaults[key], key)
    return base.replace(**changes)


def load_config(path: str, overrides=()) -> RunConfig:
    pairs = []
    try:
        with open(path) as fh:
            for n, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{n}: expected key=value")
                pairs.append(line)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_overrides(list(pairs) + list(overrides))


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(config.to_text())
