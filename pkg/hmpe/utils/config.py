"""
Pipeline configuration.

A config file is flat `key=value` text (parsed with python-dotenv); keys are the
field names of `PipelineConfig`. Values are resolved in the order

    defaults < config file < HMPE_SEED (seed only) < command-line flags

and every value is validated when the config is built, naming the offending key.
"""
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values

from hmpe import SEED_ENV_VAR, logger
from hmpe.heads import BoxTarget
from hmpe.utils.errors import ConfigError, DomainError
from hmpe.utils.tensor_io import PathLike, format_value

CHOICES = {
    "bbox_grad_order": ("1", "mixed"),
    "taps": (3, 9),
    "reweight": ("hard", "soft"),
    "upsample": ("nearest", "bilinear"),
    "mask_source": ("mixed", "class", "bbox"),
}
# accepted spellings for keys that are Python keywords
ALIASES = {"lambda": "lam"}
TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    height: int = 16
    width: int = 16
    channels: int = 8
    depth: int = 64
    heads: int = 8
    layers: int = 3
    points: int = 4
    lam: float = 0.5
    tau: float = 0.35
    fusion_w: float = 0.5
    huber_delta: float = 1.0
    scale: int = 6
    alpha: float = 0.6
    top_m: int = 100
    target: str = "0.5,0.5,0.3,0.3"
    bbox_grad_order: str = "mixed"
    unit_shift: bool = True
    taps: int = 3
    reweight: str = "hard"
    upsample: str = "bilinear"
    mask_source: str = "mixed"
    scales: Tuple[int, ...] = (1,)

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed", f"must be a 64-bit unsigned integer, got {self.seed}")
        for key in ("height", "width", "channels", "heads", "points", "scale", "top_m"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be at least 1, got {getattr(self, key)}")
        if self.depth < 2 or self.depth % 2:
            raise ConfigError("depth", f"must be even and >= 2, got {self.depth}")
        if self.depth % self.heads:
            raise ConfigError("heads", f"must divide depth {self.depth}, got {self.heads}")
        if not 1 <= self.layers <= 8:
            raise ConfigError("layers", f"must lie in [1, 8], got {self.layers}")
        for key in ("lam", "fusion_w", "alpha"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(key, f"must lie in [0, 1], got {getattr(self, key)}")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError("tau", f"must lie in [0, 1), got {self.tau}")
        if not self.huber_delta > 0:
            raise ConfigError("huber_delta", f"must be positive, got {self.huber_delta}")
        for key, allowed in CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {allowed}, got {getattr(self, key)!r}")
        if not self.scales:
            raise ConfigError("scales", "needs at least one scale")
        if any(s < 1 for s in self.scales):
            raise ConfigError("scales", f"must be positive, got {self.scales}")
        try:
            self.box
        except DomainError as err:
            raise ConfigError("target", str(err)) from err

    @property
    def box(self) -> BoxTarget:
        return BoxTarget.parse(self.target)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.height, self.width

    def updated(self, **changes: Any) -> "PipelineConfig":
        """Copy with some fields replaced; string values are parsed like file values."""
        return replace(self, **_coerce_all(changes))

    def to_text(self) -> str:
        values = asdict(self)
        return "".join(f"{key}={format_value(values[key])}\n" for key in sorted(values))

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, raw: Any) -> Any:
    kind = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return tuple(raw) if key == "scales" else raw
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in TRUE_WORDS:
                return True
            if text.lower() in FALSE_WORDS:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if key == "scales":
            return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as err:
        raise ConfigError(key, f"cannot parse {raw!r}") from err
    return text


def _coerce_all(values: Mapping[str, Any]) -> Dict[str, Any]:
    coerced = {}
    for raw_key, raw in values.items():
        key = ALIASES.get(raw_key, raw_key)
        if key not in FIELD_TYPES:
            raise ConfigError(raw_key, "unknown key")
        coerced[key] = _coerce(key, raw)
    return coerced


def read_config_file(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file {path} not found")
    values = dotenv_values(path)
    for key, value in values.items():
        if value is None:
            raise ConfigError(key, "has no value")
    return _coerce_all(values)


def load_config(
    path: Optional[PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> PipelineConfig:
    """Resolve a config from defaults, an optional file, the environment and overrides.

    Args:
        path (PathLike, optional): key=value config file.
        overrides (Mapping, optional): Values that win over everything else, typically
            command-line flags. None values are ignored.
        environ (Mapping, optional): Environment to read HMPE_SEED from. Defaults to os.environ.

    Returns:
        PipelineConfig: The validated config.
    """
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {}
    if path is not None:
        values.update(read_config_file(path))
        logger.debug(f"read config from {path}")
    if environ.get(SEED_ENV_VAR):
        values["seed"] = _coerce("seed", environ[SEED_ENV_VAR])
    if overrides:
        values.update(_coerce_all({k: v for k, v in overrides.items() if v is not None}))
    return PipelineConfig(**values)
