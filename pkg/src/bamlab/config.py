"""Run configuration and the flat ``key = value`` experiment-file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

from bamlab.data import DEFAULT_FRACTIONS, DatasetSpec

CONFIG_VERSION = 1
MODES = ("one_m", "two_m")
CRITERIA = ("worst_group_val", "class_diff")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    lam: float = 20.0
    T: int = 4
    mu: int = 10
    stage2_epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay_stage1: float = 0.0
    weight_decay_stage2: float = 1e-3
    batch_size: int = 64
    mode: str = "one_m"
    criterion: str = "worst_group_val"
    classdiff_smoothing_threshold: float = 0.10
    hidden_dims: tuple[int, ...] = (64, 32)
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.mode = self.mode.replace("-", "_")
        self.criterion = self.criterion.replace("-", "_")
        self.validate()

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.T < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.mu < 1 or int(self.mu) != self.mu:
            raise ConfigError("mu must be an integer >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0 and momentum in [0, 1)")
        if self.weight_decay_stage1 < 0 or self.weight_decay_stage2 < 0:
            raise ConfigError("weight decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.classdiff_smoothing_threshold < 0:
            raise ConfigError("classdiff_smoothing_threshold must be >= 0")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims must be positive")

    def layer_dims(self, n_features: int, n_classes: int) -> tuple[int, ...]:
        return (n_features, *self.hidden_dims, n_classes)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def erm_config(config: RunConfig) -> RunConfig:
    """Plain ERM: no Stage 1, no upweighting, a fresh model trained on the full set."""
    return config.replace(lam=0.0, T=0, mu=1, mode="two_m")


def jtt_config(config: RunConfig) -> RunConfig:
    """JTT: an ERM identification model, then a separate upweighted model."""
    return config.replace(lam=0.0, mode="two_m")


# ---------------------------------------------------------------------------
# flat file format

# file key -> (section, attribute name, parser)
def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _rows(s: str) -> tuple[tuple[float, ...], ...]:
    return tuple(_floats(r) for r in s.split("|"))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return " | ".join(_fmt(r) for r in value)
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


KEYS = {
    "n_total": ("data", "n_total", int),
    "n_classes": ("data", "n_classes", int),
    "n_attributes": ("data", "n_attributes", int),
    "class_proportions": ("data", "class_proportions", _floats),
    "group_proportions": ("data", "group_proportions", _rows),
    "core_noise": ("data", "core_noise", float),
    "spurious_noise": ("data", "spurious_noise", float),
    "core_dim": ("data", "core_dim", int),
    "spurious_dim": ("data", "spurious_dim", int),
    "dataset_kind": ("data", "kind", str),
    "split_fractions": ("split", "fractions", _floats),
    "lambda": ("run", "lam", float),
    "T": ("run", "T", int),
    "mu": ("run", "mu", int),
    "stage2_epochs": ("run", "stage2_epochs", int),
    "lr": ("run", "lr", float),
    "momentum": ("run", "momentum", float),
    "weight_decay_stage1": ("run", "weight_decay_stage1", float),
    "weight_decay_stage2": ("run", "weight_decay_stage2", float),
    "batch_size": ("run", "batch_size", int),
    "mode": ("run", "mode", str),
    "criterion": ("run", "criterion", str),
    "classdiff_smoothing_threshold": ("run", "classdiff_smoothing_threshold", float),
    "hidden_dims": ("run", "hidden_dims", _ints),
    "seed": ("both", "seed", int),
}


@dataclass
class ExperimentConfig:
    data: DatasetSpec
    run: RunConfig
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS

    def dumps(self) -> str:
        lines = [f"config_version = {CONFIG_VERSION}"]
        for key, (section, attr, _) in KEYS.items():
            if section == "split":
                value = self.fractions
            else:
                value = getattr(self.data if section == "data" else self.run, attr)
            lines.append(f"{key} = {_fmt(value)}")
        return "\n".join(lines) + "\n"


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def build_config(pairs: dict[str, str], source: str = "<config>") -> ExperimentConfig:
    if "config_version" not in pairs:
        raise ConfigError(f"{source}: missing required key 'config_version'")
    if pairs["config_version"] != str(CONFIG_VERSION):
        raise ConfigError(f"{source}: unsupported config_version {pairs['config_version']!r}")
    unknown = sorted(set(pairs) - set(KEYS) - {"config_version"})
    if unknown:
        raise ConfigError(f"{source}: unknown key(s): {', '.join(unknown)}")
    data_kw, run_kw, fractions = {}, {}, DEFAULT_FRACTIONS
    for key, value in pairs.items():
        if key == "config_version":
            continue
        section, attr, parse = KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
        if section == "split":
            fractions = parsed
        if section in ("data", "both"):
            data_kw[attr] = parsed
        if section in ("run", "both"):
            run_kw[attr] = parsed
    try:
        return ExperimentConfig(DatasetSpec(**data_kw), RunConfig(**run_kw), tuple(fractions))
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    return build_config(parse_pairs(p.read_text(), str(p)), str(p))
