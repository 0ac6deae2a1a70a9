"""Engine configuration: typed sections that round-trip through flat ``section.key`` files."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .backbone import DEFAULT_WEIGHTS_ID
from .gem import GemConfig
from .scoring_language import ScoreConfig


@dataclass(frozen=True)
class BackboneSection:
    weights_id: str = DEFAULT_WEIGHTS_ID
    precision: str = "float32"
    weights_path: str | None = None
    seed: int = 0  # toy backbones only


@dataclass(frozen=True)
class PromptSection:
    classification: str = "winclip"
    segmentation: str = "combined"
    object_name: str | None = None  # None: derived from the category name


@dataclass(frozen=True)
class FusionSection:
    use_language: bool = True
    use_vision: bool = True


@dataclass(frozen=True)
class MetricsSection:
    pro_fpr_limit: float = 0.3
    exact_limit: int = 50_000
    n_approx: int = 1000
    eval_size: int | None = None  # None: ground-truth resolution


@dataclass(frozen=True)
class DataSection:
    root: str | None = None
    layout: str = "mvtec"
    manifest: str | None = None
    categories: tuple[str, ...] | None = None


SECTIONS = {
    "backbone": BackboneSection,
    "gem": GemConfig,
    "prompts": PromptSection,
    "scoring": ScoreConfig,
    "fusion": FusionSection,
    "metrics": MetricsSection,
    "data": DataSection,
}


def _tuplify(v):
    return tuple(v) if isinstance(v, list) else v


@dataclass(frozen=True)
class EngineConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    gem: GemConfig = field(default_factory=GemConfig)
    prompts: PromptSection = field(default_factory=PromptSection)
    scoring: ScoreConfig = field(default_factory=ScoreConfig)
    fusion: FusionSection = field(default_factory=FusionSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    data: DataSection = field(default_factory=DataSection)
    k: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @classmethod
    def from_flat(cls, flat: dict) -> "EngineConfig":
        parts: dict[str, dict] = {name: {} for name in SECTIONS}
        top = {}
        top_names = {"k", "seeds"}
        for key, value in flat.items():
            if "." in key:
                section, name = key.split(".", 1)
                if section not in SECTIONS:
                    raise KeyError(f"unknown config section {section!r} in key {key!r}")
                if name not in {f.name for f in fields(SECTIONS[section])}:
                    raise KeyError(f"unknown config key {key!r}")
                parts[section][name] = _tuplify(value)
            elif key in top_names:
                top[key] = _tuplify(value)
            else:
                raise KeyError(f"unknown config key {key!r}")
        return cls(**{name: SECTIONS[name](**kw) for name, kw in parts.items()}, **top)

    def to_flat(self) -> dict:
        flat = {}
        for name in SECTIONS:
            for key, value in asdict(getattr(self, name)).items():
                flat[f"{name}.{key}"] = list(value) if isinstance(value, tuple) else value
        flat["k"] = self.k
        flat["seeds"] = list(self.seeds)
        return flat

    def updated(self, **flat_overrides) -> "EngineConfig":
        """Copy with ``{"section.key": value}`` overrides (``None`` values ignored)."""
        flat = self.to_flat()
        flat.update({k: v for k, v in flat_overrides.items() if v is not None})
        return EngineConfig.from_flat(flat)


def load_config(path=None) -> EngineConfig:
    if path is None:
        return EngineConfig()
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping of section.key entries")
    return EngineConfig.from_flat(data)


def save_config(config: EngineConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_flat(), sort_keys=False))
    return path

