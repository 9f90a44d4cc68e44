"""
Experiment configuration for graphmerge
Resolves the config file from several sources and parses it strictly
"""

import logging
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import toml
from dotenv import load_dotenv

from errors import ConfigError, GraphMergeError
from gnn_zoo import GnnKind
from inversion_generator import GenerationConfig
from moe_merge import MergeConfig

logger = logging.getLogger(__name__)

CONFIG_ENV = "GRAPHMERGE_CONFIG"
THREADS_ENV = "GRAPHMERGE_THREADS"
DEFAULT_CONFIG_FILE = "graphmerge.toml"

SEED_COMPONENTS = {"data": 1, "pretrain": 2, "invert": 3, "merge": 4, "baselines": 5, "studies": 6}


@dataclass
class DatasetSection:
    source: str = "synthetic"
    tu_path: str = ""
    num_graphs: int = 200
    edge_probs: List[float] = field(default_factory=lambda: [0.10, 0.30, 0.45])
    nodes_range: Tuple[int, int] = (10, 30)
    motif_rule: str = "triangle_pendant"
    feature_dim: int = 8

    def __post_init__(self):
        self.nodes_range = (int(self.nodes_range[0]), int(self.nodes_range[1]))
        self.edge_probs = [float(p) for p in self.edge_probs]
        if self.source not in ("synthetic", "tu"):
            raise ConfigError(f"[dataset] source must be 'synthetic' or 'tu', got {self.source!r}")
        if self.source == "tu" and not self.tu_path:
            raise ConfigError("[dataset] tu_path is required when source = 'tu'")
        if self.source == "synthetic" and len(self.edge_probs) < 2:
            raise ConfigError("[dataset] edge_probs needs one entry per domain (at least two)")


@dataclass
class SplitSection:
    fractions: List[float] = field(default_factory=lambda: [0.4, 0.4, 0.2])

    def __post_init__(self):
        self.fractions = [float(f) for f in self.fractions]
        if any(f <= 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"[split] fractions must be positive and sum to 1, got {self.fractions}")


@dataclass
class ExpertSpec:
    arch: str
    domain: str
    seed: Optional[int] = None

    def __post_init__(self):
        try:
            self.arch = GnnKind(self.arch.upper()).value
        except ValueError:
            raise ConfigError(f"[[experts]] unknown arch {self.arch!r}; choose from GCN, GIN, GAT")
        if self.seed is not None and (isinstance(self.seed, bool) or not isinstance(self.seed, int)
                                      or self.seed < 0):
            raise ConfigError(f"[[experts]] {self.expert_id}: seed must be a non-negative integer, got {self.seed!r}")

    @property
    def expert_id(self) -> str:
        return f"{self.arch}-{self.domain}"


@dataclass
class PretrainSection:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-4
    hidden_dim: int = 32


@dataclass
class OutputSection:
    directory: str = "runs/default"


def default_roster() -> List[ExpertSpec]:
    return [ExpertSpec("GCN", "A"), ExpertSpec("GIN", "A"), ExpertSpec("GCN", "B"), ExpertSpec("GIN", "B")]


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    experts: List[ExpertSpec] = field(default_factory=default_roster)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        if not self.experts:
            raise ConfigError("[[experts]] roster is empty")
        ids = [e.expert_id for e in self.experts]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"[[experts]] roster has duplicate entries: {ids}")
        if not 1 <= self.merge.k <= len(self.experts):
            raise ConfigError(f"[merge] k must lie in [1, {len(self.experts)}], got {self.merge.k}")

    @property
    def expert_ids(self) -> List[str]:
        return [e.expert_id for e in self.experts]

    def expert_seed(self, ordinal: int) -> int:
        """Pretraining seed of a roster entry: its own seed if set, else the derived stream"""
        spec = self.experts[ordinal]
        if spec.seed is not None:
            return spec.seed
        return derive_seed(self.seed, "pretrain", ordinal)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["dataset"]["nodes_range"] = list(self.dataset.nodes_range)
        data["generation"]["nodes_range"] = list(self.generation.nodes_range)
        return data

    def to_toml(self) -> str:
        return toml.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        sections = {"dataset": DatasetSection, "split": SplitSection, "pretrain": PretrainSection,
                    "generation": GenerationConfig, "merge": MergeConfig, "output": OutputSection}
        known = set(sections) | {"seed", "experts"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")

        kwargs: Dict[str, Any] = {}
        if "seed" in data:
            kwargs["seed"] = _coerce("seed", data["seed"], int)
        for name, section_cls in sections.items():
            if name in data:
                kwargs[name] = _build_section(name, section_cls, data[name])
        if "experts" in data:
            entries = data["experts"]
            if not isinstance(entries, list):
                raise ConfigError("[[experts]] must be an array of tables")
            kwargs["experts"] = [_build_section("experts", ExpertSpec, e) for e in entries]
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (GraphMergeError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid configuration: {e}") from e

    @classmethod
    def from_toml(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(toml.loads(text))
        except toml.TomlDecodeError as e:
            raise ConfigError(f"config is not valid TOML: {e}") from e

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if out is not None:
            cfg = replace(cfg, output=OutputSection(str(out)))
        return cfg


def _coerce(key: str, value: Any, kind: type) -> Any:
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{key} must be an integer, got {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be {kind.__name__}, got {value!r}")


def _build_section(name: str, section_cls, values: Any):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    defaults = {f.name: f for f in fields(section_cls)}
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        f = defaults[key]
        default = None if f.default is MISSING else f.default
        if isinstance(default, (bool, int, float, str)) and not isinstance(value, (list, dict)):
            value = _coerce(f"[{name}] {key}", value, type(default))
        kwargs[key] = value
    try:
        return section_cls(**kwargs)
    except ConfigError:
        raise
    except (GraphMergeError, TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def get_config_sources(explicit: Optional[str] = None) -> List[Tuple[str, Path]]:
    """Candidate config files in priority order"""
    load_dotenv()
    sources = []
    if explicit:
        sources.append(("--config", Path(explicit)))
    env_path = os.getenv(CONFIG_ENV)
    if env_path:
        sources.append((CONFIG_ENV, Path(env_path)))
    sources.append(("working directory", Path(DEFAULT_CONFIG_FILE)))
    return sources


def load_config(explicit: Optional[str] = None) -> ExperimentConfig:
    """First existing source wins; an explicit path that does not exist is an error"""
    for label, path in get_config_sources(explicit):
        if path.exists():
            try:
                cfg = ExperimentConfig.from_toml(path.read_text())
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            logger.info(f"✅ config loaded from {path} ({label})")
            return cfg
        if label != "working directory":
            raise ConfigError(f"config file {path} given via {label} does not exist")
    logger.info("⚠️ no config file found, using built-in defaults")
    return ExperimentConfig()


def get_thread_count() -> int:
    raw = os.getenv(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1, got {threads}")
    return threads


def derive_seed(global_seed: int, component: str, ordinal: int = 0) -> int:
    """Independent, stable stream per (component, ordinal)"""
    if component not in SEED_COMPONENTS:
        raise ConfigError(f"unknown seed component {component!r}")
    seq = np.random.SeedSequence(int(global_seed), spawn_key=(SEED_COMPONENTS[component], int(ordinal)))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
