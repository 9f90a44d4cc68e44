"""
Artifact helper functions - run directory layout and safe loaders
Every loader turns a missing or unreadable file into a GraphMergeError
that names the command producing it
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Union

import pandas as pd

from errors import CheckpointError, DatasetFormatError, MissingArtifactError
from gnn_zoo import GnnModel, load_checkpoint
from graph_data import DomainSplit, GraphDataset, load_dataset, save_dataset
from moe_merge import MergedModel, load_merged

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"


@dataclass(frozen=True)
class RunPaths:
    """Where each command reads and writes inside the output directory"""
    root: Path

    @classmethod
    def create(cls, root: Union[str, Path]) -> "RunPaths":
        paths = cls(Path(root))
        for d in (paths.data_dir, paths.experts_dir, paths.synthetic_dir, paths.merged_dir, paths.reports_dir):
            d.mkdir(parents=True, exist_ok=True)
        return paths

    @property
    def data_dir(self) -> Path: return self.root / "data"
    @property
    def experts_dir(self) -> Path: return self.root / "experts"
    @property
    def synthetic_dir(self) -> Path: return self.root / "synthetic"
    @property
    def merged_dir(self) -> Path: return self.root / "merged"
    @property
    def reports_dir(self) -> Path: return self.root / "reports"

    def domain_file(self, key: str) -> Path:
        return self.data_dir / f"domain_{key}.graphs"

    def expert_file(self, expert_id: str) -> Path:
        return self.experts_dir / f"{expert_id}.ckpt"

    @property
    def mixture_file(self) -> Path:
        return self.synthetic_dir / "mixture.graphs"

    @property
    def merged_file(self) -> Path:
        return self.merged_dir / "merged.model"

    def report_file(self, name: str) -> Path:
        return self.reports_dir / name


def _require(path: Path, producer: str) -> None:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found - run `{producer}` first")


def safe_load_dataset(path: Path, producer: str = "gen-data") -> GraphDataset:
    _require(path, producer)
    try:
        return load_dataset(path)
    except DatasetFormatError as e:
        raise DatasetFormatError(f"❌ {path}: {e}") from e


def safe_load_domains(paths: RunPaths, keys: Sequence[str]) -> DomainSplit:
    return DomainSplit.from_domains({k: safe_load_dataset(paths.domain_file(k)) for k in keys})


def discover_domain_keys(paths: RunPaths) -> List[str]:
    """Domain keys written by gen-data, in split order (sources first, T last)"""
    keys = sorted(p.stem[len("domain_"):] for p in paths.data_dir.glob("domain_*.graphs"))
    if "T" not in keys:
        raise MissingArtifactError(f"no target domain file in {paths.data_dir} - run `gen-data` first")
    return [k for k in keys if k != "T"] + ["T"]


def safe_load_checkpoint(path: Path) -> GnnModel:
    _require(path, "pretrain")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise CheckpointError(f"❌ {path}: {e}") from e


def safe_load_experts(paths: RunPaths, expert_ids: Sequence[str]) -> Dict[str, GnnModel]:
    return {eid: safe_load_checkpoint(paths.expert_file(eid)) for eid in expert_ids}


def safe_load_merged(paths: RunPaths) -> MergedModel:
    _require(paths.merged_file, "merge")
    try:
        return load_merged(paths.merged_file)
    except CheckpointError as e:
        raise CheckpointError(f"❌ {paths.merged_file}: {e}") from e


def save_domains(split: DomainSplit, paths: RunPaths) -> List[Path]:
    return [save_dataset(split[k], paths.domain_file(k)) for k in split.keys()]


def write_frame(frame: pd.DataFrame, path: Path, index: bool = False) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT)
    logger.debug(f"wrote {path}")
    return path
