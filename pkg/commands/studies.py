"""
study: side experiments on top of a finished pipeline run

  mask      merge once per mask placement (classifier, encoder, all)
  ablation  drop one ingredient of the merge at a time
  drift     per-group parameter change when one expert is fine-tuned domain by domain
"""

import logging
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from artifact_helpers import (RunPaths, discover_domain_keys, safe_load_dataset, safe_load_domains,
                              safe_load_experts, write_frame)
from baselines_diag import parameter_drift
from errors import ConfigError
from graph_data import GraphDataset
from inversion_generator import merge_synthetic_sets, random_structure_set
from merge_config import ExperimentConfig, derive_seed
from moe_merge import MaskPlacement, MergeConfig, build_merged_model, evaluate_merged, merge_train

logger = logging.getLogger(__name__)

STUDY_KINDS = ("mask", "ablation", "drift")


def _merge_and_score(experts, ids, train_set: GraphDataset, target: GraphDataset,
                     merge_cfg: MergeConfig, seed: int) -> Dict[str, float]:
    model = build_merged_model(experts, merge_cfg, ids)
    merge_train(model, train_set, merge_cfg, seed)
    return evaluate_merged(model, target)


def mask_position_study(config: ExperimentConfig, paths: RunPaths) -> pd.DataFrame:
    split = safe_load_domains(paths, discover_domain_keys(paths))
    experts = list(safe_load_experts(paths, config.expert_ids).values())
    mixture = safe_load_dataset(paths.mixture_file, "invert")
    total = sum(e.num_parameters() for e in experts)
    seed = derive_seed(config.seed, "studies", 0)

    rows = []
    for placement in MaskPlacement:
        merge_cfg = replace(config.merge, placement=placement.value)
        model = build_merged_model(experts, merge_cfg, config.expert_ids)
        merge_train(model, mixture, merge_cfg, seed)
        metrics = evaluate_merged(model, split.target)
        masked = sum(m.mask_size for m in model.experts)
        rows.append({"placement": placement.value, "masked_parameters": masked, "total_parameters": total,
                     "masked_fraction": masked / total, **metrics})
        logger.info(f"📊 mask {placement.value}: {masked}/{total} masked, acc {metrics['accuracy']:.4f}")
    return pd.DataFrame(rows, columns=["placement", "masked_parameters", "total_parameters",
                                       "masked_fraction", "accuracy", "macro_precision"])


def ablation_study(config: ExperimentConfig, paths: RunPaths) -> pd.DataFrame:
    split = safe_load_domains(paths, discover_domain_keys(paths))
    target = split.target
    expert_map = safe_load_experts(paths, config.expert_ids)
    experts, ids = list(expert_map.values()), config.expert_ids
    mixture = safe_load_dataset(paths.mixture_file, "invert")
    seed = derive_seed(config.seed, "studies", 1)
    no_mask = replace(config.merge, learn_masks=False)

    source = GraphDataset([g for k in split.source_keys for g in split[k].graphs],
                          target.num_classes, target.feature_dim, "sources")
    noise_sets = [random_structure_set(e, config.generation, derive_seed(config.seed, "studies", 10 + i),
                                       eid, epochs=0) for i, (e, eid) in enumerate(zip(experts, ids))]
    noise_mixture = merge_synthetic_sets(noise_sets, "random-mixture")

    single = []
    for e, eid in zip(experts, ids):
        single.append(_merge_and_score([e], [eid], mixture, target, replace(config.merge, k=1), seed))

    variants = [
        ("full", _merge_and_score(experts, ids, mixture, target, config.merge, seed)),
        ("w/o MoE", {k: float(np.mean([m[k] for m in single])) for k in ("accuracy", "macro_precision")}),
        ("w/o Mask", _merge_and_score(experts, ids, mixture, target, no_mask, seed)),
        ("w/o gen-loss", _merge_and_score(experts, ids, noise_mixture, target, config.merge, seed)),
        ("w/o SF", _merge_and_score(experts, ids, source, target, config.merge, seed)),
        ("w/o SF&Mask", _merge_and_score(experts, ids, source, target, no_mask, seed)),
    ]
    for name, metrics in variants:
        logger.info(f"📊 ablation {name}: acc {metrics['accuracy']:.4f}")
    return pd.DataFrame([{"variant": name, **metrics} for name, metrics in variants],
                        columns=["variant", "accuracy", "macro_precision"])


def drift_study(config: ExperimentConfig, paths: RunPaths, expert_id: Optional[str] = None,
                epochs: Optional[int] = None) -> pd.DataFrame:
    expert_id = expert_id or config.expert_ids[0]
    if expert_id not in config.expert_ids:
        raise ConfigError(f"unknown expert {expert_id!r}; roster: {', '.join(config.expert_ids)}")
    split = safe_load_domains(paths, discover_domain_keys(paths))
    expert = safe_load_experts(paths, [expert_id])[expert_id]
    frame = parameter_drift(expert, split.domains, epochs or config.pretrain.epochs,
                            derive_seed(config.seed, "studies", 2), config.pretrain.lr)
    return frame.assign(expert=expert_id)


def run(config: ExperimentConfig, paths: RunPaths, kind: str, expert_id: Optional[str] = None,
        epochs: Optional[int] = None) -> pd.DataFrame:
    if kind == "mask":
        frame = mask_position_study(config, paths)
    elif kind == "ablation":
        frame = ablation_study(config, paths)
    elif kind == "drift":
        frame = drift_study(config, paths, expert_id, epochs)
    else:
        raise ConfigError(f"unknown study kind {kind!r}; choose from {', '.join(STUDY_KINDS)}")
    write_frame(frame, paths.report_file(f"study_{kind}.csv"))
    logger.info(f"✅ {kind} study written to {paths.report_file(f'study_{kind}.csv')}")
    return frame
