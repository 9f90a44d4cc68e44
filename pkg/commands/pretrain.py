"""
pretrain: train one expert per roster entry, each only on its own domain
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict

from artifact_helpers import RunPaths, discover_domain_keys, safe_load_domains, write_frame
from errors import ConfigError
from gnn_zoo import GnnModel, build_model, pretrain, save_checkpoint
from merge_config import ExperimentConfig, ExpertSpec

logger = logging.getLogger(__name__)


def train_expert(config: ExperimentConfig, paths: RunPaths, ordinal: int, spec: ExpertSpec, ds) -> GnnModel:
    seed = config.expert_seed(ordinal)
    model = build_model(spec.arch, ds.feature_dim, ds.num_classes, config.pretrain.hidden_dim, seed)
    model, history = pretrain(model, ds, config.pretrain.epochs, seed, config.pretrain.batch_size,
                              config.pretrain.lr, config.pretrain.weight_decay)
    save_checkpoint(model, paths.expert_file(spec.expert_id),
                    {"domain": spec.domain, "expert_id": spec.expert_id, "seed": str(seed)})
    write_frame(history, paths.report_file(f"pretrain_{spec.expert_id}.csv"))
    return model


def run(config: ExperimentConfig, paths: RunPaths, workers: int = 1) -> Dict[str, GnnModel]:
    keys = discover_domain_keys(paths)
    split = safe_load_domains(paths, keys)
    for spec in config.experts:
        if spec.domain not in split.source_keys:
            raise ConfigError(f"expert {spec.expert_id}: domain {spec.domain!r} is not a source domain "
                              f"(sources: {', '.join(split.source_keys)})")

    jobs = [(i, spec, split[spec.domain]) for i, spec in enumerate(config.experts)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            models = list(pool.map(lambda job: train_expert(config, paths, *job), jobs))
    else:
        models = [train_expert(config, paths, *job) for job in jobs]
    logger.info(f"✅ pretrained {len(models)} experts into {paths.experts_dir}")
    return dict(zip(config.expert_ids, models))
