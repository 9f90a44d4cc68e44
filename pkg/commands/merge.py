"""
merge: train masks and gate on the synthetic mixture and save the merged model
"""

import logging
import os

from artifact_helpers import RunPaths, safe_load_dataset, safe_load_experts, write_frame
from merge_config import ExperimentConfig, derive_seed
from moe_merge import MergedModel, build_merged_model, merge_train, save_merged

logger = logging.getLogger(__name__)


def run(config: ExperimentConfig, paths: RunPaths) -> MergedModel:
    mixture = safe_load_dataset(paths.mixture_file, "invert")
    experts = safe_load_experts(paths, config.expert_ids)
    model = build_merged_model(list(experts.values()), config.merge, config.expert_ids)
    model, history = merge_train(model, mixture, config.merge, derive_seed(config.seed, "merge", 0))
    refs = [os.path.relpath(paths.expert_file(eid), paths.merged_dir) for eid in config.expert_ids]
    save_merged(model, paths.merged_file, refs)
    write_frame(history, paths.report_file("merge_history.csv"))
    logger.info(f"✅ merged model saved to {paths.merged_file}")
    return model
