"""
pipeline: gen-data, pretrain, invert, merge and eval in one go
"""

import logging

from artifact_helpers import RunPaths
from commands import evaluate, gen_data, invert, merge, pretrain
from merge_config import ExperimentConfig

logger = logging.getLogger(__name__)


def run(config: ExperimentConfig, paths: RunPaths, workers: int = 1) -> evaluate.RunReport:
    gen_data.run(config, paths)
    pretrain.run(config, paths, workers)
    invert.run(config, paths, workers)
    merge.run(config, paths)
    report = evaluate.run(config, paths, workers)
    logger.info("✅ pipeline finished")
    return report
