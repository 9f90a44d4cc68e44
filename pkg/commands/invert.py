"""
invert: generate a synthetic set from every expert and write the mixture
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List

from artifact_helpers import RunPaths, safe_load_experts
from graph_data import save_dataset
from inversion_generator import SyntheticSet, merge_synthetic_sets, run_generation
from merge_config import ExperimentConfig, derive_seed

logger = logging.getLogger(__name__)


def run(config: ExperimentConfig, paths: RunPaths, workers: int = 1) -> List[SyntheticSet]:
    experts = safe_load_experts(paths, config.expert_ids)
    jobs = [(experts[eid], derive_seed(config.seed, "invert", i), eid) for i, eid in enumerate(config.expert_ids)]
    generate = lambda job: run_generation(job[0], config.generation, job[1], job[2])
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sets = list(pool.map(generate, jobs))
    else:
        sets = [generate(job) for job in jobs]

    for synthetic in sets:
        synthetic.save(paths.synthetic_dir)
    mixture = merge_synthetic_sets(sets)
    save_dataset(mixture, paths.mixture_file)
    logger.info(f"✅ wrote {len(sets)} synthetic sets ({len(mixture)} graphs) to {paths.synthetic_dir}")
    return sets
