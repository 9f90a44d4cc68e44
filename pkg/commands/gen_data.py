"""
gen-data: build the source and target domains and write them to data/
"""

import logging

import pandas as pd

from artifact_helpers import RunPaths, save_domains, write_frame
from graph_data import (DomainSplit, dataset_summary, domain_keys, load_tu_dataset,
                        split_by_edge_density, synth_domain_dataset)
from merge_config import ExperimentConfig, derive_seed

logger = logging.getLogger(__name__)


def build_domains(config: ExperimentConfig) -> DomainSplit:
    """Synthetic mode draws one dataset per edge probability; TU mode splits by edge density"""
    ds_cfg = config.dataset
    if ds_cfg.source == "tu":
        return split_by_edge_density(load_tu_dataset(ds_cfg.tu_path), config.split.fractions)

    domains = {}
    for ordinal, (key, p) in enumerate(zip(domain_keys(len(ds_cfg.edge_probs)), ds_cfg.edge_probs)):
        domains[key] = synth_domain_dataset(
            derive_seed(config.seed, "data", ordinal), ds_cfg.num_graphs, ds_cfg.nodes_range,
            p, ds_cfg.motif_rule, ds_cfg.feature_dim, name=f"domain-{key}")
    return DomainSplit.from_domains(domains)


def run(config: ExperimentConfig, paths: RunPaths) -> DomainSplit:
    split = build_domains(config)
    save_domains(split, paths)
    summary = pd.concat([dataset_summary(split[k]).assign(domain=k) for k in split.keys()],
                        ignore_index=True)
    write_frame(summary, paths.report_file("datasets.csv"))
    logger.info(f"✅ wrote {len(split.keys())} domains to {paths.data_dir} "
                f"({', '.join(f'{k}={len(split[k])}' for k in split.keys())})")
    return split
