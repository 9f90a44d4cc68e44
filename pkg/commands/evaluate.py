"""
eval: score every expert, every baseline and the merged model on the target
domain, then write the method table, cross-error matrix, divergence table
and routing table as CSV plus one text report
"""

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd

from artifact_helpers import (RunPaths, discover_domain_keys, safe_load_dataset, safe_load_domains,
                              safe_load_experts, safe_load_merged, write_frame)
from baselines_diag import (CrossErrorMatrix, DIVERGENCE_LABEL, cross_error_matrix, divergence_table,
                            evaluate_ensemble, greedy_soup, inverse_x_baseline, uniform_soup)
from gnn_zoo import evaluate
from merge_config import ExperimentConfig, derive_seed
from moe_merge import evaluate_merged

logger = logging.getLogger(__name__)

METHOD_COLUMNS = ["method", "family", "accuracy", "macro_precision", "in_domain_accuracy"]
MERGED_METHOD = "MaskedMoE"


@dataclass
class RunReport:
    methods: pd.DataFrame
    cross_error: CrossErrorMatrix
    divergence: pd.DataFrame
    routing: pd.DataFrame
    config_echo: str
    timings: Dict[str, float] = field(default_factory=dict)

    def method_row(self, name: str) -> pd.Series:
        return self.methods.set_index("method").loc[name]

    def to_text(self) -> str:
        blocks = [
            "📊 target-domain results",
            self.methods.to_string(index=False, float_format=lambda v: f"{v:.4f}"),
            "",
            "cross-domain error (rows: experts, columns: domains)",
            self.cross_error.to_frame().to_string(float_format=lambda v: f"{v:.4f}"),
            "",
            f"domain divergence ({DIVERGENCE_LABEL})",
            self.divergence.to_string(index=False, float_format=lambda v: f"{v:.4f}"),
            "",
            "config",
            self.config_echo,
        ]
        return "\n".join(blocks) + "\n"

    def save(self, paths: RunPaths) -> None:
        write_frame(self.methods, paths.report_file("methods.csv"))
        write_frame(self.cross_error.to_frame(), paths.report_file("cross_error.csv"), index=True)
        write_frame(self.divergence, paths.report_file("divergence.csv"))
        write_frame(self.routing, paths.report_file("routing.csv"))
        write_frame(pd.DataFrame([self.timings]), paths.report_file("timings.csv"))
        paths.report_file("report.txt").write_text(self.to_text())


def _row(method: str, family: str, metrics: Dict[str, float], in_domain: float = np.nan) -> Dict:
    return {"method": method, "family": family, "accuracy": metrics["accuracy"],
            "macro_precision": metrics["macro_precision"], "in_domain_accuracy": in_domain}


def run(config: ExperimentConfig, paths: RunPaths, workers: int = 1) -> RunReport:
    timings: Dict[str, float] = {}
    started = time.perf_counter()
    keys = discover_domain_keys(paths)
    split = safe_load_domains(paths, keys)
    target = split.target
    experts = safe_load_experts(paths, config.expert_ids)
    mixture = safe_load_dataset(paths.mixture_file, "invert")
    merged = safe_load_merged(paths)
    domain_of = {spec.expert_id: spec.domain for spec in config.experts}

    rows: List[Dict] = []
    for eid, model in experts.items():
        in_domain = evaluate(model, split[domain_of[eid]])["accuracy"]
        rows.append(_row(eid, "expert", evaluate(model, target), in_domain))
    expert_rows = pd.DataFrame(rows)
    rows.append({"method": "Avg-PTM", "family": "baseline",
                 "accuracy": float(expert_rows["accuracy"].mean()),
                 "macro_precision": float(expert_rows["macro_precision"].mean()),
                 "in_domain_accuracy": float(expert_rows["in_domain_accuracy"].mean())})
    timings["experts"] = time.perf_counter() - started

    models = list(experts.values())
    rows.append(_row("Ens-Prob", "baseline", evaluate_ensemble(models, target, "prob")))
    rows.append(_row("Ens-HighConf", "baseline", evaluate_ensemble(models, target, "highconf")))

    by_arch: Dict[str, List] = OrderedDict()
    for spec in config.experts:
        by_arch.setdefault(spec.arch, []).append(experts[spec.expert_id])
    for arch, group in by_arch.items():
        rows.append(_row(f"Uni-Soup-{arch}", "baseline", evaluate(uniform_soup(group), target)))
        soup, _ = greedy_soup(group, mixture)
        rows.append(_row(f"Greedy-Soup-{arch}", "baseline", evaluate(soup, target)))
    timings["soups"] = time.perf_counter() - started - sum(timings.values())

    seeds = [derive_seed(config.seed, "baselines", i) for i in range(len(models))]
    inverse_x, _ = inverse_x_baseline(models, config.generation, config.merge, seeds,
                                      derive_seed(config.seed, "baselines", len(models)), config.expert_ids)
    rows.append(_row("Inverse-X", "baseline", evaluate_merged(inverse_x, target)))
    timings["inverse_x"] = time.perf_counter() - started - sum(timings.values())

    rows.append(_row(MERGED_METHOD, "merged", evaluate_merged(merged, target)))

    cross = cross_error_matrix(models, config.expert_ids, split.domains, workers)
    divergence = divergence_table(models, split.domains)
    routing = merged.routing_table(target)
    timings["diagnostics"] = time.perf_counter() - started - sum(timings.values())

    report = RunReport(pd.DataFrame(rows, columns=METHOD_COLUMNS), cross, divergence, routing,
                       config.to_toml(), timings)
    report.save(paths)
    merged_row = report.method_row(MERGED_METHOD)
    logger.info(f"📊 {MERGED_METHOD} on T: acc {merged_row['accuracy']:.4f}, "
                f"pre {merged_row['macro_precision']:.4f} (report in {paths.reports_dir})")
    return report
