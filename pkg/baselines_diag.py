"""
Reference baselines (output ensembles, parameter soups, feature-only
inversion) and diagnostics (cross-domain error matrix, function-space
domain divergence).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import entropy

from errors import EmptyDatasetError, IncompatibleModelsError
from gnn_zoo import GnnModel, classification_metrics, evaluate, predict_proba, pretrain
from graph_data import Graph, GraphDataset
from inversion_generator import GenerationConfig, merge_synthetic_sets, random_structure_set
from moe_merge import MergeConfig, MergedModel, build_merged_model, merge_train

logger = logging.getLogger(__name__)

DIVERGENCE_LABEL = "lower-bound estimate"


# ---------------------------------------------------------------------------
# output-space ensembles
# ---------------------------------------------------------------------------

def _stacked_proba(experts: Sequence[GnnModel], graphs: Sequence[Graph]) -> np.ndarray:
    """M x B x c"""
    if not experts:
        raise IncompatibleModelsError("ensemble needs at least one expert")
    return np.stack([predict_proba(e, graphs) for e in experts])


def ensemble_proba(experts: Sequence[GnnModel], graphs: Sequence[Graph], rule: str = "prob") -> np.ndarray:
    """B x c probabilities under the mean-probability or lowest-entropy rule"""
    probs = _stacked_proba(experts, list(graphs))
    if rule == "prob":
        return probs.mean(axis=0)
    if rule == "highconf":
        chosen = np.argmin(entropy(probs, axis=2), axis=0)
        return probs[chosen, np.arange(probs.shape[1])]
    raise ValueError(f"unknown ensemble rule {rule!r}")


def ens_prob(experts: Sequence[GnnModel], g: Graph) -> np.ndarray:
    return ensemble_proba(experts, [g], "prob")[0]


def ens_highconf(experts: Sequence[GnnModel], g: Graph) -> np.ndarray:
    """Output of the most confident expert; ties go to the lower index"""
    return ensemble_proba(experts, [g], "highconf")[0]


def evaluate_ensemble(experts: Sequence[GnnModel], ds: GraphDataset, rule: str = "prob") -> Dict[str, float]:
    ds.require_nonempty("evaluate_ensemble")
    preds = np.argmax(ensemble_proba(experts, ds.graphs, rule), axis=1)
    return classification_metrics(ds.labels, preds, ds.num_classes)


# ---------------------------------------------------------------------------
# parameter soups
# ---------------------------------------------------------------------------

def uniform_soup(models: Sequence[GnnModel]) -> GnnModel:
    """Elementwise mean of parameters and BN running moments"""
    if not models:
        raise IncompatibleModelsError("soup needs at least one model")
    descriptor = models[0].descriptor
    for m in models[1:]:
        if m.descriptor != descriptor:
            raise IncompatibleModelsError(
                f"parameter soup needs identical architectures, got {descriptor.kind.value} "
                f"and {m.descriptor.kind.value} ({descriptor} vs {m.descriptor})")

    soup = GnnModel(descriptor)
    for name, p in soup.params.items():
        p.data[...] = np.mean([m.params[name].data for m in models], axis=0)
    for i, bn in enumerate(soup.bn_layers):
        bn.running_mean = np.mean([m.bn_layers[i].running_mean for m in models], axis=0)
        bn.running_var = np.mean([m.bn_layers[i].running_var for m in models], axis=0)
        bn.num_batches_tracked = max(m.bn_layers[i].num_batches_tracked for m in models)
    soup.meta = {"soup": "uniform", "ingredients": str(len(models))}
    return soup


def greedy_soup(models: Sequence[GnnModel], validation: GraphDataset) -> Tuple[GnnModel, List[int]]:
    """Add models by descending validation accuracy while accuracy does not drop"""
    validation.require_nonempty("greedy_soup")
    uniform_soup(models)  # descriptor check
    scores = [evaluate(m, validation)["accuracy"] for m in models]
    order = sorted(range(len(models)), key=lambda i: -scores[i])

    chosen = [order[0]]
    best = scores[order[0]]
    for idx in order[1:]:
        candidate = uniform_soup([models[i] for i in chosen + [idx]])
        acc = evaluate(candidate, validation)["accuracy"]
        if acc >= best:
            chosen.append(idx)
            best = acc
            logger.debug(f"greedy soup kept ingredient {idx} (val acc {acc:.3f})")
    soup = uniform_soup([models[i] for i in chosen])
    soup.meta = {"soup": "greedy", "ingredients": ",".join(map(str, chosen))}
    return soup, chosen


# ---------------------------------------------------------------------------
# feature-only inversion
# ---------------------------------------------------------------------------

def inverse_x_baseline(experts: Sequence[GnnModel], generation: GenerationConfig, merge: MergeConfig,
                       seeds: Sequence[int], merge_seed: int,
                       expert_ids: Optional[Sequence[str]] = None) -> Tuple[MergedModel, GraphDataset]:
    """Same merge pipeline, but synthetic graphs keep fixed random structure and only learn features"""
    ids = list(expert_ids or [f"expert{j}" for j in range(len(experts))])
    sets = [random_structure_set(e, generation, seed, eid) for e, seed, eid in zip(experts, seeds, ids)]
    mixture = merge_synthetic_sets(sets, "inverse-x-mixture")
    model = build_merged_model(experts, merge, ids)
    merge_train(model, mixture, merge, merge_seed)
    return model, mixture


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def _disagreement(f_i: GnnModel, f_j: GnnModel, ds: GraphDataset) -> float:
    return float(np.abs(predict_proba(f_i, ds) - predict_proba(f_j, ds)).mean(axis=1).mean())


def hdh_divergence(f_i: GnnModel, f_j: GnnModel, ds_i: GraphDataset, ds_j: GraphDataset) -> float:
    """2 |E_i[delta] - E_j[delta]| where delta is the mean absolute probability gap of the pair"""
    if f_i.descriptor.num_classes != f_j.descriptor.num_classes:
        raise IncompatibleModelsError("divergence needs experts with the same output dimension")
    if not len(ds_i) or not len(ds_j):
        raise EmptyDatasetError("divergence needs two nonempty datasets")
    return 2.0 * abs(_disagreement(f_i, f_j, ds_i) - _disagreement(f_i, f_j, ds_j))


def max_pool_divergence(experts: Sequence[GnnModel], ds_i: GraphDataset, ds_j: GraphDataset) -> float:
    """Largest pairwise estimate over a pool of experts"""
    values = [hdh_divergence(a, b, ds_i, ds_j) for a, b in combinations(experts, 2)]
    return max(values) if values else 0.0


def divergence_table(experts: Sequence[GnnModel], domains: Dict[str, GraphDataset]) -> pd.DataFrame:
    rows = []
    for a, b in combinations(list(domains), 2):
        rows.append({"domain_i": a, "domain_j": b,
                     "divergence": max_pool_divergence(experts, domains[a], domains[b]),
                     "estimate": DIVERGENCE_LABEL})
    return pd.DataFrame(rows, columns=["domain_i", "domain_j", "divergence", "estimate"])


@dataclass
class CrossErrorMatrix:
    """Entry (i, j) is the error of expert i on domain j"""
    values: np.ndarray
    expert_tags: List[str]
    domain_tags: List[str]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, index=self.expert_tags, columns=self.domain_tags)
        frame.index.name = "expert"
        return frame

    def in_domain(self, expert_domains: Sequence[str]) -> np.ndarray:
        """Each expert's error on its own training domain"""
        return np.array([self.values[i, self.domain_tags.index(d)] for i, d in enumerate(expert_domains)])


def cross_error_matrix(experts: Sequence[GnnModel], expert_tags: Sequence[str],
                       domains: Dict[str, GraphDataset], workers: int = 1) -> CrossErrorMatrix:
    for key, ds in domains.items():
        if not len(ds):
            raise EmptyDatasetError(f"domain {key} is empty")
    pairs = [(i, key) for i in range(len(experts)) for key in domains]
    score = lambda pair: 1.0 - evaluate(experts[pair[0]], domains[pair[1]])["accuracy"]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            errors = list(pool.map(score, pairs))
    else:
        errors = [score(pair) for pair in pairs]
    values = np.array(errors).reshape(len(experts), len(domains))
    return CrossErrorMatrix(values, list(expert_tags), list(domains))


# ---------------------------------------------------------------------------
# parameter drift under sequential fine-tuning
# ---------------------------------------------------------------------------

def parameter_groups(model: GnnModel) -> Dict[str, List[str]]:
    """Encoder parameters grouped per layer (encoder.<layer>), plus the classifier"""
    groups: Dict[str, List[str]] = {}
    for name in model.params:
        parts = name.split(".")
        key = "classifier" if parts[0] == "classifier" else ".".join(parts[:2])
        groups.setdefault(key, []).append(name)
    return groups


def _group_vector(model: GnnModel, names: Sequence[str]) -> np.ndarray:
    return np.concatenate([model.params[n].data.ravel() for n in names])


def parameter_drift(expert: GnnModel, domains: Dict[str, GraphDataset], epochs: int, seed: int,
                    lr: float = 1e-2) -> pd.DataFrame:
    """Relative per-group change after fine-tuning a copy on each domain in turn"""
    model = expert.copy()
    groups = parameter_groups(model)
    rows = []
    for round_index, (key, ds) in enumerate(domains.items(), start=1):
        before = {g: _group_vector(model, names) for g, names in groups.items()}
        pretrain(model, ds, epochs, seed + round_index, lr=lr)
        for group, names in groups.items():
            after = _group_vector(model, names)
            change = np.linalg.norm(after - before[group]) / (np.linalg.norm(before[group]) + 1e-12)
            rows.append({"round": round_index, "domain": key, "group": group,
                         "relative_change": float(change)})
    return pd.DataFrame(rows, columns=["round", "domain", "group", "relative_change"])
