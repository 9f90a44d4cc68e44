"""
Invert a frozen expert into label-conditional synthetic graphs.

Each synthetic graph owns a learnable feature matrix; a shared edge encoder
scores every node pair from the two feature rows and a binary Gumbel-softmax
relaxation turns scores into a differentiable adjacency. The loss pushes the
expert towards the sampled labels while matching its BN running moments and
keeping its predictions confident. After training, adjacencies are hardened
by thresholding the noise-free relaxation at 0.5.

With straight_through on (the default) the expert already sees those hardened
0/1 graphs during training and the gradient flows through the relaxed sample,
so the moments it matches are the moments of the emitted graphs.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import toml

import autodiff as ad
from autodiff import AdamW, BatchNormState, Tape, Tensor
from errors import DomainError, GraphMergeError, MissingArtifactError
from gnn_zoo import GnnModel, GraphBatch, frozen, xavier_uniform
from graph_data import Graph, GraphDataset, erdos_renyi, load_dataset, save_dataset

logger = logging.getLogger(__name__)

TAU_SCHEDULES = ("constant", "exponential")
LR_SCHEDULES = ("constant", "cosine")
LR_FLOOR = 0.01


@dataclass
class GenerationConfig:
    count: int = 64
    nodes_range: Tuple[int, int] = (10, 20)
    tau: float = 1.0
    tau_schedule: str = "constant"
    tau_min: float = 0.1
    epochs: int = 200
    hidden: int = 64
    lr: float = 0.1
    weight_decay: float = 1e-4
    noise: bool = True
    learn_structure: bool = True
    fixed_edge_prob: float = 0.2
    bn_weight: float = 1.0
    conf_weight: float = 1.0
    straight_through: bool = True
    lr_schedule: str = "cosine"
    bn_tolerance: float = 5.0

    def __post_init__(self):
        self.nodes_range = (int(self.nodes_range[0]), int(self.nodes_range[1]))
        if self.tau <= 0 or self.tau_min <= 0:
            raise DomainError(f"temperatures must be positive (tau={self.tau}, tau_min={self.tau_min})")
        if self.tau_schedule not in TAU_SCHEDULES:
            raise DomainError(f"tau_schedule must be one of {TAU_SCHEDULES}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise DomainError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.lr <= 0 or self.bn_tolerance < 0:
            raise DomainError(f"lr must be positive and bn_tolerance non-negative "
                              f"(lr={self.lr}, bn_tolerance={self.bn_tolerance})")
        if self.count < 1 or self.epochs < 0:
            raise DomainError("count must be positive and epochs non-negative")
        if not 2 <= self.nodes_range[0] <= self.nodes_range[1]:
            raise DomainError(f"invalid nodes_range {self.nodes_range}")

    def tau_at(self, epoch: int) -> float:
        """Temperature for a 0-based epoch"""
        if self.tau_schedule == "constant" or self.epochs <= 1:
            return self.tau
        frac = epoch / (self.epochs - 1)
        return float(self.tau * (self.tau_min / self.tau) ** frac)

    def lr_at(self, epoch: int) -> float:
        """Cosine decay from lr to LR_FLOOR * lr over the run"""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        floor = self.lr * LR_FLOOR
        return float(floor + 0.5 * (self.lr - floor) * (1.0 + np.cos(np.pi * frac)))


# ---------------------------------------------------------------------------
# relaxation
# ---------------------------------------------------------------------------

def sample_gumbel(rng: np.random.Generator, shape, eps: float = 1e-20) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + eps) + eps)


def relax_pair_scores(scores: Tensor, tau: float, rng: Optional[np.random.Generator],
                      noise: bool = True, hard: bool = False) -> Tensor:
    """
    Binary concrete relaxation of per-pair edge logits (P x 1): the edge-on
    component of a two-logit softmax at temperature tau, with independent
    Gumbel noise on both logits when noise is on. hard=True forwards the
    0/1 sample and passes the gradient of the soft sample.
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    logits = scores
    if noise:
        if rng is None:
            raise ValueError("noise requires an rng")
        diff = sample_gumbel(rng, scores.shape) - sample_gumbel(rng, scores.shape)
        logits = ad.add(scores, ad.constant(diff))
    soft = ad.sigmoid(ad.scale(logits, 1.0 / tau))
    if hard:
        return ad.straight_through(soft, (soft.data > 0.5).astype(np.float64))
    return soft


def gumbel_adjacency(probabilities: Union[np.ndarray, Tensor], tau: float,
                     rng: Optional[np.random.Generator], noise: bool = True,
                     hard: bool = False) -> Tensor:
    """Relaxed symmetric adjacency from a matrix of edge probabilities"""
    probs = probabilities if isinstance(probabilities, Tensor) else ad.constant(probabilities)
    n = probs.rows
    if probs.shape != (n, n):
        raise DomainError(f"edge probabilities must be square, got {probs.shape}")
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    rows, cols = np.triu_indices(n, k=1)
    p = ad.gather_entries(probs, rows, cols)
    if np.any(p.data <= 0) or np.any(p.data >= 1):
        raise DomainError("edge probabilities must lie strictly inside (0, 1)")
    scores = ad.subtract(ad.log(p), ad.log(ad.subtract(ad.ones(*p.shape), p)))
    relaxed = relax_pair_scores(scores, tau, rng, noise, hard)
    return ad.scatter_symmetric(relaxed, n, rows, cols)


# ---------------------------------------------------------------------------
# generator state
# ---------------------------------------------------------------------------

@dataclass
class GeneratorState:
    features: List[Tensor]
    labels: np.ndarray
    mlp: Dict[str, Tensor]
    tau: float
    fixed_adjacency: List[Optional[np.ndarray]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.features)

    def sizes(self) -> List[int]:
        return [x.rows for x in self.features]

    def parameters(self, learn_structure: bool = True) -> List[Tensor]:
        params = list(self.features)
        if learn_structure:
            params.extend(self.mlp.values())
        return params


def init_generator(expert: GnnModel, config: GenerationConfig, rng: np.random.Generator) -> GeneratorState:
    """Gaussian feature leaves, class-balanced labels, fresh edge encoder"""
    d = expert.descriptor.input_dim
    c = expert.descriptor.num_classes
    lo, hi = config.nodes_range
    sizes = rng.integers(lo, hi + 1, size=config.count)
    labels = (np.arange(config.count) % c)[rng.permutation(config.count)]
    features = [ad.parameter(rng.standard_normal((int(n), d)), name=f"x{i}") for i, n in enumerate(sizes)]

    h = config.hidden
    mlp = {
        "w1": ad.parameter(xavier_uniform(rng, 2 * d, h)), "b1": ad.parameter(np.zeros((1, h))),
        "w2": ad.parameter(xavier_uniform(rng, h, h)), "b2": ad.parameter(np.zeros((1, h))),
        "w3": ad.parameter(xavier_uniform(rng, h, 1)), "b3": ad.parameter(np.zeros((1, 1))),
    }
    fixed = []
    if not config.learn_structure:
        fixed = [erdos_renyi(int(n), config.fixed_edge_prob, rng) for n in sizes]
    return GeneratorState(features, labels.astype(np.int64), mlp, config.tau, fixed)


def _encoder(mlp: Dict[str, Tensor], pairs: Tensor) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(pairs, mlp["w1"]), ad.repeat_rows(mlp["b1"], pairs.rows)))
    h = ad.relu(ad.add(ad.matmul(h, mlp["w2"]), ad.repeat_rows(mlp["b2"], h.rows)))
    return ad.add(ad.matmul(h, mlp["w3"]), ad.repeat_rows(mlp["b3"], h.rows))


def edge_scores(state: GeneratorState, graph_index: int) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Symmetrised encoder logits for every pair j<k, with the pair indices"""
    x = state.features[graph_index]
    rows, cols = np.triu_indices(x.rows, k=1)
    xj, xk = ad.take_rows(x, rows), ad.take_rows(x, cols)
    forward_order = _encoder(state.mlp, ad.concat_cols([xj, xk]))
    reverse_order = _encoder(state.mlp, ad.concat_cols([xk, xj]))
    return ad.scale(ad.add(forward_order, reverse_order), 0.5), rows, cols


def edge_logits(state: GeneratorState, graph_index: int) -> Tensor:
    """n x n edge probabilities (symmetric, zero diagonal)"""
    if not 0 <= graph_index < state.count:
        raise IndexError(f"graph index {graph_index} outside 0..{state.count - 1}")
    scores, rows, cols = edge_scores(state, graph_index)
    return ad.scatter_symmetric(ad.sigmoid(scores), state.features[graph_index].rows, rows, cols)


def relaxed_batch(state: GeneratorState, tau: float, rng: Optional[np.random.Generator],
                  noise: bool = True, straight_through: bool = False) -> GraphBatch:
    """
    Batch of relaxed graphs. straight_through forwards the hardened 0/1
    adjacency of harden() and backpropagates through the relaxed sample.
    """
    adjacencies = []
    for i, x in enumerate(state.features):
        if state.fixed_adjacency:
            adjacencies.append(ad.constant(state.fixed_adjacency[i]))
            continue
        scores, rows, cols = edge_scores(state, i)
        relaxed = relax_pair_scores(scores, tau, rng, noise)
        if straight_through:
            relaxed = ad.straight_through(relaxed, (scores.data >= 0).astype(np.float64))
        adjacencies.append(ad.scatter_symmetric(relaxed, x.rows, rows, cols))
    return GraphBatch.from_relaxed(adjacencies, state.features, state.labels)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bn_moment_penalty(taps: Sequence[Tensor], bn_layers: Sequence[BatchNormState]) -> Tensor:
    """Sum over BN layers of ||batch mean - running mean|| + ||batch var - running var||"""
    if len(taps) != len(bn_layers):
        raise DomainError(f"{len(taps)} activation taps for {len(bn_layers)} BN layers")
    total = ad.zeros(1, 1)
    for x, bn in zip(taps, bn_layers):
        if bn.num_batches_tracked == 0:
            raise DomainError("BN running moments were never populated")
        mean = ad.column_mean(x)
        centred = ad.subtract(x, ad.repeat_rows(mean, x.rows))
        var = ad.column_mean(ad.hadamard(centred, centred))
        total = ad.add(total, ad.norm2(ad.subtract(mean, ad.constant(bn.running_mean))))
        total = ad.add(total, ad.norm2(ad.subtract(var, ad.constant(bn.running_var))))
    return total


def bn_regularizer(expert: GnnModel, batch: GraphBatch) -> Tensor:
    taps: List[Tensor] = []
    expert.forward(batch, "eval", bn_taps=taps)
    return bn_moment_penalty(taps, expert.bn_layers)


def mean_entropy(logits: Tensor) -> Tensor:
    logp = ad.log_softmax(logits)
    return ad.scale(ad.sum_all(ad.hadamard(ad.exp(logp), logp)), -1.0 / logits.rows)


def confidence_regularizer(expert: GnnModel, batch: GraphBatch) -> Tensor:
    """Mean prediction entropy of the expert over the batch"""
    if batch.num_graphs == 0:
        raise DomainError("confidence regularizer needs a nonempty batch")
    return mean_entropy(expert.forward(batch, "eval"))


def generation_losses(state: GeneratorState, expert: GnnModel, config: GenerationConfig,
                      rng: Optional[np.random.Generator], tau: Optional[float] = None) -> Tuple[Tensor, Dict[str, float]]:
    batch = relaxed_batch(state, state.tau if tau is None else tau, rng, config.noise, config.straight_through)
    taps: List[Tensor] = []
    logits = expert.forward(batch, "eval", bn_taps=taps)
    posterior = ad.cross_entropy(logits, state.labels)
    bn_term = bn_moment_penalty(taps, expert.bn_layers)
    conf = mean_entropy(logits)
    total = ad.add(posterior, ad.add(ad.scale(bn_term, config.bn_weight), ad.scale(conf, config.conf_weight)))
    parts = {"posterior": posterior.item(), "bn": bn_term.item(), "conf": conf.item(), "total": total.item()}
    return total, parts


def generation_step(state: GeneratorState, expert: GnnModel, optimizer: AdamW, config: GenerationConfig,
                    rng: np.random.Generator, tau: Optional[float] = None) -> Dict[str, float]:
    """One AdamW step on the feature leaves and edge encoder; the expert stays frozen"""
    optimizer.zero_grad()
    with frozen(expert), Tape() as tape:
        total, parts = generation_losses(state, expert, config, rng, tau)
    tape.backward(total)
    optimizer.step()
    return parts


# ---------------------------------------------------------------------------
# synthetic sets
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSet:
    dataset: GraphDataset
    expert_id: str
    seed: int
    config: GenerationConfig
    history: pd.DataFrame = field(default_factory=pd.DataFrame)

    def provenance(self) -> Dict:
        cfg = asdict(self.config)
        cfg["nodes_range"] = list(cfg["nodes_range"])
        return {"expert_id": self.expert_id, "seed": int(self.seed), "graphs": len(self.dataset),
                "generation": cfg}

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        path = save_dataset(self.dataset, directory / f"{self.expert_id}.graphs")
        with open(directory / f"{self.expert_id}.toml", "w") as fh:
            toml.dump(self.provenance(), fh)
        if not self.history.empty:
            self.history.to_csv(directory / f"{self.expert_id}_history.csv", index=False, float_format="%.6f")
        return path


def load_synthetic_set(directory: Union[str, Path], expert_id: str) -> SyntheticSet:
    directory = Path(directory)
    graphs_path, meta_path = directory / f"{expert_id}.graphs", directory / f"{expert_id}.toml"
    for path in (graphs_path, meta_path):
        if not path.exists():
            raise MissingArtifactError(f"synthetic set file {path} not found; run `invert` first")
    meta = toml.load(meta_path)
    config = GenerationConfig(**meta.get("generation", {}))
    return SyntheticSet(load_dataset(graphs_path), meta["expert_id"], int(meta["seed"]), config)


def harden(state: GeneratorState) -> List[np.ndarray]:
    """0/1 adjacencies: the noise-free relaxation at or above 0.5 is an edge"""
    if state.fixed_adjacency:
        return [a.copy() for a in state.fixed_adjacency]
    out = []
    for i, x in enumerate(state.features):
        scores, rows, cols = edge_scores(state, i)
        adj = np.zeros((x.rows, x.rows))
        on = scores.data[:, 0] >= 0
        adj[rows[on], cols[on]] = 1.0
        out.append(adj + adj.T)
    return out


def run_generation(expert: GnnModel, config: GenerationConfig, seed: int,
                   expert_id: str = "expert") -> SyntheticSet:
    """Train a generator against one frozen expert and emit its hardened graphs"""
    if not expert.bn_layers or any(bn.num_batches_tracked == 0 for bn in expert.bn_layers):
        raise DomainError(f"expert {expert_id} has no populated BN running moments")
    rng = np.random.default_rng(seed)
    state = init_generator(expert, config, rng)
    optimizer = AdamW(state.parameters(config.learn_structure), lr=config.lr,
                      weight_decay=config.weight_decay)
    before = expert.snapshot()

    history = []
    for epoch in range(config.epochs):
        tau = config.tau_at(epoch)
        optimizer.state.lr = config.lr_at(epoch)
        parts = generation_step(state, expert, optimizer, config, rng, tau)
        history.append({"epoch": epoch + 1, "tau": tau, "lr": optimizer.state.lr, **parts})
        logger.debug(f"{expert_id} gen epoch {epoch + 1}: " +
                     " ".join(f"{k}={v:.4f}" for k, v in parts.items()))

    if not expert.matches_snapshot(before):
        raise GraphMergeError(f"expert {expert_id} changed during generation")

    adjacencies = harden(state)
    graphs = [Graph(adj, x.data, int(y)) for adj, x, y in zip(adjacencies, state.features, state.labels)]
    ds = GraphDataset(graphs, expert.descriptor.num_classes, expert.descriptor.input_dim,
                      f"synthetic-{expert_id}")
    frame = pd.DataFrame(history, columns=["epoch", "tau", "lr", "posterior", "bn", "conf", "total"])
    if history:
        final = history[-1]
        logger.info(f"✅ inverted {expert_id}: {len(ds)} graphs, final loss {final['total']:.4f}, "
                    f"edge density {mean_density(adjacencies):.3f}")
        if final["bn"] > config.bn_tolerance:
            logger.warning(f"⚠️ {expert_id}: BN moment term still {final['bn']:.2f} after {config.epochs} "
                           f"epochs (tolerance {config.bn_tolerance}); synthetic graphs may not resemble "
                           f"the source domain, consider more epochs or a different lr")
    return SyntheticSet(ds, expert_id, seed, config, frame)


def mean_density(adjacencies: Sequence[np.ndarray]) -> float:
    """Average fraction of node pairs joined by an edge"""
    densities = [a.sum() / (a.shape[0] * (a.shape[0] - 1)) for a in adjacencies if a.shape[0] > 1]
    return float(np.mean(densities)) if densities else 0.0


def random_structure_set(expert: GnnModel, config: GenerationConfig, seed: int,
                         expert_id: str = "expert", epochs: Optional[int] = None) -> SyntheticSet:
    """Fixed Erdos-Renyi structure, only features optimised (epochs=0 gives raw noise graphs)"""
    cfg = replace(config, learn_structure=False, epochs=config.epochs if epochs is None else epochs)
    return run_generation(expert, cfg, seed, expert_id)


def merge_synthetic_sets(sets: Sequence[SyntheticSet], name: str = "synthetic-mixture") -> GraphDataset:
    """Union of the per-expert synthetic sets, in expert order"""
    if not sets:
        raise DomainError("no synthetic sets to merge")
    first = sets[0].dataset
    graphs = [g for s in sets for g in s.dataset.graphs]
    return GraphDataset(graphs, first.num_classes, first.feature_dim, name)
