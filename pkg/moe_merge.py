"""
Masked experts combined by a sparse noisy top-k gate.

Every expert stays frozen; training only touches the masks (elementwise
multipliers on one parameter group, initialised to one) and the two gate
matrices. The merged prediction is a gate-weighted convex combination of
the experts' softmax outputs.
"""

import logging
from contextlib import ExitStack
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import autodiff as ad
from autodiff import AdamW, Tape, Tensor
from errors import CheckpointError, DomainError, GraphMergeError, IncompatibleModelsError, ShapeError
from gnn_zoo import (EVAL_CHUNK, GnnModel, GraphBatch, classification_metrics, frozen,
                     load_checkpoint, read_tensor_file, write_tensor_file)
from graph_data import Graph, GraphDataset

logger = logging.getLogger(__name__)

LAMBDA_GRID = (1e-2, 1e-1, 1.0, 10.0, 100.0)
K_GRID = (1, 2, 3, 4, 5)
STRUCTURAL_FEATURES = 4
PROB_FLOOR = 1e-12


class MaskPlacement(str, Enum):
    CLASSIFIER = "classifier"
    ENCODER = "encoder"
    ALL = "all"

    def groups(self) -> Tuple[str, ...]:
        if self is MaskPlacement.ALL:
            return ("encoder", "classifier")
        return (self.value,)


@dataclass
class MergeConfig:
    k: int = 2
    lambda_gate: float = 0.1
    lambda_mask: float = 0.1
    gamma_p: float = 0.9
    gamma_v: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-2
    weight_decay: float = 1e-4
    noisy_gate: bool = True
    learn_masks: bool = True
    placement: str = "classifier"

    def __post_init__(self):
        self.placement = MaskPlacement(self.placement).value
        if self.k < 1:
            raise DomainError(f"k must be at least 1, got {self.k}")
        if not 0.0 <= self.gamma_p <= 1.0 or not 0.0 < self.gamma_v <= 1.0:
            raise DomainError(f"gamma_p must lie in [0, 1] and gamma_v in (0, 1] "
                              f"(got {self.gamma_p}, {self.gamma_v})")
        if self.lambda_gate < 0 or self.lambda_mask < 0:
            raise DomainError("regularisation weights must be non-negative")
        for name in ("lambda_gate", "lambda_mask"):
            if getattr(self, name) not in LAMBDA_GRID:
                logger.warning(f"⚠️ {name}={getattr(self, name)} is outside the tuning grid {LAMBDA_GRID}")


# ---------------------------------------------------------------------------
# masked experts and gate
# ---------------------------------------------------------------------------

class MaskedExpert:
    """A frozen expert whose selected parameter group is multiplied by a learnable mask"""

    def __init__(self, expert: GnnModel, placement: Union[str, MaskPlacement] = MaskPlacement.CLASSIFIER,
                 learn_masks: bool = True):
        self.expert = expert
        self.placement = MaskPlacement(placement)
        self.masks: Dict[str, Tensor] = {}
        for group in self.placement.groups():
            for name in expert.group_names(group):
                self.masks[name] = Tensor(np.ones(expert.params[name].shape), requires_grad=learn_masks,
                                          name=f"mask.{name}")

    @property
    def mask_size(self) -> int:
        return int(sum(m.data.size for m in self.masks.values()))

    def mask_parameters(self) -> List[Tensor]:
        return list(self.masks.values())

    def overrides(self) -> Dict[str, Tensor]:
        return {name: ad.hadamard(self.expert.params[name], mask) for name, mask in self.masks.items()}

    def forward(self, batch: GraphBatch) -> Tensor:
        """Masked logits; experts always run with frozen running moments"""
        return self.expert.forward(batch, "eval", overrides=self.overrides())

    def mask_mean(self) -> Tensor:
        total = ad.zeros(1, 1)
        for mask in self.masks.values():
            total = ad.add(total, ad.sum_all(mask))
        return ad.scale(total, 1.0 / self.mask_size)

    def near_one_fraction(self, gamma_v: float) -> Tensor:
        """Mean of exp(-(w - 1)^2 / (2 gamma_v^2)), a smooth count of entries close to one"""
        total = ad.zeros(1, 1)
        for mask in self.masks.values():
            dev = ad.subtract(mask, ad.ones(*mask.shape))
            total = ad.add(total, ad.sum_all(ad.exp(ad.scale(ad.hadamard(dev, dev), -0.5 / gamma_v ** 2))))
        return ad.scale(total, 1.0 / self.mask_size)


@dataclass
class GateParams:
    w_gate: Tensor
    w_noise: Tensor
    k: int
    noisy: bool = True

    @classmethod
    def create(cls, input_dim: int, num_experts: int, k: int, noisy: bool = True) -> "GateParams":
        if not 1 <= k <= num_experts:
            raise DomainError(f"k must lie in [1, {num_experts}], got {k}")
        return cls(ad.parameter(np.zeros((input_dim, num_experts)), name="gate.w_gate"),
                   ad.parameter(np.zeros((input_dim, num_experts)), name="gate.w_noise"), k, noisy)

    @property
    def input_dim(self) -> int:
        return self.w_gate.rows

    @property
    def num_experts(self) -> int:
        return self.w_gate.cols

    def parameters(self) -> List[Tensor]:
        return [self.w_gate, self.w_noise]


def gate_features(g: Graph) -> np.ndarray:
    """Mean node features followed by mean degree, degree std, density and log n"""
    deg = g.degrees()
    n = g.num_nodes
    density = 2.0 * g.num_edges / (n * (n - 1)) if n > 1 else 0.0
    stats = np.array([deg.mean(), deg.std(), density, np.log(n)])
    return np.concatenate([g.features.mean(axis=0), stats])


def gate_feature_matrix(graphs: Sequence[Graph]) -> np.ndarray:
    return np.vstack([gate_features(g) for g in graphs])


def gate_scores(gate: GateParams, features: np.ndarray, rng: Optional[np.random.Generator],
                mode: str = "eval") -> Tensor:
    """x W_g, plus eps * softplus(x W_n) with standard normal eps in train mode"""
    x = ad.constant(np.atleast_2d(features))
    if x.cols != gate.input_dim:
        raise ShapeError("gate_scores", x.shape, gate.w_gate.shape)
    clean = ad.matmul(x, gate.w_gate)
    if mode == "eval" or not gate.noisy:
        return clean
    if rng is None:
        raise ValueError("train-mode gate scores need an rng")
    eps = ad.constant(rng.standard_normal(clean.shape))
    return ad.add(clean, ad.hadamard(eps, ad.softplus(ad.matmul(x, gate.w_noise))))


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 matrix selecting the k largest scores per row; ties go to the lower index"""
    scores = np.atleast_2d(scores)
    if not 1 <= k <= scores.shape[1]:
        raise DomainError(f"k must lie in [1, {scores.shape[1]}], got {k}")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(scores)
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def sparse_gate(scores: Tensor, k: int) -> Tensor:
    """Softmax over the top-k scores of each row; everything else is exactly zero"""
    return ad.weighted_row_softmax(scores, ad.constant(top_k_mask(scores.data, k)))


# ---------------------------------------------------------------------------
# merged model
# ---------------------------------------------------------------------------

@dataclass
class MergedModel:
    experts: List[MaskedExpert]
    gate: GateParams
    config: MergeConfig
    expert_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.expert_ids:
            self.expert_ids = [f"expert{j}" for j in range(len(self.experts))]
        classes = {m.expert.descriptor.num_classes for m in self.experts}
        dims = {m.expert.descriptor.input_dim for m in self.experts}
        if len(classes) != 1 or len(dims) != 1:
            raise IncompatibleModelsError(f"experts disagree on classes {classes} or input dims {dims}")
        if self.gate.num_experts != len(self.experts):
            raise ShapeError("merged model", (self.gate.num_experts,), (len(self.experts),))

    @property
    def num_classes(self) -> int:
        return self.experts[0].expert.descriptor.num_classes

    @property
    def input_dim(self) -> int:
        return self.experts[0].expert.descriptor.input_dim

    def trainable_parameters(self) -> List[Tensor]:
        params = []
        if self.config.learn_masks:
            for m in self.experts:
                params.extend(m.mask_parameters())
        return params + self.gate.parameters()

    def forward_batch(self, graphs: Sequence[Graph], mode: str = "eval",
                      rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
        """Mixed probabilities (B x c) and gate weights (B x M)"""
        for g in graphs:
            if g.feature_dim != self.input_dim:
                raise ShapeError("merged_forward", (g.feature_dim,), (self.input_dim,))
        batch = GraphBatch.from_graphs(graphs)
        weights = sparse_gate(gate_scores(self.gate, gate_feature_matrix(graphs), rng, mode), self.gate.k)
        c = self.num_classes
        mixed = None
        for j, masked in enumerate(self.experts):
            if not np.any(weights.data[:, j] > 0):
                continue
            probs = ad.softmax(masked.forward(batch))
            share = ad.hadamard(probs, ad.repeat_cols(ad.take_cols(weights, [j]), c))
            mixed = share if mixed is None else ad.add(mixed, share)
        return mixed, weights

    def routing_table(self, dataset: GraphDataset) -> pd.DataFrame:
        """Eval-mode gate weights per graph"""
        rows = []
        for start in range(0, len(dataset), EVAL_CHUNK):
            graphs = dataset.graphs[start:start + EVAL_CHUNK]
            weights = sparse_gate(gate_scores(self.gate, gate_feature_matrix(graphs), None, "eval"),
                                  self.gate.k).data
            for offset, w in enumerate(weights):
                row = {"graph": start + offset, "label": graphs[offset].label}
                row.update({f"w_{eid}": float(v) for eid, v in zip(self.expert_ids, w)})
                row["top_expert"] = self.expert_ids[int(np.argmax(w))]
                rows.append(row)
        return pd.DataFrame(rows)


def build_merged_model(experts: Sequence[GnnModel], config: MergeConfig,
                       expert_ids: Optional[Sequence[str]] = None) -> MergedModel:
    if not experts:
        raise IncompatibleModelsError("cannot merge zero experts")
    k = min(config.k, len(experts))
    if k != config.k:
        logger.warning(f"⚠️ k={config.k} exceeds {len(experts)} experts, using k={k}")
    masked = [MaskedExpert(e, config.placement, config.learn_masks) for e in experts]
    gate = GateParams.create(experts[0].descriptor.input_dim + STRUCTURAL_FEATURES, len(experts), k,
                             config.noisy_gate)
    return MergedModel(masked, gate, config, list(expert_ids or []))


def merged_forward(model: MergedModel, g: Graph, mode: str = "eval",
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Probability vector (1 x c) for one graph"""
    probs, _ = model.forward_batch([g], mode, rng)
    return probs


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def importance_loss(weights: Tensor) -> Tensor:
    """Squared coefficient of variation of per-expert total gate weight (population std)"""
    if weights.rows == 0:
        raise DomainError("importance loss needs a nonempty batch")
    m = weights.cols
    totals = ad.matmul(ad.ones(1, weights.rows), weights)
    if m == 1 or np.all(totals.data == 0):
        return ad.zeros(1, 1)
    mean = ad.scale(ad.row_sum(totals), 1.0 / m)
    centred = ad.subtract(totals, ad.repeat_cols(mean, m))
    var = ad.scale(ad.row_sum(ad.hadamard(centred, centred)), 1.0 / m)
    return ad.hadamard(var, ad.power(mean, -2.0))


def nll_from_probs(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Summed negative log-probability of the true classes"""
    labels = np.asarray(labels, dtype=np.int64)
    picked = ad.gather_entries(probs, np.arange(len(labels)), labels)
    return ad.scale(ad.sum_all(ad.log(ad.add(picked, ad.constant(np.full(picked.shape, PROB_FLOOR))))), -1.0)


def mask_anchor(masked: MaskedExpert, gamma_p: float, gamma_v: float) -> Tensor:
    target = ad.constant([[gamma_p]])
    mean_term = ad.absolute(ad.subtract(masked.mask_mean(), target))
    near_term = ad.absolute(ad.subtract(masked.near_one_fraction(gamma_v), target))
    return ad.add(mean_term, near_term)


def mask_loss(model: MergedModel, graphs: Sequence[Graph], labels: np.ndarray) -> Tensor:
    """Every masked expert's summed cross-entropy on the batch plus the mask anchors"""
    batch = GraphBatch.from_graphs(graphs)
    labels = np.asarray(labels, dtype=np.int64)
    total = ad.zeros(1, 1)
    for masked in model.experts:
        ce = ad.scale(ad.cross_entropy(masked.forward(batch), labels), float(len(labels)))
        total = ad.add(total, ce)
        total = ad.add(total, mask_anchor(masked, model.config.gamma_p, model.config.gamma_v))
    return total


def merge_loss(model: MergedModel, graphs: Sequence[Graph], labels: np.ndarray,
               rng: Optional[np.random.Generator], mode: str = "train") -> Tuple[Tensor, Dict[str, float]]:
    probs, weights = model.forward_batch(graphs, mode, rng)
    fit = nll_from_probs(probs, labels)
    gate_term = importance_loss(weights)
    total = ad.add(fit, ad.scale(gate_term, model.config.lambda_gate))
    parts = {"fit": fit.item(), "gate": gate_term.item()}
    if model.config.learn_masks and model.config.lambda_mask > 0:
        mask_term = mask_loss(model, graphs, labels)
        total = ad.add(total, ad.scale(mask_term, model.config.lambda_mask))
        parts["mask"] = mask_term.item()
    else:
        parts["mask"] = 0.0
    parts["total"] = total.item()
    return total, parts


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

def _check_trainable(model: MergedModel) -> None:
    allowed = {id(p) for p in model.trainable_parameters()}
    for j, masked in enumerate(model.experts):
        leaking = [name for name, p in masked.expert.params.items() if p.requires_grad]
        if leaking:
            raise GraphMergeError(f"expert {j} parameters require gradients: {leaking[:3]}")
        for mask in masked.masks.values():
            if mask.requires_grad and id(mask) not in allowed:
                raise GraphMergeError(f"mask {mask.name} is trainable but not optimised")


def merge_train(model: MergedModel, synthetic: GraphDataset, config: Optional[MergeConfig] = None,
                seed: int = 0) -> Tuple[MergedModel, pd.DataFrame]:
    """AdamW on masks and gate over the synthetic mixture; backbones stay bitwise frozen"""
    synthetic.require_nonempty("merge_train")
    config = config or model.config
    model.config = config
    labels = synthetic.labels
    if np.any(labels < 0):
        raise DomainError("merge_train needs labelled synthetic graphs")
    rng = np.random.default_rng(seed)
    snapshots = [m.expert.snapshot() for m in model.experts]
    optimizer = AdamW(model.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = []

    with ExitStack() as stack:
        for masked in model.experts:
            stack.enter_context(frozen(masked.expert))
        _check_trainable(model)
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(synthetic))
            sums: Dict[str, float] = {}
            batches = 0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                graphs = [synthetic.graphs[i] for i in idx]
                optimizer.zero_grad()
                with Tape() as tape:
                    loss, parts = merge_loss(model, graphs, labels[idx], rng, "train")
                tape.backward(loss)
                optimizer.step()
                batches += 1
                for key, value in parts.items():
                    sums[key] = sums.get(key, 0.0) + value
            # per-batch means, so total == fit + lambda_gate * gate + lambda_mask * mask on every row
            row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
            history.append(row)
            logger.debug(f"merge epoch {epoch}: loss {row['total']:.4f}")

    for j, (masked, snap) in enumerate(zip(model.experts, snapshots)):
        if not masked.expert.matches_snapshot(snap):
            raise GraphMergeError(f"expert {j} changed during merge training")
    if history:
        logger.info(f"✅ merged {len(model.experts)} experts (k={model.gate.k}): "
                    f"final loss {history[-1]['total']:.4f}")
    return model, pd.DataFrame(history, columns=["epoch", "fit", "gate", "mask", "total"])


def predict_proba_merged(model: MergedModel, graphs: Union[GraphDataset, Sequence[Graph]]) -> np.ndarray:
    graphs = list(graphs)
    if not graphs:
        return np.zeros((0, model.num_classes))
    chunks = [model.forward_batch(graphs[s:s + EVAL_CHUNK], "eval")[0].data
              for s in range(0, len(graphs), EVAL_CHUNK)]
    return np.vstack(chunks)


def predict(model: MergedModel, g: Graph) -> Tuple[int, np.ndarray]:
    probs = merged_forward(model, g, "eval").data[0]
    return int(np.argmax(probs)), probs


def evaluate_merged(model: MergedModel, ds: GraphDataset) -> Dict[str, float]:
    ds.require_nonempty("evaluate_merged")
    preds = np.argmax(predict_proba_merged(model, ds), axis=1)
    return classification_metrics(ds.labels, preds, ds.num_classes)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_merged(model: MergedModel, path: Union[str, Path], expert_paths: Sequence[Union[str, Path]]) -> Path:
    """Gate and mask tensors plus references to the expert checkpoints"""
    if len(expert_paths) != len(model.experts):
        raise ShapeError("save_merged", (len(model.experts),), (len(expert_paths),))
    header = {"experts": str(len(model.experts)), "k": str(model.gate.k), "noisy": str(model.gate.noisy)}
    header.update({f"config.{k}": str(v) for k, v in asdict(model.config).items()})
    for j, (eid, p) in enumerate(zip(model.expert_ids, expert_paths)):
        header[f"expert.{j}.id"] = eid
        header[f"expert.{j}.path"] = str(p)
    tensors = {"gate.w_gate": model.gate.w_gate.data, "gate.w_noise": model.gate.w_noise.data}
    for j, masked in enumerate(model.experts):
        for name, mask in masked.masks.items():
            tensors[f"mask.{j}.{name}"] = mask.data
    return write_tensor_file(path, "merged", header, tensors)


def _config_from_header(header: Dict[str, str]) -> MergeConfig:
    defaults = asdict(MergeConfig())
    values = {}
    for key, default in defaults.items():
        raw = header.get(f"config.{key}")
        if raw is None:
            continue
        if isinstance(default, bool):
            values[key] = raw == "True"
        else:
            values[key] = type(default)(raw)
    return MergeConfig(**values)


def load_merged(path: Union[str, Path]) -> MergedModel:
    path = Path(path)
    header, tensors = read_tensor_file(path, "merged")
    try:
        count = int(header["experts"])
        config = _config_from_header(header)
        experts, ids = [], []
        for j in range(count):
            ref = Path(header[f"expert.{j}.path"])
            experts.append(load_checkpoint(ref if ref.is_absolute() else path.parent / ref))
            ids.append(header[f"expert.{j}.id"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: bad merged-model header ({e})") from e

    config.k = int(header.get("k", config.k))
    model = build_merged_model(experts, config, ids)
    model.gate.noisy = header.get("noisy", "True") == "True"
    try:
        model.gate.w_gate.data[...] = tensors["gate.w_gate"]
        model.gate.w_noise.data[...] = tensors["gate.w_noise"]
        for j, masked in enumerate(model.experts):
            for name, mask in masked.masks.items():
                mask.data[...] = tensors[f"mask.{j}.{name}"]
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: gate or mask tensor missing or misshapen ({e})") from e
    return model
