"""
Two-layer GNN backbones (GCN, GIN, GAT) with a linear classifier head.

Parameters live in one ordered dict, named encoder.* (message passing and BN
affine) or classifier.* (the head), so masks can address either group.
Forward passes run on GraphBatch objects: a block-diagonal adjacency, stacked
node features and a mean-pool matrix.
"""

import copy
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import block_diag as dense_block_diag
from scipy.special import softmax as np_softmax
from sklearn.metrics import accuracy_score, precision_score

import autodiff as ad
from autodiff import AdamW, BatchNormState, Tape, Tensor
from errors import CheckpointError, DomainError, EmptyDatasetError, ShapeError
from graph_data import Graph, GraphDataset, normalize_adjacency

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "graphmerge-checkpoint"
CHECKPOINT_VERSION = 1
EVAL_CHUNK = 32


class GnnKind(str, Enum):
    GCN = "GCN"
    GIN = "GIN"
    GAT = "GAT"


@dataclass(frozen=True)
class ArchitectureDescriptor:
    kind: GnnKind
    input_dim: int
    num_classes: int
    hidden_dim: int = 32
    layers: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", GnnKind(self.kind))
        if self.layers != 2:
            raise ValueError("only 2-layer backbones are supported")
        if min(self.input_dim, self.num_classes, self.hidden_dim) < 1:
            raise ValueError(f"descriptor dimensions must be positive: {self}")

    @property
    def bn_layer_count(self) -> int:
        return 2 if self.kind is GnnKind.GIN else 1

    def encoder_param_count(self) -> int:
        d, h = self.input_dim, self.hidden_dim
        if self.kind is GnnKind.GCN:
            return (d * h + h) + 2 * h + (h * h + h)
        if self.kind is GnnKind.GIN:
            per_layer = lambda fan_in: 1 + (fan_in * h + h) + 2 * h + (h * h + h)
            return per_layer(d) + per_layer(h)
        return (d * h + 3 * h) + 2 * h + (h * h + 3 * h)

    def classifier_param_count(self) -> int:
        return self.hidden_dim * self.num_classes + self.num_classes

    def to_header(self) -> Dict[str, str]:
        return {"kind": self.kind.value, "input_dim": str(self.input_dim),
                "num_classes": str(self.num_classes), "hidden_dim": str(self.hidden_dim),
                "layers": str(self.layers)}

    @classmethod
    def from_header(cls, header: Dict[str, str]) -> "ArchitectureDescriptor":
        try:
            return cls(GnnKind(header["kind"]), int(header["input_dim"]), int(header["num_classes"]),
                       int(header["hidden_dim"]), int(header["layers"]))
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"bad architecture header: {e}") from e


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class GraphBatch:
    """Several graphs as one disconnected graph plus a B x N mean-pool matrix"""
    adjacency: Union[np.ndarray, Tensor]
    features: Union[np.ndarray, Tensor]
    sizes: List[int]
    labels: Optional[np.ndarray] = None
    _normalized: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        if not graphs:
            raise EmptyDatasetError("cannot batch zero graphs")
        labels = np.array([-1 if g.label is None else g.label for g in graphs], dtype=np.int64)
        return cls(dense_block_diag(*[g.adjacency for g in graphs]),
                   np.vstack([g.features for g in graphs]),
                   [g.num_nodes for g in graphs], labels)

    @classmethod
    def from_relaxed(cls, adjacencies: Sequence[Tensor], features: Sequence[Tensor],
                     labels: Optional[Sequence[int]] = None) -> "GraphBatch":
        """Batch built from differentiable adjacencies and feature leaves"""
        return cls(ad.block_diag(adjacencies), ad.concat_rows(features),
                   [a.rows for a in adjacencies],
                   None if labels is None else np.asarray(labels, dtype=np.int64))

    @property
    def num_graphs(self) -> int:
        return len(self.sizes)

    @property
    def num_nodes(self) -> int:
        return int(sum(self.sizes))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_relaxed(self) -> bool:
        return isinstance(self.adjacency, Tensor)

    def pool_matrix(self) -> np.ndarray:
        pool = np.zeros((self.num_graphs, self.num_nodes))
        offset = 0
        for i, n in enumerate(self.sizes):
            pool[i, offset:offset + n] = 1.0 / n
            offset += n
        return pool

    def adjacency_tensor(self) -> Tensor:
        return self.adjacency if self.is_relaxed else ad.constant(self.adjacency)

    def feature_tensor(self) -> Tensor:
        return self.features if isinstance(self.features, Tensor) else ad.constant(self.features)

    def normalized_adjacency(self) -> Tensor:
        if not self.is_relaxed:
            if self._normalized is None:
                self._normalized = normalize_adjacency(self.adjacency)
            return ad.constant(self._normalized)
        n = self.num_nodes
        a_hat = ad.add(self.adjacency, ad.constant(np.eye(n)))
        inv_sqrt = ad.power(ad.row_sum(a_hat), -0.5)
        left = ad.hadamard(a_hat, ad.repeat_cols(inv_sqrt, n))
        return ad.hadamard(left, ad.repeat_rows(ad.transpose(inv_sqrt), n))

    def self_loop_weights(self) -> Tensor:
        """A + I, the attention support"""
        return ad.add(self.adjacency_tensor(), ad.constant(np.eye(self.num_nodes)))


def iter_batches(graphs: Sequence[Graph], size: int = EVAL_CHUNK) -> Iterator[GraphBatch]:
    for start in range(0, len(graphs), size):
        yield GraphBatch.from_graphs(graphs[start:start + size])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, weight), ad.repeat_rows(bias, x.rows))


class GnnModel:
    """A 2-layer GNN encoder plus linear classifier, with named parameters"""

    def __init__(self, descriptor: ArchitectureDescriptor, seed: int = 0):
        self.descriptor = descriptor
        self.params: Dict[str, Tensor] = {}
        self.bn_layers: List[BatchNormState] = []
        self.meta: Dict[str, str] = {}
        rng = np.random.default_rng(seed)
        d, h, c = descriptor.input_dim, descriptor.hidden_dim, descriptor.num_classes

        if descriptor.kind is GnnKind.GCN:
            self._add("encoder.conv1.weight", xavier_uniform(rng, d, h))
            self._add("encoder.conv1.bias", np.zeros((1, h)))
            self._add_bn("encoder.bn1", h)
            self._add("encoder.conv2.weight", xavier_uniform(rng, h, h))
            self._add("encoder.conv2.bias", np.zeros((1, h)))
        elif descriptor.kind is GnnKind.GIN:
            for layer, fan_in in ((1, d), (2, h)):
                prefix = f"encoder.gin{layer}"
                self._add(f"{prefix}.eps", np.zeros((1, 1)))
                self._add(f"{prefix}.lin1.weight", xavier_uniform(rng, fan_in, h))
                self._add(f"{prefix}.lin1.bias", np.zeros((1, h)))
                self._add_bn(f"{prefix}.bn", h)
                self._add(f"{prefix}.lin2.weight", xavier_uniform(rng, h, h))
                self._add(f"{prefix}.lin2.bias", np.zeros((1, h)))
        else:
            for layer, fan_in in ((1, d), (2, h)):
                prefix = f"encoder.gat{layer}"
                self._add(f"{prefix}.weight", xavier_uniform(rng, fan_in, h))
                self._add(f"{prefix}.att_src", xavier_uniform(rng, h, 1))
                self._add(f"{prefix}.att_dst", xavier_uniform(rng, h, 1))
                self._add(f"{prefix}.bias", np.zeros((1, h)))
                if layer == 1:
                    self._add_bn("encoder.bn1", h)

        self._add("classifier.weight", xavier_uniform(rng, h, c))
        self._add("classifier.bias", np.zeros((1, c)))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = ad.parameter(value, name=name)

    def _add_bn(self, prefix: str, width: int) -> None:
        bn = BatchNormState.create(width)
        bn.gamma.name, bn.beta.name = f"{prefix}.gamma", f"{prefix}.beta"
        self.params[bn.gamma.name] = bn.gamma
        self.params[bn.beta.name] = bn.beta
        self.bn_layers.append(bn)

    # -- parameter groups --------------------------------------------------

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def group_names(self, group: str) -> List[str]:
        if group not in ("encoder", "classifier"):
            raise ValueError(f"unknown parameter group {group!r}")
        return [name for name in self.params if name.startswith(group + ".")]

    def group_size(self, group: str) -> int:
        return int(sum(self.params[n].data.size for n in self.group_names(group)))

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "GnnModel":
        return copy.deepcopy(self)

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and running moment, for bitwise comparisons"""
        snap = {name: p.data.copy() for name, p in self.params.items()}
        for i, bn in enumerate(self.bn_layers):
            snap[f"bn.{i}.running_mean"] = bn.running_mean.copy()
            snap[f"bn.{i}.running_var"] = bn.running_var.copy()
        return snap

    def matches_snapshot(self, snap: Dict[str, np.ndarray]) -> bool:
        return all(np.array_equal(snap[k], v) for k, v in self.snapshot().items())

    # -- forward -----------------------------------------------------------

    def forward(self, batch: GraphBatch, mode: str = "eval",
                overrides: Optional[Dict[str, Tensor]] = None,
                bn_taps: Optional[list] = None) -> Tensor:
        """Logits, one row per graph in the batch"""
        if batch.feature_dim != self.descriptor.input_dim:
            raise ShapeError("forward", (batch.num_nodes, batch.feature_dim),
                             (batch.num_nodes, self.descriptor.input_dim))
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        overrides = overrides or {}
        p = lambda name: overrides.get(name, self.params[name])
        x = batch.feature_tensor()
        kind = self.descriptor.kind

        if kind is GnnKind.GCN:
            h = self._gcn(batch, x, p, mode, bn_taps)
        elif kind is GnnKind.GIN:
            h = self._gin(batch, x, p, mode, bn_taps)
        else:
            h = self._gat(batch, x, p, mode, bn_taps)

        readout = ad.matmul(ad.constant(batch.pool_matrix()), h)
        return _linear(readout, p("classifier.weight"), p("classifier.bias"))

    def _bn(self, index: int, prefix: str, x: Tensor, p, mode: str, taps) -> Tensor:
        return ad.batch_norm(x, self.bn_layers[index], mode, taps,
                             gamma=p(f"{prefix}.gamma"), beta=p(f"{prefix}.beta"))

    def _gcn(self, batch, x, p, mode, taps) -> Tensor:
        a_norm = batch.normalized_adjacency()
        h = _linear(ad.matmul(a_norm, x), p("encoder.conv1.weight"), p("encoder.conv1.bias"))
        h = ad.relu(self._bn(0, "encoder.bn1", h, p, mode, taps))
        h = _linear(ad.matmul(a_norm, h), p("encoder.conv2.weight"), p("encoder.conv2.bias"))
        return ad.relu(h)

    def _gin(self, batch, x, p, mode, taps) -> Tensor:
        adj = batch.adjacency_tensor()
        h = x
        for layer in (1, 2):
            prefix = f"encoder.gin{layer}"
            one_plus_eps = ad.add(ad.ones(1, 1), p(f"{prefix}.eps"))
            agg = ad.add(ad.scale(h, one_plus_eps), ad.matmul(adj, h))
            z = _linear(agg, p(f"{prefix}.lin1.weight"), p(f"{prefix}.lin1.bias"))
            z = ad.relu(self._bn(layer - 1, f"{prefix}.bn", z, p, mode, taps))
            h = ad.relu(_linear(z, p(f"{prefix}.lin2.weight"), p(f"{prefix}.lin2.bias")))
        return h

    def _gat(self, batch, x, p, mode, taps) -> Tensor:
        support = batch.self_loop_weights()
        n = batch.num_nodes
        h = x
        for layer in (1, 2):
            prefix = f"encoder.gat{layer}"
            z = ad.matmul(h, p(f"{prefix}.weight"))
            src = ad.matmul(z, p(f"{prefix}.att_src"))
            dst = ad.matmul(z, p(f"{prefix}.att_dst"))
            scores = ad.leaky_relu(ad.add(ad.repeat_cols(dst, n), ad.repeat_rows(ad.transpose(src), n)))
            attention = ad.weighted_row_softmax(scores, support)
            h = ad.add(ad.matmul(attention, z), ad.repeat_rows(p(f"{prefix}.bias"), n))
            if layer == 1:
                h = self._bn(0, "encoder.bn1", h, p, mode, taps)
            h = ad.relu(h)
        return h


def build_model(kind: Union[str, GnnKind], input_dim: int, num_classes: int,
                hidden_dim: int = 32, seed: int = 0) -> GnnModel:
    return GnnModel(ArchitectureDescriptor(GnnKind(kind), input_dim, num_classes, hidden_dim), seed)


@contextmanager
def frozen(model: GnnModel):
    """Disable gradients on every parameter for the duration of the block"""
    previous = {name: p.requires_grad for name, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    try:
        yield model
    finally:
        for name, p in model.params.items():
            p.requires_grad = previous[name]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def forward(model: GnnModel, g: Graph, mode: str = "eval") -> Tensor:
    """Logits (1 x c) for one graph"""
    return model.forward(GraphBatch.from_graphs([g]), mode)


def predict_proba(model: GnnModel, graphs: Union[GraphDataset, Sequence[Graph]]) -> np.ndarray:
    """Eval-mode class probabilities, one row per graph"""
    graphs = list(graphs)
    if not graphs:
        return np.zeros((0, model.descriptor.num_classes))
    logits = [model.forward(batch, "eval").data for batch in iter_batches(graphs)]
    return np_softmax(np.vstack(logits), axis=1)


def classification_metrics(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> Dict[str, float]:
    """Accuracy and macro precision; classes never predicted count as zero precision"""
    if len(y_true) == 0:
        raise EmptyDatasetError("cannot score an empty dataset")
    return {
        "accuracy": float(accuracy_score(y_true, y_pred)),
        "macro_precision": float(precision_score(y_true, y_pred, labels=list(range(num_classes)),
                                                 average="macro", zero_division=0)),
    }


def evaluate(model: GnnModel, ds: GraphDataset) -> Dict[str, float]:
    ds.require_nonempty("evaluate")
    preds = np.argmax(predict_proba(model, ds), axis=1)
    return classification_metrics(ds.labels, preds, ds.num_classes)


def pretrain(model: GnnModel, ds: GraphDataset, epochs: int, seed: int, batch_size: int = 32,
             lr: float = 1e-2, weight_decay: float = 1e-4) -> Tuple[GnnModel, pd.DataFrame]:
    """Mini-batch AdamW on cross-entropy; returns the model and a per-epoch history"""
    ds.require_nonempty("pretrain")
    labels = ds.labels
    if np.any(labels < 0):
        raise DomainError(f"pretrain needs labelled graphs ({ds.name} has unlabelled ones)")
    rng = np.random.default_rng(seed)
    optimizer = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    history = []

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(ds))
        total_loss, correct = 0.0, 0
        for start in range(0, len(ds), batch_size):
            idx = order[start:start + batch_size]
            batch = GraphBatch.from_graphs([ds.graphs[i] for i in idx])
            optimizer.zero_grad()
            with Tape() as tape:
                logits = model.forward(batch, "train")
                loss = ad.cross_entropy(logits, labels[idx])
            tape.backward(loss)
            optimizer.step()
            total_loss += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        row = {"epoch": epoch, "loss": total_loss / len(ds), "accuracy": correct / len(ds)}
        history.append(row)
        logger.debug(f"epoch {epoch}: loss {row['loss']:.4f} acc {row['accuracy']:.3f}")

    model.meta.update({"seed": str(seed), "epochs": str(epochs)})
    if history:
        logger.info(f"✅ pretrained {model.descriptor.kind.value} on {ds.name}: "
                    f"loss {history[-1]['loss']:.4f}, train acc {history[-1]['accuracy']:.3f}")
    return model, pd.DataFrame(history, columns=["epoch", "loss", "accuracy"])


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def write_tensor_file(path: Union[str, Path], kind: str, header: Dict[str, str],
                      tensors: Dict[str, np.ndarray]) -> Path:
    """Versioned text file: key=value header, named tensors in 17-digit decimals, end marker"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{CHECKPOINT_FORMAT} kind={kind} version={CHECKPOINT_VERSION}"]
    for key, value in header.items():
        value = str(value)
        if "\n" in value or "=" in key or " " in key:
            raise CheckpointError(f"header entry {key!r} cannot be serialised")
        lines.append(f"{key}={value}")
    for name, arr in tensors.items():
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        lines.append(f"tensor {name} {arr.shape[0]} {arr.shape[1]}")
        lines.extend(" ".join(format(x, ".17g") for x in row) for row in arr)
    lines.append("end")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_tensor_file(path: Union[str, Path], kind: str) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if not lines or not lines[0].startswith(CHECKPOINT_FORMAT):
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    first = dict(item.split("=", 1) for item in lines[0].split()[1:] if "=" in item)
    if first.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {first.get('kind')!r} file, expected {kind!r}")
    if first.get("version") != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path} has unsupported version {first.get('version')}")
    if lines[-1].strip() != "end":
        raise CheckpointError(f"{path} is truncated (no end marker)")

    header, tensors, pos = {}, {}, 1
    try:
        while pos < len(lines) - 1:
            line = lines[pos]
            if line.startswith("tensor "):
                _, name, r, c = line.split()
                r, c = int(r), int(c)
                rows = [[float(x) for x in lines[pos + 1 + i].split()] for i in range(r)]
                arr = np.array(rows, dtype=np.float64).reshape(r, c)
                tensors[name] = arr
                pos += 1 + r
            else:
                key, value = line.split("=", 1)
                header[key] = value
                pos += 1
    except (ValueError, IndexError) as e:
        raise CheckpointError(f"{path}: corrupt record near line {pos + 1}") from e
    if pos != len(lines) - 1:
        raise CheckpointError(f"{path}: records overrun the end marker")
    return header, tensors


@dataclass
class Checkpoint:
    descriptor: ArchitectureDescriptor
    tensors: Dict[str, np.ndarray]
    bn_moments: List[Dict[str, Union[np.ndarray, int, float]]]
    meta: Dict[str, str]

    def to_model(self) -> GnnModel:
        model = GnnModel(self.descriptor)
        if set(self.tensors) != set(model.params):
            missing = set(model.params) ^ set(self.tensors)
            raise CheckpointError(f"checkpoint parameters do not match descriptor: {sorted(missing)}")
        for name, arr in self.tensors.items():
            if arr.shape != model.params[name].shape:
                raise CheckpointError(f"{name}: shape {arr.shape} vs {model.params[name].shape}")
            model.params[name].data[...] = arr
        if len(self.bn_moments) != len(model.bn_layers):
            raise CheckpointError("BN layer count does not match descriptor")
        for bn, moments in zip(model.bn_layers, self.bn_moments):
            bn.running_mean = np.array(moments["running_mean"], dtype=np.float64)
            bn.running_var = np.array(moments["running_var"], dtype=np.float64)
            bn.num_batches_tracked = int(moments["num_batches_tracked"])
            bn.momentum = float(moments["momentum"])
            bn.eps = float(moments["eps"])
        model.meta = dict(self.meta)
        return model


def save_checkpoint(model: GnnModel, path: Union[str, Path], meta: Optional[Dict[str, str]] = None) -> Path:
    meta = {**model.meta, **(meta or {})}
    header = dict(model.descriptor.to_header())
    tensors = {name: p.data for name, p in model.params.items()}
    for i, bn in enumerate(model.bn_layers):
        tensors[f"bn.{i}.running_mean"] = bn.running_mean
        tensors[f"bn.{i}.running_var"] = bn.running_var
        header[f"bn.{i}.num_batches_tracked"] = str(bn.num_batches_tracked)
        header[f"bn.{i}.momentum"] = repr(bn.momentum)
        header[f"bn.{i}.eps"] = repr(bn.eps)
    header.update({f"meta.{k}": v for k, v in meta.items()})
    model.meta = meta
    return write_tensor_file(path, "expert", header, tensors)


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    header, tensors = read_tensor_file(path, "expert")
    descriptor = ArchitectureDescriptor.from_header(header)
    moments = []
    try:
        for i in range(descriptor.bn_layer_count):
            moments.append({
                "running_mean": tensors.pop(f"bn.{i}.running_mean"),
                "running_var": tensors.pop(f"bn.{i}.running_var"),
                "num_batches_tracked": int(header[f"bn.{i}.num_batches_tracked"]),
                "momentum": float(header[f"bn.{i}.momentum"]),
                "eps": float(header[f"bn.{i}.eps"]),
            })
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: missing BN record {e}") from e
    meta = {k[len("meta."):]: v for k, v in header.items() if k.startswith("meta.")}
    return Checkpoint(descriptor, tensors, moments, meta)


def load_checkpoint(path: Union[str, Path], expected: Optional[ArchitectureDescriptor] = None) -> GnnModel:
    ckpt = read_checkpoint(path)
    if expected is not None and ckpt.descriptor != expected:
        raise CheckpointError(f"{path}: descriptor {ckpt.descriptor} does not match expected {expected}")
    return ckpt.to_model()
