"""
Graph containers, dataset I/O and domain construction.

Three ways to get graphs in: the standard TU benchmark layout, the internal
line-oriented dataset file, and a synthetic motif-detection generator whose
edge probability is the domain variable. split_by_edge_density turns one
dataset into A/B/.../T domains ordered by edge-to-node ratio.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import DatasetFormatError, DomainError, EmptyDatasetError, ShapeError

logger = logging.getLogger(__name__)

MOTIF_RULES = ("triangle_pendant", "four_cycle")
PathLike = Union[str, Path]


@dataclass(frozen=True)
class Graph:
    """Undirected graph with a 0/1 adjacency, node features and an optional label"""
    adjacency: np.ndarray
    features: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        adj = np.array(self.adjacency, dtype=np.float64)
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 1:
            raise ShapeError("graph adjacency", adj.shape)
        if feats.ndim != 2 or feats.shape[0] != adj.shape[0]:
            raise ShapeError("graph features", adj.shape, feats.shape)
        if not np.array_equal(adj, adj.T):
            raise DatasetFormatError("adjacency is not symmetric")
        if np.any(np.diag(adj) != 0):
            raise DatasetFormatError("adjacency has self-loops")
        if not np.all((adj == 0) | (adj == 1)):
            raise DatasetFormatError("adjacency entries must be 0 or 1")
        adj.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "features", feats)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Undirected edge count"""
        return int(self.adjacency.sum() // 2)

    @property
    def edge_ratio(self) -> float:
        return self.num_edges / self.num_nodes

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Same graph with nodes relabelled: new node i is old node perm[i]"""
        p = np.asarray(perm, dtype=np.int64)
        return Graph(self.adjacency[np.ix_(p, p)], self.features[p], self.label)

    def with_label(self, label: Optional[int]) -> "Graph":
        return Graph(self.adjacency, self.features, label)


@dataclass
class GraphDataset:
    graphs: List[Graph]
    num_classes: int
    feature_dim: int
    name: str = "dataset"

    def __post_init__(self):
        self.graphs = list(self.graphs)
        for i, g in enumerate(self.graphs):
            if g.feature_dim != self.feature_dim:
                raise ShapeError(f"dataset {self.name} graph {i}", (g.feature_dim,), (self.feature_dim,))
            if g.label is not None and not 0 <= g.label < self.num_classes:
                raise DatasetFormatError(
                    f"dataset {self.name} graph {i}: label {g.label} outside 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self) -> Iterator[Graph]:
        return iter(self.graphs)

    def __getitem__(self, index: int) -> Graph:
        return self.graphs[index]

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if g.label is None else g.label for g in self.graphs], dtype=np.int64)

    def edge_ratios(self) -> np.ndarray:
        return np.array([g.edge_ratio for g in self.graphs])

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "GraphDataset":
        return GraphDataset([self.graphs[i] for i in indices], self.num_classes,
                            self.feature_dim, name or self.name)

    def require_nonempty(self, what: str = "operation") -> None:
        if not self.graphs:
            raise EmptyDatasetError(f"{what} needs a nonempty dataset ({self.name} is empty)")


@dataclass
class DomainSplit:
    """Disjoint domains keyed A, B, ..., T; the last key is the target"""
    domains: Dict[str, GraphDataset]
    thresholds: List[float] = field(default_factory=list)
    indices: Dict[str, List[int]] = field(default_factory=dict)

    @classmethod
    def from_domains(cls, domains: Dict[str, GraphDataset]) -> "DomainSplit":
        """Wrap independently built domain datasets (synthetic mode)"""
        offset, indices = 0, {}
        for key, ds in domains.items():
            indices[key] = list(range(offset, offset + len(ds)))
            offset += len(ds)
        keys = list(domains)
        thresholds = [float(domains[k].edge_ratios().max()) if len(domains[k]) else float("nan")
                      for k in keys[:-1]]
        return cls(dict(domains), thresholds, indices)

    def keys(self) -> List[str]:
        return list(self.domains)

    def __getitem__(self, key: str) -> GraphDataset:
        return self.domains[key]

    @property
    def target_key(self) -> str:
        return self.keys()[-1]

    @property
    def source_keys(self) -> List[str]:
        return self.keys()[:-1]

    @property
    def target(self) -> GraphDataset:
        return self.domains[self.target_key]


def domain_keys(count: int) -> List[str]:
    """A, B, C, ... for the sources, T for the last domain"""
    if count < 2:
        raise ValueError("need at least two domains")
    letters = [chr(ord("A") + i) for i in range(count - 1)]
    if "T" in letters:
        raise ValueError(f"too many domains ({count})")
    return letters + ["T"]


# ---------------------------------------------------------------------------
# adjacency helpers
# ---------------------------------------------------------------------------

def normalize_adjacency(g: Union[Graph, np.ndarray]) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I"""
    adj = g.adjacency if isinstance(g, Graph) else np.asarray(g, dtype=np.float64)
    a_hat = adj + np.eye(adj.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return inv_sqrt[:, None] * a_hat * inv_sqrt[None, :]


def degree_one_hot(adjacency: np.ndarray, dim: int) -> np.ndarray:
    deg = np.minimum(adjacency.sum(axis=1).astype(np.int64), dim - 1)
    out = np.zeros((adjacency.shape[0], dim))
    out[np.arange(adjacency.shape[0]), deg] = 1.0
    return out


# ---------------------------------------------------------------------------
# synthetic domains
# ---------------------------------------------------------------------------

def erdos_renyi(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    upper = np.triu(rng.random((n, n)) < p, k=1).astype(np.float64)
    return upper + upper.T


def plant_motif(adjacency: np.ndarray, rng: np.random.Generator, rule: str = "triangle_pendant") -> np.ndarray:
    """Return a copy of adjacency with the motif inserted on randomly chosen nodes"""
    n = adjacency.shape[0]
    if rule not in MOTIF_RULES:
        raise ValueError(f"unknown motif rule {rule!r}; choose from {MOTIF_RULES}")
    if n < 4:
        raise DomainError(f"motif {rule} needs at least 4 nodes, graph has {n}")
    adj = adjacency.copy()
    a, b, c, d = (int(v) for v in rng.choice(n, size=4, replace=False))
    if rule == "triangle_pendant":
        for u, v in ((a, b), (b, c), (a, c)):
            adj[u, v] = adj[v, u] = 1.0
        # pendant: d hangs off a and nothing else
        adj[d, :] = 0.0
        adj[:, d] = 0.0
        adj[a, d] = adj[d, a] = 1.0
    else:
        for u, v in ((a, b), (b, c), (c, d), (d, a)):
            adj[u, v] = adj[v, u] = 1.0
        adj[a, c] = adj[c, a] = 0.0
        adj[b, d] = adj[d, b] = 0.0
    return adj


def synth_domain_dataset(seed: int, num_graphs: int, nodes_range: Tuple[int, int] = (10, 30),
                         edge_prob: float = 0.2, motif_rule: str = "triangle_pendant",
                         feature_dim: int = 8, name: Optional[str] = None) -> GraphDataset:
    """Erdos-Renyi graphs, half of them with a planted motif (label 1)"""
    lo, hi = int(nodes_range[0]), int(nodes_range[1])
    if not 0.0 < edge_prob < 1.0:
        raise DomainError(f"edge_prob must lie in (0, 1), got {edge_prob}")
    if not 6 <= lo <= hi <= 64:
        raise DomainError(f"nodes_range must lie within [6, 64], got {nodes_range}")
    if num_graphs < 1:
        raise EmptyDatasetError("num_graphs must be positive")
    if feature_dim < 2:
        raise DomainError("feature_dim must be at least 2")

    rng = np.random.default_rng(seed)
    labels = np.array([1] * (num_graphs // 2) + [0] * (num_graphs - num_graphs // 2))
    labels = labels[rng.permutation(num_graphs)]

    graphs = []
    for label in labels:
        n = int(rng.integers(lo, hi + 1))
        adj = erdos_renyi(n, edge_prob, rng)
        if label == 1:
            adj = plant_motif(adj, rng, motif_rule)
        graphs.append(Graph(adj, degree_one_hot(adj, feature_dim), int(label)))

    ds = GraphDataset(graphs, 2, feature_dim, name or f"synth-p{edge_prob:g}")
    logger.debug(f"synthesised {ds.name}: {num_graphs} graphs, mean ratio {ds.edge_ratios().mean():.3f}")
    return ds


# ---------------------------------------------------------------------------
# domain splitting
# ---------------------------------------------------------------------------

def split_by_edge_density(ds: GraphDataset, fractions: Sequence[float] = (0.4, 0.4, 0.2)) -> DomainSplit:
    """Stable ascending sort by edge/node ratio, then cut into consecutive domains"""
    fractions = [float(f) for f in fractions]
    if len(ds) < 3:
        raise EmptyDatasetError(f"splitting needs at least 3 graphs, {ds.name} has {len(ds)}")
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DomainError(f"fractions must be positive and sum to 1, got {fractions}")

    keys = domain_keys(len(fractions))
    ratios = ds.edge_ratios()
    order = np.argsort(ratios, kind="stable")
    n = len(ds)

    sizes = [int(np.floor(f * n + 1e-9)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    bounds = np.cumsum([0] + sizes)

    domains, indices, thresholds = {}, {}, []
    for i, key in enumerate(keys):
        idx = [int(j) for j in order[bounds[i]:bounds[i + 1]]]
        indices[key] = idx
        domains[key] = ds.subset(idx, f"{ds.name}-{key}")
        if i < len(keys) - 1:
            thresholds.append(float(ratios[idx].max()) if idx else float("nan"))
    logger.info(f"📊 split {ds.name}: " + ", ".join(f"{k}={len(domains[k])}" for k in keys))
    return DomainSplit(domains, thresholds, indices)


# ---------------------------------------------------------------------------
# TU benchmark reader
# ---------------------------------------------------------------------------

def _read_int_table(path: Path, width: int) -> np.ndarray:
    try:
        frame = pd.read_csv(path, header=None, sep=",", skipinitialspace=True)
    except pd.errors.EmptyDataError:
        return np.zeros((0, width), dtype=np.int64)
    except (OSError, pd.errors.ParserError) as e:
        raise DatasetFormatError(f"cannot read {path}: {e}") from e
    if frame.shape[1] < width:
        raise DatasetFormatError(f"{path} has {frame.shape[1]} columns, expected {width}")
    try:
        return frame.iloc[:, :width].to_numpy(dtype=np.int64)
    except ValueError as e:
        raise DatasetFormatError(f"{path} contains non-integer entries") from e


def _tu_prefix(directory: Path) -> str:
    candidates = sorted(directory.glob("*_A.txt"))
    if (directory / f"{directory.name}_A.txt").exists():
        return directory.name
    if len(candidates) == 1:
        return candidates[0].name[:-len("_A.txt")]
    raise DatasetFormatError(f"no unique *_A.txt edge file in {directory}")


def load_tu_dataset(directory: PathLike) -> GraphDataset:
    """Read a TU benchmark directory (DS_A, DS_graph_indicator, DS_graph_labels, DS_node_labels)"""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetFormatError(f"dataset directory {directory} does not exist")
    prefix = _tu_prefix(directory)

    files = {part: directory / f"{prefix}_{part}.txt" for part in ("A", "graph_indicator", "graph_labels")}
    for part, path in files.items():
        if not path.exists():
            raise DatasetFormatError(f"missing mandatory TU file {path.name}")

    indicator = _read_int_table(files["graph_indicator"], 1)[:, 0]
    graph_labels = _read_int_table(files["graph_labels"], 1)[:, 0]
    edges = _read_int_table(files["A"], 2)
    num_nodes = len(indicator)
    num_graphs = len(graph_labels)
    if num_nodes == 0 or num_graphs == 0:
        raise EmptyDatasetError(f"TU dataset {prefix} has no graphs")

    if np.any(np.diff(indicator) < 0) or indicator[0] != 1 or \
            not np.array_equal(np.unique(indicator), np.arange(1, num_graphs + 1)):
        raise DatasetFormatError("graph indicator is not contiguous 1..G in node order")

    if np.any(edges < 1) or np.any(edges > num_nodes):
        bad = edges[(edges < 1).any(axis=1) | (edges > num_nodes).any(axis=1)][0]
        raise DatasetFormatError(f"edge {tuple(bad)} references a node outside 1..{num_nodes}")

    node_path = directory / f"{prefix}_node_labels.txt"
    if node_path.exists():
        node_labels = _read_int_table(node_path, 1)[:, 0]
        if len(node_labels) != num_nodes:
            raise DatasetFormatError("node label count differs from graph indicator length")
        values, codes = np.unique(node_labels, return_inverse=True)
        features = np.zeros((num_nodes, len(values)))
        features[np.arange(num_nodes), codes] = 1.0
    else:
        features = np.ones((num_nodes, 1))

    classes, label_codes = np.unique(graph_labels, return_inverse=True)
    starts = np.searchsorted(indicator, np.arange(1, num_graphs + 1), side="left")
    ends = np.searchsorted(indicator, np.arange(1, num_graphs + 1), side="right")

    u, v = edges[:, 0] - 1, edges[:, 1] - 1
    if np.any(indicator[u] != indicator[v]):
        raise DatasetFormatError("edge connects nodes of different graphs")
    keep = u != v
    u, v = u[keep], v[keep]
    owner = indicator[u] - 1

    graphs = []
    for gi in range(num_graphs):
        s, e = int(starts[gi]), int(ends[gi])
        adj = np.zeros((e - s, e - s))
        sel = owner == gi
        adj[u[sel] - s, v[sel] - s] = 1.0
        adj = np.maximum(adj, adj.T)
        graphs.append(Graph(adj, features[s:e], int(label_codes[gi])))

    ds = GraphDataset(graphs, len(classes), features.shape[1], prefix)
    logger.info(f"✅ loaded TU dataset {prefix}: {num_graphs} graphs, {len(classes)} classes, dim {features.shape[1]}")
    return ds


# ---------------------------------------------------------------------------
# internal dataset file
# ---------------------------------------------------------------------------

def save_dataset(ds: GraphDataset, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"graphs={len(ds)} classes={ds.num_classes} dim={ds.feature_dim} name={ds.name.replace(' ', '_')}"]
    for g in ds.graphs:
        lines.append(f"g {g.num_nodes} {-1 if g.label is None else g.label}")
        for row in g.features:
            lines.append(" ".join(format(x, ".17g") for x in row))
        us, vs = np.nonzero(np.triu(g.adjacency, k=1))
        lines.extend(f"e {int(a)} {int(b)}" for a, b in zip(us, vs))
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_header(line: str) -> Dict[str, str]:
    try:
        fields = dict(item.split("=", 1) for item in line.split())
    except ValueError as e:
        raise DatasetFormatError(f"bad dataset header {line!r}") from e
    for key in ("graphs", "classes", "dim"):
        if key not in fields:
            raise DatasetFormatError(f"dataset header lacks {key}=")
    return fields


def load_dataset(path: PathLike) -> GraphDataset:
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as e:
        raise DatasetFormatError(f"cannot read dataset {path}: {e}") from e
    if not lines:
        raise DatasetFormatError(f"dataset file {path} is empty")

    header = _parse_header(lines[0])
    count, classes, dim = int(header["graphs"]), int(header["classes"]), int(header["dim"])
    graphs, pos = [], 1
    try:
        for _ in range(count):
            tag, n, label = lines[pos].split()
            if tag != "g":
                raise DatasetFormatError(f"{path}:{pos + 1}: expected graph record, got {tag!r}")
            n, label = int(n), int(label)
            pos += 1
            feats = np.array([[float(x) for x in lines[pos + i].split()] for i in range(n)])
            pos += n
            adj = np.zeros((n, n))
            while pos < len(lines) and lines[pos].startswith("e "):
                _, a, b = lines[pos].split()
                a, b = int(a), int(b)
                if not (0 <= a < n and 0 <= b < n):
                    raise DatasetFormatError(f"{path}:{pos + 1}: edge ({a}, {b}) outside nodes 0..{n - 1}")
                adj[a, b] = adj[b, a] = 1.0
                pos += 1
            graphs.append(Graph(adj, feats.reshape(n, dim), None if label < 0 else label))
    except (IndexError, ValueError) as e:
        raise DatasetFormatError(f"{path}: truncated or malformed near line {pos + 1}") from e
    if pos != len(lines):
        raise DatasetFormatError(f"{path}: trailing content after {count} graphs")
    return GraphDataset(graphs, classes, dim, header.get("name", path.stem))


# ---------------------------------------------------------------------------
# reporting helpers
# ---------------------------------------------------------------------------

def dataset_summary(ds: GraphDataset) -> pd.DataFrame:
    nodes = np.array([g.num_nodes for g in ds.graphs])
    edges = np.array([g.num_edges for g in ds.graphs])
    return pd.DataFrame([{
        "dataset": ds.name,
        "graphs": len(ds),
        "classes": ds.num_classes,
        "feature_dim": ds.feature_dim,
        "nodes": int(nodes.sum()),
        "edges": int(edges.sum()),
        "avg_nodes": float(nodes.mean()) if len(ds) else 0.0,
        "avg_edges": float(edges.mean()) if len(ds) else 0.0,
        "mean_edge_ratio": float(ds.edge_ratios().mean()) if len(ds) else 0.0,
    }])


def export_edge_list(ds: GraphDataset, directory: PathLike) -> Tuple[Path, Path]:
    """Write edges.csv (graph_id,u,v) and nodes.csv (graph_id,node,label,f0..)"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    edge_rows, node_frames = [], []
    for gid, g in enumerate(ds.graphs):
        us, vs = np.nonzero(np.triu(g.adjacency, k=1))
        edge_rows.extend((gid, int(a), int(b)) for a, b in zip(us, vs))
        frame = pd.DataFrame(g.features, columns=[f"f{i}" for i in range(ds.feature_dim)])
        frame.insert(0, "label", -1 if g.label is None else g.label)
        frame.insert(0, "node", np.arange(g.num_nodes))
        frame.insert(0, "graph_id", gid)
        node_frames.append(frame)
    edge_path, node_path = directory / "edges.csv", directory / "nodes.csv"
    pd.DataFrame(edge_rows, columns=["graph_id", "u", "v"]).to_csv(edge_path, index=False)
    pd.concat(node_frames, ignore_index=True).to_csv(node_path, index=False)
    return edge_path, node_path
