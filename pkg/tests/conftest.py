import numpy as np
import pytest

from artifact_helpers import RunPaths
from autodiff import Tape
from gnn_zoo import build_model, pretrain
from graph_data import Graph, GraphDataset, synth_domain_dataset
from inversion_generator import GenerationConfig
from moe_merge import MergeConfig

FEATURE_DIM = 4
HIDDEN = 8


@pytest.fixture(scope="session")
def tiny_dataset() -> GraphDataset:
    return synth_domain_dataset(0, 24, (6, 10), 0.2, feature_dim=FEATURE_DIM, name="tiny")


@pytest.fixture(scope="session")
def dense_dataset() -> GraphDataset:
    return synth_domain_dataset(1, 12, (6, 10), 0.45, feature_dim=FEATURE_DIM, name="dense")


@pytest.fixture(scope="session")
def trained_experts(tiny_dataset):
    """GCN and GIN pretrained for a few epochs; tests that mutate them must copy first"""
    experts = []
    for seed, kind in enumerate(("GCN", "GIN")):
        model = build_model(kind, FEATURE_DIM, 2, hidden_dim=HIDDEN, seed=seed)
        pretrain(model, tiny_dataset, epochs=4, seed=seed, batch_size=8)
        experts.append(model)
    return experts


@pytest.fixture
def small_generation() -> GenerationConfig:
    return GenerationConfig(count=6, nodes_range=(6, 8), epochs=3, hidden=8)


@pytest.fixture
def small_merge() -> MergeConfig:
    return MergeConfig(k=2, epochs=2, batch_size=4)


@pytest.fixture
def run_paths(tmp_path) -> RunPaths:
    return RunPaths.create(tmp_path / "run")


@pytest.fixture
def triangle() -> Graph:
    adj = np.ones((3, 3)) - np.eye(3)
    return Graph(adj, np.ones((3, 2)), 1)


@pytest.fixture
def gradcheck():
    """Compare tape gradients of f at x with central differences on a few entries"""
    def check(f, x, entries=None, h=1e-5, rtol=1e-4, atol=1e-7):
        was = x.requires_grad
        x.requires_grad = True
        x.zero_grad()
        with Tape() as tape:
            out = f(x)
        tape.backward(out)
        analytic = x.grad.copy()
        x.zero_grad()
        x.requires_grad = was
        entries = entries or list(np.ndindex(*x.shape))
        for idx in entries:
            orig = x.data[idx]
            x.data[idx] = orig + h
            plus = f(x).item()
            x.data[idx] = orig - h
            minus = f(x).item()
            x.data[idx] = orig
            numeric = (plus - minus) / (2 * h)
            assert analytic[idx] == pytest.approx(numeric, rel=rtol, abs=atol), idx
    return check
