import numpy as np
import pytest
from scipy.stats import entropy

from baselines_diag import (DIVERGENCE_LABEL, cross_error_matrix, divergence_table, ens_highconf, ens_prob,
                            ensemble_proba, evaluate_ensemble, greedy_soup, hdh_divergence, inverse_x_baseline,
                            max_pool_divergence, parameter_drift, parameter_groups, uniform_soup)
from errors import EmptyDatasetError, IncompatibleModelsError
from gnn_zoo import build_model, evaluate, predict_proba
from graph_data import GraphDataset
from moe_merge import MergeConfig, build_merged_model, evaluate_merged, predict_proba_merged


def test_prob_ensemble_is_mean_of_experts(trained_experts, tiny_dataset):
    expected = np.mean([predict_proba(e, tiny_dataset) for e in trained_experts], axis=0)
    np.testing.assert_allclose(ensemble_proba(trained_experts, tiny_dataset.graphs), expected, atol=1e-15)
    np.testing.assert_allclose(ens_prob(trained_experts, tiny_dataset[0]), expected[0], atol=1e-15)


def test_highconf_ensemble_picks_lowest_entropy(trained_experts, tiny_dataset):
    per_expert = np.stack([predict_proba(e, tiny_dataset) for e in trained_experts])
    chosen = ensemble_proba(trained_experts, tiny_dataset.graphs, "highconf")
    for b in range(len(tiny_dataset)):
        best = int(np.argmin(entropy(per_expert[:, b], axis=1)))
        np.testing.assert_array_equal(chosen[b], per_expert[best, b])
    np.testing.assert_array_equal(ens_highconf(trained_experts, tiny_dataset[0]), chosen[0])


def test_highconf_ties_go_to_first_expert(trained_experts, tiny_dataset):
    twin = trained_experts[0].copy()
    out = ens_highconf([trained_experts[0], twin], tiny_dataset[1])
    np.testing.assert_array_equal(out, predict_proba(trained_experts[0], [tiny_dataset[1]])[0])


def test_ensemble_errors(trained_experts, tiny_dataset):
    with pytest.raises(IncompatibleModelsError):
        ensemble_proba([], tiny_dataset.graphs)
    with pytest.raises(ValueError):
        ensemble_proba(trained_experts, tiny_dataset.graphs, "vote")
    metrics = evaluate_ensemble(trained_experts, tiny_dataset, "highconf")
    assert 0.0 <= metrics["macro_precision"] <= 1.0


def test_uniform_soup_averages_parameters_and_moments(trained_experts):
    gcn = trained_experts[0]
    other = build_model("GCN", 4, 2, hidden_dim=8, seed=9)
    other.bn_layers[0].running_var = np.full_like(other.bn_layers[0].running_var, 3.0)
    soup = uniform_soup([gcn, other])
    for name, p in soup.params.items():
        np.testing.assert_allclose(p.data, (gcn.params[name].data + other.params[name].data) / 2)
    np.testing.assert_allclose(soup.bn_layers[0].running_var, (gcn.bn_layers[0].running_var + 3.0) / 2)
    assert soup.meta["soup"] == "uniform"


def test_soup_of_copies_is_the_model(trained_experts, tiny_dataset):
    gin = trained_experts[1]
    soup = uniform_soup([gin, gin.copy(), gin.copy()])
    np.testing.assert_allclose(predict_proba(soup, tiny_dataset), predict_proba(gin, tiny_dataset), atol=1e-12)


def test_soup_rejects_mixed_architectures(trained_experts, tiny_dataset):
    with pytest.raises(IncompatibleModelsError, match="GCN and GIN"):
        uniform_soup(trained_experts)
    with pytest.raises(IncompatibleModelsError):
        greedy_soup(trained_experts, tiny_dataset)


def test_greedy_soup_starts_from_the_best_ingredient(trained_experts, tiny_dataset):
    gcn = trained_experts[0]
    weak = build_model("GCN", 4, 2, hidden_dim=8, seed=21)
    soup, chosen = greedy_soup([weak, gcn], tiny_dataset)
    scores = [evaluate(weak, tiny_dataset)["accuracy"], evaluate(gcn, tiny_dataset)["accuracy"]]
    assert chosen[0] == int(np.argmax(scores))
    assert evaluate(soup, tiny_dataset)["accuracy"] >= max(scores)
    assert soup.meta["soup"] == "greedy"


def test_divergence_is_zero_on_identical_inputs(trained_experts, tiny_dataset, dense_dataset):
    a, b = trained_experts
    assert hdh_divergence(a, b, tiny_dataset, tiny_dataset) == 0.0
    assert hdh_divergence(a, a, tiny_dataset, dense_dataset) == 0.0
    assert hdh_divergence(a, b, tiny_dataset, dense_dataset) >= 0.0
    assert max_pool_divergence([a], tiny_dataset, dense_dataset) == 0.0
    with pytest.raises(EmptyDatasetError):
        hdh_divergence(a, b, tiny_dataset, GraphDataset([], 2, 4))
    with pytest.raises(IncompatibleModelsError):
        hdh_divergence(a, build_model("GCN", 4, 3), tiny_dataset, dense_dataset)


def test_divergence_table(trained_experts, tiny_dataset, dense_dataset):
    domains = {"A": tiny_dataset.subset(range(12)), "B": tiny_dataset.subset(range(12, 24)), "T": dense_dataset}
    table = divergence_table(trained_experts, domains)
    assert list(zip(table["domain_i"], table["domain_j"])) == [("A", "B"), ("A", "T"), ("B", "T")]
    assert (table["estimate"] == DIVERGENCE_LABEL).all()
    assert (table["divergence"] >= 0).all()


def test_cross_error_matrix(trained_experts, tiny_dataset, dense_dataset):
    domains = {"A": tiny_dataset, "T": dense_dataset}
    serial = cross_error_matrix(trained_experts, ["GCN-A", "GIN-A"], domains)
    threaded = cross_error_matrix(trained_experts, ["GCN-A", "GIN-A"], domains, workers=2)
    np.testing.assert_array_equal(serial.values, threaded.values)
    assert serial.values.shape == (2, 2)
    assert np.all((serial.values >= 0) & (serial.values <= 1))
    frame = serial.to_frame()
    assert list(frame.columns) == ["A", "T"] and frame.index.name == "expert"
    np.testing.assert_array_equal(serial.in_domain(["A", "A"]), serial.values[:, 0])
    with pytest.raises(EmptyDatasetError):
        cross_error_matrix(trained_experts, ["x", "y"], {"A": GraphDataset([], 2, 4)})


def test_parameter_groups():
    groups = parameter_groups(build_model("GCN", 4, 2))
    assert list(groups) == ["encoder.conv1", "encoder.bn1", "encoder.conv2", "classifier"]
    assert groups["classifier"] == ["classifier.weight", "classifier.bias"]


def test_parameter_drift_leaves_the_expert_alone(trained_experts, tiny_dataset, dense_dataset):
    expert = trained_experts[0]
    snap = expert.snapshot()
    frame = parameter_drift(expert, {"A": tiny_dataset, "T": dense_dataset}, epochs=1, seed=0)
    assert expert.matches_snapshot(snap)
    assert len(frame) == 2 * 4
    assert list(frame["round"].unique()) == [1, 2]
    assert (frame["relative_change"] >= 0).all()
    assert (frame["relative_change"] > 0).any()


def test_inverse_x_baseline(trained_experts, tiny_dataset, small_generation, small_merge):
    snaps = [e.snapshot() for e in trained_experts]
    model, mixture = inverse_x_baseline(trained_experts, small_generation, small_merge, [1, 2], 3, ["a", "b"])
    assert len(mixture) == 2 * small_generation.count
    assert mixture.name == "inverse-x-mixture"
    assert model.expert_ids == ["a", "b"]
    for e, snap in zip(trained_experts, snaps):
        assert e.matches_snapshot(snap)
    assert set(evaluate_merged(model, tiny_dataset)) == {"accuracy", "macro_precision"}


def test_uniform_gate_with_unit_masks_is_the_prob_ensemble(trained_experts, tiny_dataset):
    model = build_merged_model(trained_experts, MergeConfig(k=len(trained_experts)))
    np.testing.assert_allclose(predict_proba_merged(model, tiny_dataset),
                               ensemble_proba(trained_experts, tiny_dataset.graphs), atol=1e-12)
