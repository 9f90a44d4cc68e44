import logging
import os

import numpy as np
import pytest

import autodiff as ad
from errors import CheckpointError, DomainError, IncompatibleModelsError
from gnn_zoo import GraphBatch, build_model, predict_proba, save_checkpoint
from moe_merge import (MaskPlacement, MaskedExpert, MergeConfig, build_merged_model, evaluate_merged,
                       gate_feature_matrix, gate_features, gate_scores, importance_loss, load_merged, mask_anchor,
                       mask_loss, merge_loss, merge_train, merged_forward, nll_from_probs, predict,
                       predict_proba_merged, save_merged, sparse_gate, top_k_mask)


def test_top_k_mask():
    np.testing.assert_array_equal(top_k_mask(np.array([[1.0, 3.0, 2.0]]), 2), [[0, 1, 1]])
    np.testing.assert_array_equal(top_k_mask(np.zeros((2, 3)), 2), [[1, 1, 0], [1, 1, 0]])
    with pytest.raises(DomainError):
        top_k_mask(np.zeros((1, 3)), 4)


def test_sparse_gate_renormalises_over_selected_experts():
    weights = sparse_gate(ad.constant([[0.0, np.log(3.0), -5.0]]), 2).data
    np.testing.assert_allclose(weights, [[0.25, 0.75, 0.0]], atol=1e-12)
    assert weights[0, 2] == 0.0
    scores = ad.constant(np.random.default_rng(0).standard_normal((6, 4)))
    w = sparse_gate(scores, 3).data
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((w > 0).sum(axis=1) == 3)


def test_gate_features(triangle):
    np.testing.assert_allclose(gate_features(triangle), [1, 1, 2, 0, 1, np.log(3)])
    assert gate_feature_matrix([triangle, triangle]).shape == (2, 6)


def test_gate_scores_are_noise_free_in_eval(trained_experts, tiny_dataset):
    model = build_merged_model(trained_experts, MergeConfig())
    model.gate.w_noise.data[...] = 1.0
    x = gate_feature_matrix(tiny_dataset.graphs[:3])
    np.testing.assert_array_equal(gate_scores(model.gate, x, None, "eval").data, 0.0)
    noisy = gate_scores(model.gate, x, np.random.default_rng(0), "train").data
    assert np.abs(noisy).max() > 0
    with pytest.raises(ValueError):
        gate_scores(model.gate, x, None, "train")


def test_importance_loss():
    assert importance_loss(ad.constant([[0.5, 0.5], [0.5, 0.5]])).item() == 0.0
    assert importance_loss(ad.constant([[1.0, 0.0], [1.0, 0.0]])).item() == pytest.approx(1.0)
    assert importance_loss(ad.constant([[1.0], [1.0]])).item() == 0.0


def test_nll_from_probs_sums_over_batch():
    probs = ad.constant([[0.5, 0.5], [0.25, 0.75]])
    assert nll_from_probs(probs, [0, 1]).item() == pytest.approx(-(np.log(0.5) + np.log(0.75)))
    assert np.isfinite(nll_from_probs(ad.constant([[1.0, 0.0]]), [1]).item())


@pytest.mark.parametrize("placement, group", [("classifier", "classifier"), ("encoder", "encoder")])
def test_mask_sizes_follow_placement(trained_experts, placement, group):
    expert = trained_experts[1]
    masked = MaskedExpert(expert, placement)
    assert masked.mask_size == expert.group_size(group)
    assert MaskedExpert(expert, MaskPlacement.ALL).mask_size == expert.num_parameters()


def test_unit_masks_reproduce_the_expert(trained_experts, tiny_dataset):
    expert = trained_experts[0]
    masked = MaskedExpert(expert, "all")
    batch = GraphBatch.from_graphs(tiny_dataset.graphs[:6])
    np.testing.assert_array_equal(masked.forward(batch).data, expert.forward(batch, "eval").data)
    assert masked.near_one_fraction(0.1).item() == pytest.approx(1.0)
    assert mask_anchor(masked, 0.9, 0.1).item() == pytest.approx(0.2)


def test_mask_anchor_uses_the_signed_mask_mean(trained_experts):
    masked = MaskedExpert(trained_experts[0], "classifier")
    for mask in masked.masks.values():
        mask.data[...] = -0.5
    assert masked.mask_mean().item() == pytest.approx(-0.5)
    # |-0.5 - 0.9| + |~0 - 0.9|
    assert mask_anchor(masked, 0.9, 0.1).item() == pytest.approx(2.3, abs=1e-9)


def test_merged_probabilities_are_convex(trained_experts, tiny_dataset):
    model = build_merged_model(trained_experts, MergeConfig(k=1))
    probs, weights = model.forward_batch(tiny_dataset.graphs[:5], "eval")
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((weights.data > 0).sum(axis=1) == 1)
    # zero gate: ties route everything to the first expert
    np.testing.assert_allclose(predict_proba_merged(model, tiny_dataset),
                               predict_proba(trained_experts[0], tiny_dataset), atol=1e-12)
    label, vector = predict(model, tiny_dataset[0])
    assert label == int(np.argmax(vector))
    assert merged_forward(model, tiny_dataset[0]).shape == (1, 2)


def test_merge_loss_gate_gradients(trained_experts, tiny_dataset, gradcheck):
    model = build_merged_model(trained_experts, MergeConfig(k=2))
    rng = np.random.default_rng(0)
    model.gate.w_gate.data[...] = 0.3 * rng.standard_normal(model.gate.w_gate.shape)
    for m in model.experts:
        for mask in m.masks.values():
            mask.data[...] = 1.0 + 0.05 * rng.standard_normal(mask.shape)
    graphs = tiny_dataset.graphs[:6]
    labels = tiny_dataset.labels[:6]
    f = lambda t: merge_loss(model, graphs, labels, None, "eval")[0]
    gradcheck(f, model.gate.w_gate, [(0, 0), (2, 1), (5, 0), (7, 1)])
    first_mask = next(iter(model.experts[0].masks.values()))
    gradcheck(f, first_mask, [(0, 0), (1, 1)])


def _random_entries(rng, shape, count=10):
    if int(np.prod(shape)) <= count:
        return None
    flat = rng.choice(int(np.prod(shape)), size=count, replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def test_train_mode_merge_loss_gradients_with_fixed_gate_noise(trained_experts, tiny_dataset, gradcheck):
    model = build_merged_model(trained_experts, MergeConfig(k=2))
    rng = np.random.default_rng(1)
    model.gate.w_gate.data[...] = 0.3 * rng.standard_normal(model.gate.w_gate.shape)
    model.gate.w_noise.data[...] = 0.3 * rng.standard_normal(model.gate.w_noise.shape)
    for m in model.experts:
        for mask in m.masks.values():
            mask.data[...] = 1.0 + 0.2 * rng.standard_normal(mask.shape)
    graphs = tiny_dataset.graphs[:6]
    labels = tiny_dataset.labels[:6]
    # the same noise draw on every evaluation
    f = lambda t: merge_loss(model, graphs, labels, np.random.default_rng(5), "train")[0]
    gradcheck(f, model.gate.w_gate, _random_entries(rng, model.gate.w_gate.shape))
    gradcheck(f, model.gate.w_noise, _random_entries(rng, model.gate.w_noise.shape))
    for m in model.experts:
        for mask in m.masks.values():
            gradcheck(f, mask, _random_entries(rng, mask.shape))


def test_mask_loss_gradients_for_every_mask(trained_experts, tiny_dataset, gradcheck):
    model = build_merged_model(trained_experts, MergeConfig(k=2, placement="all"))
    rng = np.random.default_rng(2)
    for m in model.experts:
        for mask in m.masks.values():
            mask.data[...] = 1.0 + 0.2 * rng.standard_normal(mask.shape)
    graphs = tiny_dataset.graphs[:6]
    labels = tiny_dataset.labels[:6]
    f = lambda t: mask_loss(model, graphs, labels)
    for m in model.experts:
        for mask in m.masks.values():
            gradcheck(f, mask, _random_entries(rng, mask.shape))


def test_sparse_gate_keeps_the_two_best_scores():
    weights = sparse_gate(ad.constant([[3.0, 1.0, 2.0]]), 2).data
    np.testing.assert_allclose(weights, [[0.731, 0.0, 0.269]], atol=1e-3)
    assert weights[0, 1] == 0.0


def test_sparse_gate_ignores_a_constant_score_shift():
    scores = np.random.default_rng(3).standard_normal((5, 4))
    base = sparse_gate(ad.constant(scores), 2).data
    shifted = sparse_gate(ad.constant(scores + 7.5), 2).data
    np.testing.assert_allclose(shifted, base, rtol=0, atol=1e-12)


def test_train_mode_gate_noise_has_softplus_scale(trained_experts, tiny_dataset):
    model = build_merged_model(trained_experts, MergeConfig(k=2))
    rng = np.random.default_rng(4)
    model.gate.w_noise.data[...] = 0.5 * rng.standard_normal(model.gate.w_noise.shape)
    row = gate_features(tiny_dataset[0])
    draws = gate_scores(model.gate, np.tile(row, (10_000, 1)), np.random.default_rng(6), "train").data
    expected = np.log1p(np.exp(row @ model.gate.w_noise.data)) ** 2
    assert np.all(np.abs(draws.mean(axis=0)) < 4 * np.sqrt(expected) / 100)
    np.testing.assert_allclose(draws.var(axis=0), expected, rtol=0.06)


def test_merge_train_lowers_the_loss_and_history_adds_up(trained_experts, tiny_dataset):
    cfg = MergeConfig(k=2, epochs=10, batch_size=8, noisy_gate=False)
    model, history = merge_train(build_merged_model(trained_experts, cfg), tiny_dataset, cfg, seed=3)
    assert history["total"].iloc[-1] <= history["total"].iloc[0]
    recombined = history["fit"] + cfg.lambda_gate * history["gate"] + cfg.lambda_mask * history["mask"]
    np.testing.assert_allclose(history["total"], recombined, rtol=1e-10)


@pytest.mark.parametrize("kind", ["GCN", "GIN", "GAT"])
def test_classifier_masks_cover_a_small_share_of_the_expert(kind):
    expert = build_model(kind, 8, 2, hidden_dim=32)
    assert MaskedExpert(expert, "classifier").mask_size / expert.num_parameters() < 0.25


def test_merge_train_only_moves_masks_and_gate(trained_experts, tiny_dataset, small_merge):
    snaps = [e.snapshot() for e in trained_experts]
    model = build_merged_model(trained_experts, small_merge, ["GCN-A", "GIN-A"])
    model, history = merge_train(model, tiny_dataset, small_merge, seed=0)
    for expert, snap in zip(trained_experts, snaps):
        assert expert.matches_snapshot(snap)
        assert all(p.requires_grad for p in expert.parameters())
    assert np.abs(model.gate.w_gate.data).max() > 0
    assert any(np.any(m.data != 1.0) for masked in model.experts for m in masked.masks.values())
    assert list(history.columns) == ["epoch", "fit", "gate", "mask", "total"]
    assert len(history) == small_merge.epochs
    assert np.all(np.isfinite(history.to_numpy(dtype=float)))
    assert set(evaluate_merged(model, tiny_dataset)) == {"accuracy", "macro_precision"}
    table = model.routing_table(tiny_dataset)
    assert list(table.columns) == ["graph", "label", "w_GCN-A", "w_GIN-A", "top_expert"]
    assert len(table) == len(tiny_dataset)


def test_merge_train_without_masks_keeps_them_at_one(trained_experts, tiny_dataset):
    cfg = MergeConfig(k=2, epochs=1, batch_size=6, learn_masks=False)
    model, history = merge_train(build_merged_model(trained_experts, cfg), tiny_dataset, cfg, seed=1)
    for masked in model.experts:
        for mask in masked.masks.values():
            np.testing.assert_array_equal(mask.data, 1.0)
    assert (history["mask"] == 0.0).all()


def test_merge_config_validation(caplog):
    with pytest.raises(DomainError):
        MergeConfig(k=0)
    with pytest.raises(DomainError):
        MergeConfig(gamma_v=0.0)
    with pytest.raises(ValueError):
        MergeConfig(placement="head")
    with caplog.at_level(logging.WARNING):
        MergeConfig(lambda_gate=0.5)
    assert "outside the tuning grid" in caplog.text


def test_build_merged_model_checks_experts(trained_experts):
    with pytest.raises(IncompatibleModelsError):
        build_merged_model([trained_experts[0], build_model("GCN", 4, 3)], MergeConfig(k=1))
    with pytest.raises(IncompatibleModelsError):
        build_merged_model([], MergeConfig())
    clamped = build_merged_model(trained_experts[:1], MergeConfig(k=2))
    assert clamped.gate.k == 1


def test_save_and_load_merged(tmp_path, trained_experts, tiny_dataset, small_merge):
    experts_dir, merged_dir = tmp_path / "experts", tmp_path / "merged"
    paths = [save_checkpoint(e, experts_dir / f"e{j}.ckpt") for j, e in enumerate(trained_experts)]
    model = build_merged_model(trained_experts, small_merge, ["e0", "e1"])
    merge_train(model, tiny_dataset, small_merge, seed=2)
    refs = [os.path.relpath(p, merged_dir) for p in paths]
    saved = save_merged(model, merged_dir / "merged.model", refs)

    loaded = load_merged(saved)
    assert loaded.expert_ids == ["e0", "e1"]
    assert loaded.config == model.config
    np.testing.assert_array_equal(predict_proba_merged(loaded, tiny_dataset),
                                  predict_proba_merged(model, tiny_dataset))

    paths[1].unlink()
    with pytest.raises(CheckpointError):
        load_merged(saved)
