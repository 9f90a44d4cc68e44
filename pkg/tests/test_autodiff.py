import numpy as np
import pytest

import autodiff as ad
from autodiff import AdamW, AdamWState, BatchNormState, Tape, Tensor, adamw_step, finite_diff_check
from errors import DomainError, NonFiniteError, ShapeError


def away_from_zero(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0) * (0.5 + rng.random(shape))


def weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum_all(ad.hadamard(t, ad.constant(w)))


def unary_case(op, positive=False):
    def build(rng):
        x = Tensor(0.5 + rng.random((3, 4)) if positive else away_from_zero(rng, (3, 4)))
        w = rng.standard_normal(op(x).shape)
        return (lambda t: weighted_sum(op(t), w)), x
    return build


def binary_case(op):
    def build(rng):
        other = ad.constant(rng.standard_normal((3, 4)))
        w = rng.standard_normal((3, 4))
        return (lambda t: weighted_sum(op(t, other), w)), Tensor(rng.standard_normal((3, 4)))
    return build


def matmul_case(rng):
    b = ad.constant(rng.standard_normal((4, 2)))
    return (lambda t: ad.sum_all(ad.matmul(t, b))), Tensor(rng.standard_normal((3, 4)))


def scale_by_tensor_case(rng):
    a = ad.constant(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))
    return (lambda s: weighted_sum(ad.scale(a, s), w)), Tensor(rng.standard_normal((1, 1)))


def cross_entropy_case(rng):
    labels = rng.integers(0, 3, size=4)
    return (lambda t: ad.cross_entropy(t, labels)), Tensor(rng.standard_normal((4, 3)))


def weighted_softmax_scores_case(rng):
    weights = ad.constant(0.2 + rng.random((3, 3)))
    w = rng.standard_normal((3, 3))
    return (lambda t: weighted_sum(ad.weighted_row_softmax(t, weights), w)), Tensor(rng.standard_normal((3, 3)))


def weighted_softmax_weights_case(rng):
    scores = ad.constant(rng.standard_normal((3, 3)))
    w = rng.standard_normal((3, 3))
    return (lambda t: weighted_sum(ad.weighted_row_softmax(scores, t), w)), Tensor(0.2 + rng.random((3, 3)))


def rows_and_blocks_case(rng):
    w_rows = rng.standard_normal((3, 3))
    w_block = rng.standard_normal((6, 5))

    def f(t):
        picked = ad.take_rows(t, [2, 0, 2])
        block = ad.block_diag([picked, ad.take_cols(t, [1, 0])])
        return ad.add(weighted_sum(picked, w_rows), weighted_sum(block, w_block))
    return f, Tensor(rng.standard_normal((3, 3)))


def concat_case(rng):
    w = rng.standard_normal((3, 7))

    def f(t):
        wide = ad.concat_cols([t, ad.transpose(t), ad.take_cols(t, [0])])
        tall = ad.concat_rows([wide, ad.take_rows(wide, [1])])
        return weighted_sum(ad.take_rows(tall, [0, 3, 2]), w)
    return f, Tensor(rng.standard_normal((3, 3)))


def scatter_gather_case(rng):
    rows, cols = np.triu_indices(4, k=1)
    w = rng.standard_normal((4, 4))

    def f(t):
        sym = ad.scatter_symmetric(t, 4, rows, cols)
        back = ad.gather_entries(sym, cols, rows)
        return ad.add(weighted_sum(sym, w), ad.sum_all(ad.hadamard(back, back)))
    return f, Tensor(rng.standard_normal((6, 1)))


def bn_case(mode):
    def build(rng):
        bn = BatchNormState.create(4)
        bn.gamma.data[...] = 1.0 + rng.random((1, 4))
        bn.beta.data[...] = rng.standard_normal((1, 4))
        bn.running_mean = rng.standard_normal((1, 4))
        bn.running_var = 0.5 + rng.random((1, 4))
        w = rng.standard_normal((5, 4))
        return (lambda t: weighted_sum(ad.batch_norm(t, bn, mode), w)), Tensor(rng.standard_normal((5, 4)))
    return build


GRADIENT_CASES = {
    "matmul": matmul_case,
    "add": binary_case(ad.add),
    "subtract": binary_case(ad.subtract),
    "hadamard": binary_case(ad.hadamard),
    "sigmoid": unary_case(ad.sigmoid),
    "relu": unary_case(ad.relu),
    "leaky_relu": unary_case(ad.leaky_relu),
    "log": unary_case(ad.log, positive=True),
    "exp": unary_case(ad.exp),
    "softplus": unary_case(ad.softplus),
    "abs": unary_case(ad.absolute),
    "power": unary_case(lambda t: ad.power(t, 1.5), positive=True),
    "inverse_sqrt": unary_case(lambda t: ad.power(t, -0.5), positive=True),
    "scale": unary_case(lambda t: ad.scale(t, -2.5)),
    "scale_by_tensor": scale_by_tensor_case,
    "transpose": unary_case(ad.transpose),
    "mean": unary_case(lambda t: ad.hadamard(ad.mean_all(t), ad.mean_all(t))),
    "norm2": unary_case(ad.norm2),
    "softmax_rows": unary_case(lambda t: ad.softmax(t, axis=1)),
    "softmax_cols": unary_case(lambda t: ad.softmax(t, axis=0)),
    "log_softmax": unary_case(ad.log_softmax),
    "weighted_softmax_scores": weighted_softmax_scores_case,
    "weighted_softmax_weights": weighted_softmax_weights_case,
    "cross_entropy": cross_entropy_case,
    "rows_and_blocks": rows_and_blocks_case,
    "concat": concat_case,
    "scatter_gather": scatter_gather_case,
    "batch_norm_train": bn_case("train"),
    "batch_norm_eval": bn_case("eval"),
}


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients_match_central_differences(name, seed):
    f, x = GRADIENT_CASES[name](np.random.default_rng(seed))
    assert finite_diff_check(f, x) < 1e-4


def test_matmul_values_and_shape_error():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal(ad.matmul(m, Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])
    with pytest.raises(ShapeError, match=r"\(2, 2\).*\(3, 1\)"):
        ad.matmul(m, Tensor(np.ones((3, 1))))


def test_elementwise_values():
    m = Tensor([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(ad.hadamard(m, ad.ones(2, 2)).data, m.data)
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.softplus(Tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-12)
    with pytest.raises(ShapeError):
        ad.add(m, ad.ones(1, 2))
    with pytest.raises(DomainError):
        ad.log(Tensor([[1.0, 0.0]]))
    with pytest.raises(DomainError):
        ad.log(Tensor([[-3.0]]))


def test_softmax_values_and_shift_invariance():
    np.testing.assert_allclose(ad.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(ad.softmax(Tensor([[np.log(1.0), np.log(3.0)]])).data, [[0.25, 0.75]], atol=1e-12)
    x = np.random.default_rng(3).standard_normal((6, 5)) * 20
    out = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    shifted = ad.softmax(Tensor(x + 123.0)).data
    np.testing.assert_allclose(shifted, out, atol=1e-12)
    with pytest.raises(NonFiniteError):
        ad.softmax(Tensor([[np.nan, 1.0]]))


def test_cross_entropy_values():
    assert ad.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(np.log(2.0), abs=1e-12)
    assert ad.cross_entropy(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(2.0611536e-9, rel=1e-6)
    with pytest.raises(DomainError):
        ad.cross_entropy(Tensor([[0.0, 0.0]]), [2])


def test_straight_through_forwards_hard_and_passes_soft_gradient():
    x = ad.parameter([[0.8, -1.1]])
    with Tape() as tape:
        soft = ad.sigmoid(x)
        hard = ad.straight_through(soft, (soft.data > 0.5).astype(float))
        loss = ad.sum_all(hard)
    np.testing.assert_array_equal(hard.data, [[1.0, 0.0]])
    tape.backward(loss)
    s = 1.0 / (1.0 + np.exp(-x.data))
    np.testing.assert_allclose(x.grad, s * (1 - s), rtol=1e-12)
    with pytest.raises(ShapeError):
        ad.straight_through(soft, np.ones((2, 2)))


def test_sum_of_squares_oracle():
    x = Tensor([[1.0, 2.0]])
    assert finite_diff_check(lambda t: ad.sum_all(ad.hadamard(t, t)), x) < 1e-6


def test_backward_twice_doubles_gradients():
    rng = np.random.default_rng(0)
    a = ad.parameter(rng.standard_normal((3, 3)))
    b = ad.parameter(rng.standard_normal((3, 2)))
    with Tape() as tape:
        loss = ad.sum_all(ad.sigmoid(ad.matmul(a, b)))
    tape.backward(loss)
    first_a, first_b = a.grad.copy(), b.grad.copy()
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, 2 * first_a)
    np.testing.assert_array_equal(b.grad, 2 * first_b)
    a.zero_grad()
    assert not a.grad.any()


def test_backward_visits_records_in_reverse_order():
    x = ad.parameter([[0.3, -0.2]])
    with Tape() as tape:
        y = ad.exp(x)
        z = ad.scale(y, 2.0)
        loss = ad.sum_all(z)
    tape.backward(loss)
    assert tape.visit_order == [2, 1, 0]
    assert [r.op for r in tape.records] == ["exp", "scale", "sum"]


def test_shared_subexpression_accumulates():
    x = ad.parameter([[2.0]])
    with Tape() as tape:
        y = ad.hadamard(x, x)
        loss = ad.add(y, x)
    tape.backward(loss)
    assert x.grad[0, 0] == pytest.approx(5.0)


def test_backward_requires_scalar_and_constants_do_not_record():
    x = ad.parameter(np.ones((2, 2)))
    with Tape() as tape:
        y = ad.scale(x, 3.0)
        ad.add(ad.ones(2, 2), ad.ones(2, 2))
    assert len(tape) == 1
    with pytest.raises(ShapeError):
        tape.backward(y)
    z = ad.scale(x, 2.0)  # outside any tape
    assert z.requires_grad


def test_tensor_operators():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0, 5.0]])
    np.testing.assert_array_equal((a + b).data, [[4.0, 7.0]])
    np.testing.assert_array_equal((b - a).data, [[2.0, 3.0]])
    np.testing.assert_array_equal((a * b).data, [[3.0, 10.0]])
    np.testing.assert_array_equal((a * 2).data, [[2.0, 4.0]])
    np.testing.assert_array_equal((a @ b.T).data, [[13.0]])
    assert Tensor(3.0).shape == (1, 1)
    assert not Tensor(np.ones((2, 3))).grad.any()


def test_batch_norm_modes():
    bn = BatchNormState.create(2)
    x = Tensor([[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]])
    out = ad.batch_norm(x, bn, "train").data
    np.testing.assert_allclose(out[:, 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(out[:, 0].mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(bn.running_mean, [[0.3, 0.5]], atol=1e-15)
    np.testing.assert_allclose(bn.running_var, [[0.9 + 0.1 * 8.0 / 3.0, 0.9]], atol=1e-15)
    assert bn.num_batches_tracked == 1

    fresh = BatchNormState.create(2)
    y = Tensor([[0.7, -1.2], [2.0, 0.1]])
    np.testing.assert_allclose(ad.batch_norm(y, fresh, "eval").data, y.data, rtol=1e-5)
    np.testing.assert_array_equal(fresh.running_mean, 0.0)
    assert fresh.num_batches_tracked == 0
    with pytest.raises(ShapeError):
        ad.batch_norm(Tensor(np.ones((2, 3))), fresh, "eval")


def test_batch_norm_taps_collect_inputs():
    bn = BatchNormState.create(2)
    taps = []
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    ad.batch_norm(x, bn, "eval", taps)
    assert taps == [x]


def test_adamw_zero_gradient_is_noop():
    p = ad.parameter([[0.5, -1.5]])
    state = AdamWState(lr=0.1, weight_decay=0.0)
    adamw_step([p], [np.zeros((1, 2))], state)
    np.testing.assert_array_equal(p.data, [[0.5, -1.5]])
    assert state.step_count == 1


def test_adamw_first_step_is_learning_rate():
    p = ad.parameter([[0.0]])
    adamw_step([p], [np.ones((1, 1))], AdamWState(lr=0.1, betas=(0.9, 0.999), weight_decay=0.0))
    assert p.data[0, 0] == pytest.approx(-0.1, rel=1e-6)


def test_adamw_decoupled_decay_and_determinism():
    def run():
        p = ad.parameter([[1.0, 2.0]])
        opt = AdamW([p], lr=0.05, weight_decay=0.1)
        for step in range(5):
            p.grad[...] = np.array([[0.3, -0.7]]) * (step + 1)
            opt.step()
        return p.data.copy()
    np.testing.assert_array_equal(run(), run())

    p = ad.parameter([[2.0]])
    adamw_step([p], [np.zeros((1, 1))], AdamWState(lr=0.1, weight_decay=0.5))
    assert p.data[0, 0] == pytest.approx(2.0 * (1 - 0.05))
