"""Tests for the autodiff core and optimizers."""

import numpy as np
import pytest

from dsva import diffcore as dc
from dsva.diffcore import Module, Parameter, Tensor
from dsva.errors import ContractError, NumericError, ShapeError
from dsva.optim import SGD, Adam, Optimizer, OptimizerState, optimizer_step


class Affine(Module):
    """Small module for parameter discovery tests."""

    def __init__(self, rng):
        self.w = Parameter(rng.normal(size=(3, 2)))
        self.b = Parameter(np.zeros(2))
        self._cache = Parameter(np.zeros(1))


class Stack(Module):
    def __init__(self, rng):
        self.first = Affine(rng)
        self.layers = [Affine(rng), Affine(rng)]


@pytest.fixture
def rng():
    """Seeded generator."""
    return np.random.default_rng(0)


def test_matmul_identity():
    """Identity times a column returns the column."""
    out = dc.matmul(np.eye(2), np.array([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_sigmoid_symmetry_point():
    """sigmoid(0) is one half."""
    assert dc.sigmoid(0.0).item() == 0.5


def test_sigmoid_is_stable_for_large_inputs():
    """No overflow at extreme logits."""
    out = dc.sigmoid(np.array([-800.0, 800.0]))
    np.testing.assert_allclose(out.data, [0.0, 1.0])


def test_leaky_relu_negative_branch():
    """Negative inputs are scaled by the slope."""
    assert dc.leaky_relu(-2.0, slope=0.2).item() == pytest.approx(-0.4)


def test_sum_gradient_is_ones():
    """d sum(x) / dx is a vector of ones."""
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    dc.backward(x.sum())
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_full_reductions_are_zero_dimensional():
    """Reducing over every axis gives a 0-d tensor whose gradient spreads evenly."""
    x = Parameter(np.ones(4))
    with dc.Tape():
        loss = dc.mean(x)
        assert loss.shape == ()
        assert dc.sum_(x).shape == ()
        dc.backward(loss)
    np.testing.assert_allclose(x.grad, [0.25, 0.25, 0.25, 0.25])
    assert Tensor(3.0).shape == ()


def test_mean_square_gradient():
    """d mean(x^2) / dx = 2x / N."""
    x = Tensor([2.0, -2.0], requires_grad=True)
    dc.backward(dc.square(x).mean())
    np.testing.assert_allclose(x.grad, [2.0, -2.0])


def test_gradients_accumulate_over_shared_inputs():
    """A tensor used twice receives both contributions."""
    x = Tensor([1.0, 3.0], requires_grad=True)
    dc.backward((x * x + x).sum())
    np.testing.assert_allclose(x.grad, [3.0, 7.0])


def test_broadcast_gradient_is_reduced():
    """A bias broadcast over rows gets the row-summed gradient."""
    b = Tensor([1.0, 2.0], requires_grad=True)
    x = Tensor(np.ones((4, 2)))
    dc.backward((x + b).sum())
    np.testing.assert_allclose(b.grad, [4.0, 4.0])


def test_backward_requires_scalar():
    """Non-scalar losses are rejected."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError, match="scalar"):
        dc.backward(x * 2.0)


def test_backward_on_constant_is_rejected():
    """A loss with no recorded graph cannot be differentiated."""
    with pytest.raises(ContractError):
        dc.backward(Tensor(1.0))


def test_no_grad_records_nothing():
    """Operations inside no_grad are constants."""
    x = Tensor([1.0], requires_grad=True)
    with dc.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert dc.is_grad_enabled()


def test_tape_context_isolates_entries():
    """Entries go to the innermost tape and are cleared by backward."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    with dc.Tape() as tape:
        loss = (x * 3.0).sum()
        assert len(tape) == 2
        dc.backward(loss)
    assert len(tape) == 0
    np.testing.assert_allclose(x.grad, [3.0, 3.0])


def test_tape_rejects_inputs_from_another_tape():
    """Mixing graphs across tapes is a contract violation."""
    x = Tensor([1.0], requires_grad=True)
    with dc.Tape():
        y = x * 2.0
    with dc.Tape():
        with pytest.raises(ContractError, match="another tape"):
            _ = y + 1.0


def test_retain_graph_allows_second_pass():
    """retain_graph keeps entries so backward can run again."""
    x = Tensor([1.0], requires_grad=True)
    with dc.Tape():
        loss = (x * 5.0).sum()
        dc.backward(loss, retain_graph=True)
        dc.backward(loss)
    np.testing.assert_allclose(x.grad, [10.0])


def test_gradient_reversal_forward_is_identity():
    """GRL leaves values unchanged."""
    out = dc.gradient_reversal(Tensor([1.0, 2.0, 3.0]), 1.0)
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


@pytest.mark.parametrize(
    "upstream,lam,expected",
    [([1.0, 1.0], 1.0, [-1.0, -1.0]), ([2.0, 0.0], 0.5, [-1.0, 0.0])],
)
def test_gradient_reversal_backward(upstream, lam, expected):
    """Backward multiplies the upstream gradient by -lambda."""
    x = Tensor([0.3, -0.7], requires_grad=True)
    dc.backward((dc.gradient_reversal(x, lam) * np.array(upstream)).sum())
    np.testing.assert_allclose(x.grad, expected)


def test_gradient_reversal_rejects_negative_lambda():
    """Negative coefficients are invalid."""
    with pytest.raises(ContractError):
        dc.gradient_reversal(Tensor([1.0]), -0.1)


def test_shape_errors_name_the_op():
    """Mismatched shapes raise ShapeError mentioning the op."""
    with pytest.raises(ShapeError, match="matmul"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        dc.add(np.ones(3), np.ones(4))


def test_broadcast_expands_one_operand_only():
    """An operand may expand into the other, but not both into a new shape."""
    assert dc.add(np.ones((3, 4)), np.ones((1, 4))).shape == (3, 4)
    assert dc.multiply(np.ones((2, 3, 4)), 2.0).shape == (2, 3, 4)
    with pytest.raises(ShapeError, match="add"):
        dc.add(np.ones((3, 1, 4)), np.ones((2, 1)))
    with pytest.raises(ShapeError, match="multiply"):
        dc.multiply(np.ones((3, 1)), np.ones((1, 4)))


def test_non_finite_values_raise():
    """log of zero and division by zero are numeric errors."""
    with pytest.raises(NumericError, match="log"):
        dc.log(Tensor([0.0]))
    with pytest.raises(NumericError, match="divide"):
        dc.divide(1.0, Tensor([0.0]))
    with pytest.raises(NumericError):
        Tensor([np.nan])


def test_slice_gradient_scatters():
    """Slicing routes gradient only to the selected entries, fancy indices accumulate."""
    x = Tensor(np.arange(4.0), requires_grad=True)
    dc.backward(x[np.array([1, 1, 3])].sum())
    np.testing.assert_allclose(x.grad, [0.0, 2.0, 0.0, 1.0])


def test_logsumexp_matches_numpy():
    """Stable log-sum-exp equals the naive formula on moderate inputs."""
    a = np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]])
    out = dc.logsumexp(a, axis=1)
    np.testing.assert_allclose(out.data, np.log(np.exp(a).sum(axis=1)))


def test_clamp_blocks_gradient_outside_interval():
    """Clamped coordinates get zero gradient."""
    x = Tensor([-2.0, 0.5, 3.0], requires_grad=True)
    dc.backward(dc.clamp(x, -1.0, 1.0).sum())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_forward_op_dispatch():
    """Ops can be applied by kind name."""
    out = dc.forward_op("leaky_relu", Tensor([-1.0, 1.0]), slope=0.1)
    np.testing.assert_allclose(out.data, [-0.1, 1.0])
    with pytest.raises(ContractError, match="unknown op"):
        dc.forward_op("conv2d", Tensor([1.0]))


def test_module_discovers_nested_parameters(rng):
    """Parameters are named by dotted attribute path; private attributes are skipped."""
    names = sorted(Stack(rng).named_parameters())
    assert names == [
        "first.b", "first.w", "layers.0.b", "layers.0.w", "layers.1.b", "layers.1.w",
    ]


def test_state_dict_round_trip(rng):
    """Loading a state dict restores every value."""
    a, b = Stack(rng), Stack(np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    for name, p in a.named_parameters().items():
        np.testing.assert_array_equal(p.data, b.named_parameters()[name].data)


def test_load_state_dict_checks_names_and_shapes(rng):
    """Unknown, missing and mis-shaped entries are rejected."""
    module = Affine(rng)
    with pytest.raises(ContractError, match="unknown"):
        module.load_state_dict({"w": np.zeros((3, 2)), "b": np.zeros(2), "z": np.zeros(1)})
    with pytest.raises(ContractError, match="missing"):
        module.load_state_dict({"w": np.zeros((3, 2))})
    module.load_state_dict({"w": np.zeros((3, 2))}, strict=False)
    with pytest.raises(ShapeError, match="w"):
        module.load_state_dict({"w": np.zeros((2, 3)), "b": np.zeros(2)})


def test_freeze_stops_gradients(rng):
    """Frozen parameters receive no gradient."""
    module = Affine(rng)
    module.freeze()
    x = Tensor(np.ones((1, 3)), requires_grad=True)
    dc.backward((x @ module.w + module.b).sum())
    assert module.w.grad is None
    assert x.grad is not None


def test_sgd_step():
    """One SGD step moves against the gradient."""
    p = Parameter([1.0])
    p.grad = np.array([1.0])
    SGD([p], lr=0.1).step()
    assert p.data[0] == pytest.approx(0.9)
    assert p.grad is None


def test_sgd_zero_learning_rate_keeps_parameters():
    """lr=0 changes nothing."""
    p = Parameter([1.5, -2.0])
    p.grad = np.array([10.0, -3.0])
    SGD([p], lr=0.0).step()
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_first_step_is_learning_rate():
    """Bias-corrected Adam moves by about lr on its first step."""
    p = Parameter([0.0])
    p.grad = np.array([1.0])
    Adam([p], lr=1e-3).step()
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-4)


def test_optimizer_requires_gradients():
    """A parameter without .grad is a contract violation naming its index."""
    p, q = Parameter([1.0]), Parameter([2.0])
    p.grad = np.array([1.0])
    with pytest.raises(ContractError, match="parameter 1"):
        optimizer_step(OptimizerState(kind="sgd", learning_rate=0.1), [p, q])


def test_optimizer_state_validation():
    """Unknown kinds and negative rates are rejected."""
    with pytest.raises(ContractError):
        OptimizerState(kind="rmsprop")
    with pytest.raises(ContractError):
        OptimizerState(kind="sgd", learning_rate=-1.0)


def test_training_loop_fits_a_line(rng):
    """A linear model reaches a small loss with Adam."""
    x = rng.normal(size=(64, 1))
    y = 3.0 * x - 1.0
    w, b = Parameter([[0.0]]), Parameter([0.0])
    opt = Optimizer([w, b], OptimizerState(kind="adam", learning_rate=0.1))
    for _ in range(500):
        loss = dc.square(Tensor(x) @ w + b - y).mean()
        dc.backward(loss)
        opt.step()
    assert w.data[0, 0] == pytest.approx(3.0, abs=0.05)
    assert b.data[0] == pytest.approx(-1.0, abs=0.05)
