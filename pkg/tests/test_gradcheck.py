"""Tests for the finite-difference gradient checker."""

import numpy as np
import pytest

from dsva import diffcore as dc
from dsva.diffcore import Parameter, Tensor
from dsva.gradcheck import (
    format_report,
    grad_check,
    grl_consistency,
    relative_error,
    run_suite,
    suite_cases,
)
from dsva.losses import dice_loss


@pytest.fixture
def linear():
    """Linear layer with a squared-error loss."""
    rng = np.random.default_rng(3)
    w = Parameter(rng.normal(size=(5, 2)))
    b = Parameter(rng.normal(size=2))
    x = rng.normal(size=(8, 5))
    y = rng.normal(size=(8, 2))

    def loss():
        return dc.square(Tensor(x) @ w + b - y).mean()

    return loss, {"w": w, "b": b}


def test_linear_layer_passes(linear):
    """Analytic and numeric gradients agree on a linear layer."""
    loss, params = linear
    report = grad_check(loss, params, tolerance=1e-4, name="linear")
    assert report.passed
    assert report.max_error < 1e-4
    assert [row["parameter"] for row in report.rows] == ["w", "b"]


def test_wrong_gradient_is_reported(linear):
    """A mismatch shows up as a failed row, not an exception."""
    loss, params = linear
    report = grad_check(loss, params, expected_scale={"w": 2.0})
    rows = {row["parameter"]: row for row in report.rows}
    assert not rows["w"]["passed"]
    assert rows["b"]["passed"]
    assert not report.passed


def test_parameters_are_restored(linear):
    """Perturbed coordinates get their original values back."""
    loss, params = linear
    before = {name: p.data.copy() for name, p in params.items()}
    grad_check(loss, params)
    for name, p in params.items():
        np.testing.assert_array_equal(p.data, before[name])
        assert p.grad is None


def test_max_coords_samples_coordinates(linear):
    """Large parameters are spot-checked."""
    loss, params = linear
    report = grad_check(loss, params, max_coords=3)
    assert [row["coordinates"] for row in report.rows] == [3, 2]


def test_dice_loss_passes():
    """The Dice loss graph is differentiated correctly."""
    rng = np.random.default_rng(1)
    pred = Parameter(rng.uniform(0.05, 0.95, size=(3, 12)))
    target = (rng.uniform(size=(3, 12)) > 0.5).astype(np.float64)
    report = grad_check(lambda: dice_loss(pred, target), {"pred": pred})
    assert report.passed


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0, 2.0])
def test_reversed_gradient_is_negated_plain_gradient(lam):
    """Through gradient reversal the gradient is -lambda times the plain one."""
    assert grl_consistency(lam) < 1e-10


def test_relative_error_floor():
    """Differences below the absolute floor count as exact."""
    rel = relative_error(np.array([0.0, 1.0, 1e-12]), np.array([1e-9, 1.1, 0.0]))
    np.testing.assert_allclose(rel, [0.0, 0.1 / 1.1, 0.0])


def test_suite_covers_every_op_kind():
    """Each differentiable op kind appears in at least one built-in case."""
    names = set(suite_cases())
    ops = {kind.value for kind in dc.OpKind} - {"gradient_reversal"}
    uncovered = [op for op in ops if not any(op in name for name in names)]
    assert uncovered == []
    assert "decode_mask_16px" in names
    assert "triple_supervision" in names


def test_suite_passes():
    """Every built-in case and the reversal identity pass at 1e-4."""
    reports = run_suite(seed=0, tolerance=1e-4, max_coords=8)
    failed = [(r.name, r.max_error) for r in reports if not r.passed]
    assert failed == []
    assert reports[-1].name == "grl_identity"


def test_format_report_lists_rows(linear):
    """The printed table has a header and one line per parameter."""
    loss, params = linear
    text = format_report([grad_check(loss, params, name="linear")])
    lines = text.splitlines()
    assert lines[0].startswith("case")
    assert len(lines) == 3
    assert all(line.endswith("ok") for line in lines[1:])
