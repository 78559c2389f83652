"""Tests for the variational conditional, the CLUB estimate and its schedule."""

import math

import numpy as np
import pytest

from dsva import diffcore as dc
from dsva.club import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    ClubSchedule,
    Phase,
    VariationalQ,
    alternate,
    analytic_club,
    club_bench,
    club_estimate,
    correlated_gaussian,
    fit_q_step,
    infonce_diagnostic,
    q_log_prob,
    true_gaussian_mi,
)
from dsva.diffcore import Parameter, Tensor
from dsva.errors import ContractError, ShapeError
from dsva.optim import Adam


def standard_q(dim, components=1):
    """Affine q that is N(0, I) for every h_v."""
    q = VariationalQ(dim, np.random.default_rng(0), hidden_dim=None, components=components)
    for p in q.parameters():
        p.data = np.zeros_like(p.data)
    return q


def test_standard_normal_log_prob():
    """log N(0; 0, I) in two dimensions and log N(1; 0, 1) in one."""
    q2 = standard_q(2)
    assert q_log_prob(q2, np.zeros(2), np.zeros(2)).item() == pytest.approx(-1.8379, abs=1e-4)
    q1 = standard_q(1)
    assert q_log_prob(q1, np.ones(1), np.zeros(1)).item() == pytest.approx(-1.4189, abs=1e-4)


def test_batched_log_prob_shape():
    """Batches give one log density per row."""
    q = VariationalQ(3, np.random.default_rng(1), hidden_dim=8)
    rng = np.random.default_rng(2)
    values = q_log_prob(q, rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
    assert values.shape == (5,)
    with pytest.raises(ShapeError):
        q_log_prob(q, np.zeros((5, 3)), np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        q_log_prob(q, np.zeros((5, 2)), np.zeros((5, 2)))


def test_equal_mixture_matches_single_gaussian():
    """Two identical, equally weighted components give the plain Gaussian density."""
    x = np.random.default_rng(3).normal(size=(4, 2))
    single = q_log_prob(standard_q(2), x, x).data
    mixture = q_log_prob(standard_q(2, components=2), x, x).data
    np.testing.assert_allclose(mixture, single, atol=1e-12)


def test_log_variance_is_clamped():
    """Raw log-variances outside [-8, 8] are clamped."""
    q = standard_q(1)
    h_v = Tensor(np.zeros((2, 1)))
    q.logvar_b.data = np.array([20.0])
    assert np.all(q.conditional(h_v)[1].data == LOGVAR_MAX)
    q.logvar_b.data = np.array([-20.0])
    assert np.all(q.conditional(h_v)[1].data == LOGVAR_MIN)


def test_constant_batch_gives_zero_estimate():
    """When every h_v is the same, shifted pairs equal aligned pairs."""
    q = VariationalQ(2, np.random.default_rng(4), hidden_dim=6)
    h_t = Tensor(np.random.default_rng(5).normal(size=(6, 2)))
    h_v = Tensor(np.tile([0.3, -1.2], (6, 1)))
    assert club_estimate(q, h_t, h_v).item() == pytest.approx(0.0, abs=1e-12)


def test_estimate_needs_a_batch():
    """Batches of one have no negative pair."""
    q = standard_q(2)
    with pytest.raises(ContractError):
        club_estimate(q, Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))))
    with pytest.raises(ShapeError):
        club_estimate(q, Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 2))))


def test_estimate_is_differentiable_in_features():
    """Gradients of the estimate reach both feature batches."""
    q = VariationalQ(2, np.random.default_rng(6), hidden_dim=4)
    rng = np.random.default_rng(7)
    h_t = Parameter(rng.normal(size=(4, 2)))
    h_v = Parameter(rng.normal(size=(4, 2)))
    dc.backward(club_estimate(q, h_t, h_v))
    assert h_t.grad is not None and np.any(h_t.grad != 0)
    assert h_v.grad is not None and np.any(h_v.grad != 0)


def test_fit_q_step_detaches_features():
    """Fitting q leaves the feature tensors without gradient."""
    q = VariationalQ(2, np.random.default_rng(8), hidden_dim=4)
    rng = np.random.default_rng(9)
    h_t = Parameter(rng.normal(size=(8, 2)))
    h_v = Parameter(rng.normal(size=(8, 2)))
    fit_q_step(q, h_t, h_v, Adam(q.parameters(), lr=0.01))
    assert h_t.grad is None and h_v.grad is None
    assert all(p.grad is None for p in q.parameters())


def test_fit_q_step_with_zero_learning_rate():
    """A zero learning rate returns the NLL and leaves q unchanged."""
    q = standard_q(1)
    before = [p.data.copy() for p in q.parameters()]
    zeros = Tensor(np.zeros((3, 1)))
    nll = fit_q_step(q, zeros, zeros, Adam(q.parameters(), lr=0.0))
    assert nll == pytest.approx(0.5 * math.log(2 * math.pi))
    for p, old in zip(q.parameters(), before):
        np.testing.assert_array_equal(p.data, old)


def test_fitting_lowers_nll():
    """Repeated fits reduce the negative log-likelihood."""
    rng = np.random.default_rng(10)
    h_t, h_v = correlated_gaussian(0.8, 500, rng)
    q = VariationalQ(1, rng, hidden_dim=None)
    opt = Adam(q.parameters(), lr=0.05)
    first = fit_q_step(q, Tensor(h_t), Tensor(h_v), opt)
    for _ in range(100):
        last = fit_q_step(q, Tensor(h_t), Tensor(h_v), opt)
    assert last < first


def test_alternation_phases():
    """q is refit on steps divisible by k."""
    schedule = ClubSchedule(k=5)
    phases = [alternate(schedule, step) for step in range(11)]
    refits = [step for step, phase in enumerate(phases) if phase is Phase.UPDATE_Q]
    assert refits == [0, 5, 10]
    with pytest.raises(ContractError):
        alternate(schedule, -1)


@pytest.mark.parametrize("kwargs", [{"k": 0}, {"q_steps_per_update": -1}, {"lambda_club": -0.1}])
def test_schedule_validation(kwargs):
    """Non-positive k and negative counts or weights are rejected."""
    with pytest.raises(ContractError):
        ClubSchedule(**kwargs)


def test_infonce_is_zero_for_uninformative_critic():
    """A critic that ignores h_v scores every pairing equally."""
    rng = np.random.default_rng(11)
    value = infonce_diagnostic(standard_q(2), rng.normal(size=(16, 2)), rng.normal(size=(16, 2)))
    assert value == pytest.approx(0.0, abs=1e-9)


def test_infonce_is_bounded_by_log_batch():
    """A sharp critic on well separated identical pairs approaches but never exceeds log B."""
    q = standard_q(2)
    q.mu_w.data = np.eye(2)
    q.logvar_b.data = np.full(2, -4.0)
    # 4x4 grid with spacing 2, far apart relative to the critic width exp(-2)
    h = 2.0 * np.stack(np.meshgrid(np.arange(4.0), np.arange(4.0)), axis=-1).reshape(16, 2)
    value = infonce_diagnostic(q, h, h)
    assert value <= math.log(16) + 1e-9
    assert value > math.log(16) - 0.1


def test_gaussian_reference_values():
    """True MI and the exact-conditional CLUB value for unit-variance pairs."""
    assert true_gaussian_mi(0.0) == 0.0
    assert true_gaussian_mi(0.5) == pytest.approx(0.1438, abs=1e-4)
    assert analytic_club(0.5) == pytest.approx(1.0 / 3.0)
    assert analytic_club(0.9, dim=2) == pytest.approx(2 * 0.81 / 0.19)


def test_small_club_bench_upper_bounds_mi():
    """A short bench already puts the estimate above the true MI."""
    rows = club_bench(rhos=(0.0, 0.8), samples=2000, steps=300, learning_rate=0.05, seed=1)
    assert [row["rho"] for row in rows] == [0.0, 0.8]
    assert abs(rows[0]["estimate"]) < 0.05
    assert rows[1]["estimate"] > rows[1]["true_mi"]


@pytest.mark.slow
def test_club_bench_tracks_analytic_value():
    """With the default budget the estimate lands near the analytic CLUB value."""
    for row in club_bench():
        assert row["estimate"] >= row["true_mi"] - 0.05
        tolerance = 0.1 + 0.1 * row["analytic_club"]
        assert row["estimate"] == pytest.approx(row["analytic_club"], abs=tolerance)
