"""Tests for the model container: parameter groups, prediction and the phase-2 objective."""

import math

import numpy as np
import pytest

from dsva import diffcore as dc
from dsva.errors import ContractError
from dsva.model import DSVAModel, has_decoupling_stage, loss_weights
from dsva.optim import SGD
from dsva.synthdata import make_batch


@pytest.fixture
def model(config):
    return DSVAModel(config)


@pytest.fixture
def batch(tiny_data):
    train, _ = tiny_data
    return make_batch(train, [0, 1, 2, 3])


def test_same_seed_same_initialization(config):
    """Initialization depends on run.seed only."""
    a, b = DSVAModel(config).state_dict(), DSVAModel(config).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[name], b[name]) for name in a)
    config.run.seed = 1
    c = DSVAModel(config).state_dict()
    assert not np.array_equal(a["encoder.w1"], c["encoder.w1"])


def test_parameter_names_are_dotted_paths(model):
    """Nested modules and decoder blocks appear as dotted names."""
    names = set(model.named_parameters())
    assert "visual_decoder.blocks.0.mlp_w1" in names
    assert "q.mu_w" in names
    assert "decoupler.w_real_text" in names


def test_parameter_groups_are_disjoint(model):
    """The frozen text path, the phase-2 main group, discriminators and q do not overlap."""
    text = set(model.text_module_parameters())
    main = set(model.main_parameters())
    disc = set(model.discriminator_parameters())
    q = set(model.q_parameters())
    assert not (text & main) and not (main & disc) and not (main & q) and not (disc & q)
    assert "decoupler.w_real_text" in text
    assert "decoupler.w_real_text" not in model.main_parameters(include_text_path=True)
    assert "text_decoder.mask_token" in model.main_parameters(include_text_path=True)


def test_encoder_and_dense_lift_selection(model):
    """Freezing the encoder and dropping reprompt shrink the groups."""
    assert any(n.startswith("encoder.") for n in model.main_parameters())
    assert not any(n.startswith("encoder.") for n in model.main_parameters(freeze_encoder=True))
    assert "visual_decoder.dense_lift" in model.main_parameters(reprompt=True)
    assert "visual_decoder.dense_lift" not in model.main_parameters(reprompt=False)
    phase1 = model.phase1_parameters(reprompt=False)
    assert "text_decoder.dense_lift" not in phase1
    assert any(n.startswith("encoder.") for n in phase1)


def test_predict_shapes(model, batch):
    """Predictions carry per-pixel logits for both paths and the fused map."""
    with dc.no_grad():
        pred = model.predict(batch, iterations=2)
    assert pred.fused.shape == (4, 32, 32)
    assert pred.text.logits.shape == pred.visual.logits.shape == (4, 32, 32)
    assert pred.decoupled.h_text.shape == (4, 8)
    with pytest.raises(ContractError):
        model.predict(batch, iterations=-1)


def test_text_only_prediction(model, batch):
    """Real labels through the text path give no visual branch."""
    with dc.no_grad():
        pred = model.predict_text_only(batch, iterations=1)
    assert pred.visual is None
    np.testing.assert_array_equal(pred.fused.data, pred.text.logits.data)


def test_decouple_step_trains_every_group(model, batch, config):
    """One backward pass populates the main and discriminator groups and leaves q alone."""
    model.q.freeze()
    for p in model.text_module_parameters().values():
        p.requires_grad = False
    weights = loss_weights(config)
    with dc.Tape():
        result = model.decouple_step(batch, weights)
        dc.backward(result.objective)
    assert math.isfinite(result.objective.item())
    for name, p in {**model.main_parameters(), **model.discriminator_parameters()}.items():
        assert p.grad is not None, name
    assert all(p.grad is None for p in model.q_parameters().values())
    assert all(p.grad is None for p in model.text_module_parameters().values())
    SGD(list(model.main_parameters().values()), lr=0.01).step()


def test_decouple_step_breakdown(model, batch, config):
    """The objective is the supervision total plus the discriminator loss."""
    with dc.no_grad():
        result = model.decouple_step(batch, loss_weights(config))
        without = model.decouple_step(batch, loss_weights(config), reprompt=False)
    parts = result.breakdown
    assert parts["mask_reprompt"] > 0.0
    assert parts["adv"] == pytest.approx(config.adversary.lambda_adv * result.adversarial.objective)
    expected = parts["total"] + result.adversarial.discriminator_loss.item()
    assert result.objective.item() == pytest.approx(expected)
    assert without.breakdown["mask_reprompt"] == 0.0


def test_loss_weights_follow_config(config):
    """Loss weights are read from their config sections."""
    config.adversary.lambda_adv = 0.3
    config.club.lambda_club = 0.2
    config.loss.ce_variant = "squared_error"
    weights = loss_weights(config)
    assert (weights.lambda_adv, weights.lambda_club) == (0.3, 0.2)
    assert weights.ce_variant.value == "squared_error"


def test_has_decoupling_stage():
    """Only states with the visual path count as decoupled."""
    assert has_decoupling_stage(["encoder.w1", "visual_decoder.out_w"])
    assert not has_decoupling_stage(["encoder.w1", "text_decoder.out_w"])
