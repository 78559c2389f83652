"""Tests for the toy promptable segmenter."""

import numpy as np
import pytest

from dsva import diffcore as dc
from dsva.diffcore import Tensor
from dsva.errors import ContractError, ShapeError, VocabularyError
from dsva.losses import LossWeights, mask_loss
from dsva.optim import Adam
from dsva.segcore import (
    DecoderPath,
    ImageEncoder,
    MaskDecoder,
    PointLift,
    PromptSet,
    PromptTag,
    decode_mask,
    dense_from_logits,
    encode_image,
    label_embedding,
    patchify,
    pool_dense,
    pretrain_text_step,
    read_pgm,
    self_feedback_refine,
    text_to_points,
    upsample_matrix,
    write_pgm,
)
from dsva.synthdata import VOCABULARY, GenerationConfig, build_dataset, make_batch

EMBED = 8


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def images(rng):
    """Two random 16px images."""
    return rng.uniform(size=(2, 16, 16, 3))


@pytest.fixture
def encoder(rng):
    return ImageEncoder(EMBED, rng, patch_size=8)


@pytest.fixture
def decoders(rng):
    """Text and visual decoders over a 2x2 grid."""
    return (
        MaskDecoder(DecoderPath.TEXT, EMBED, 2, rng),
        MaskDecoder(DecoderPath.VISUAL, EMBED, 2, rng),
    )


def sparse(batch, count, tag, rng):
    tokens = Tensor(rng.normal(size=(batch, count, EMBED)))
    return PromptSet(sparse=tokens, tags=(tag,) * count)


def test_patchify_is_row_major(images):
    """Patch (i, j) holds the pixels of grid cell (i, j) in row-major order."""
    patches = patchify(images, 8)
    assert patches.shape == (2, 4, 192)
    np.testing.assert_array_equal(patches[1, 1], images[1, :8, 8:, :].reshape(-1))
    np.testing.assert_array_equal(patches[0, 2], images[0, 8:, :8, :].reshape(-1))


def test_patchify_rejects_bad_shapes(images):
    """Sides must divide by the patch size and images need three channels."""
    with pytest.raises(ShapeError, match="divisible"):
        patchify(images, 5)
    with pytest.raises(ShapeError):
        patchify(images[..., :2], 8)


def test_encode_image_shapes(images, encoder):
    """Batches and single images give a patch grid plus per-pixel features."""
    emb = encode_image(images, encoder, source_id=3)
    assert emb.grid.shape == (2, 4, EMBED)
    assert emb.pixels.shape == (2, 256, EMBED)
    assert (emb.grid_size, emb.image_size, emb.source_id) == (2, 16, 3)
    assert encode_image(images[0], encoder).grid.shape == (1, 4, EMBED)


def test_upsample_preserves_constants():
    """Each output pixel is a convex combination of grid cells."""
    matrix = upsample_matrix(16, 4)
    assert matrix.shape == (16, 256)
    np.testing.assert_allclose(matrix.sum(axis=0), np.ones(256), atol=1e-12)
    assert matrix.min() >= 0.0


def test_pool_dense_averages_cells():
    """Average pooling turns a half-filled image into 0/1 cells."""
    dense = np.zeros((1, 16, 16))
    dense[0, :8, :] = 1.0
    np.testing.assert_array_equal(pool_dense(dense, 2)[0, :, 0], [1.0, 1.0, 0.0, 0.0])


def test_prompt_set_validation(rng):
    """A prompt set needs content, matching tags and dense values in [0, 1]."""
    with pytest.raises(ContractError):
        PromptSet()
    with pytest.raises(ContractError):
        PromptSet(sparse=Tensor(np.zeros((1, 2, EMBED))), tags=(PromptTag.PSEUDO_POINT,))
    with pytest.raises(ContractError):
        PromptSet(dense=np.full((1, 4, 4), 1.5))
    only_dense = PromptSet(dense=np.zeros((4, 4)))
    assert only_dense.batch_size == 1
    assert only_dense.dense.shape == (1, 4, 4)


def test_decoder_rejects_other_path_tags(images, encoder, decoders, rng):
    """Visual prompts cannot enter the text decoder and vice versa."""
    text, visual = decoders
    emb = encode_image(images, encoder)
    with pytest.raises(ContractError, match="text_decoder"):
        decode_mask(emb, sparse(2, 1, PromptTag.DECOUPLED_VISUAL, rng), text)
    with pytest.raises(ContractError, match="visual_decoder"):
        decode_mask(emb, sparse(2, 1, PromptTag.PSEUDO_POINT, rng), visual)


def test_decode_mask_shapes(images, encoder, decoders, rng):
    """Logits cover every pixel; the mask token is returned per image."""
    text, _ = decoders
    emb = encode_image(images, encoder)
    out = decode_mask(emb, sparse(2, 3, PromptTag.PSEUDO_POINT, rng), text)
    assert out.logits.shape == (2, 16, 16)
    assert out.mask_token.shape == (2, EMBED)
    assert out.path is DecoderPath.TEXT
    probs = out.probabilities()
    assert probs.min() > 0.0 and probs.max() < 1.0


def test_decode_mask_checks_batch_and_dense(images, encoder, decoders, rng):
    """Prompt batch and dense size must match the images."""
    text, _ = decoders
    emb = encode_image(images, encoder)
    with pytest.raises(ShapeError):
        decode_mask(emb, sparse(3, 1, PromptTag.PSEUDO_POINT, rng), text)
    prompts = sparse(2, 1, PromptTag.PSEUDO_POINT, rng).with_dense(np.zeros((2, 8, 8)))
    with pytest.raises(ShapeError, match="dense"):
        decode_mask(emb, prompts, text)


def test_zero_output_head_gives_half_probability(images, encoder, decoders, rng):
    """A zeroed output head yields logit 0 everywhere."""
    _, visual = decoders
    visual.zero_output_head()
    emb = encode_image(images, encoder)
    out = decode_mask(emb, sparse(2, 1, PromptTag.DECOUPLED_VISUAL, rng), visual)
    np.testing.assert_array_equal(out.logits.data, np.zeros((2, 16, 16)))
    np.testing.assert_array_equal(out.probabilities(), np.full((2, 16, 16), 0.5))


def test_dense_prompt_changes_output(images, encoder, decoders, rng):
    """A dense prompt shifts the logits once its lift is non-zero."""
    text, _ = decoders
    emb = encode_image(images, encoder)
    prompts = sparse(2, 1, PromptTag.PSEUDO_POINT, rng)
    text.dense_lift.data = np.ones((1, EMBED))
    plain = decode_mask(emb, prompts, text).logits.data
    dense = np.zeros((2, 16, 16))
    dense[:, :8, :8] = 1.0
    prompted = decode_mask(emb, prompts.with_dense(dense), text).logits.data
    assert not np.allclose(plain, prompted)


def test_dense_from_logits():
    """Sigmoid of the logits, optionally thresholded at 0.5."""
    logits = Tensor(np.array([-2.0, 0.0, 3.0]))
    np.testing.assert_allclose(dense_from_logits(logits), 1.0 / (1.0 + np.exp([2.0, 0.0, -3.0])))
    np.testing.assert_array_equal(dense_from_logits(logits, hard=True), [0.0, 0.0, 1.0])


def test_refine_zero_iterations_is_plain_decode(images, encoder, decoders, rng):
    """T = 0 decodes once and ignores any dense prompt."""
    text, _ = decoders
    text.dense_lift.data = np.ones((1, EMBED))
    emb = encode_image(images, encoder)
    prompts = sparse(2, 2, PromptTag.PSEUDO_POINT, rng)
    plain = decode_mask(emb, prompts, text).logits.data
    dense = prompts.with_dense(np.ones((2, 16, 16)))
    np.testing.assert_array_equal(self_feedback_refine(emb, dense, text, 0).logits.data, plain)


def test_refine_feeds_back_previous_mask(images, encoder, decoders, rng):
    """One refinement equals decoding with the first mask as dense prompt."""
    text, _ = decoders
    text.dense_lift.data = np.ones((1, EMBED))
    emb = encode_image(images, encoder)
    prompts = sparse(2, 2, PromptTag.PSEUDO_POINT, rng)
    first = decode_mask(emb, prompts, text)
    for hard in (False, True):
        manual = decode_mask(emb, prompts.with_dense(dense_from_logits(first.logits, hard)), text)
        refined = self_feedback_refine(emb, prompts, text, iterations=1, hard=hard)
        np.testing.assert_allclose(refined.logits.data, manual.logits.data, atol=1e-12)
    with pytest.raises(ContractError):
        self_feedback_refine(emb, prompts, text, iterations=-1)


def test_point_lift_identity():
    """The identity lift repeats the feature as every point."""
    lift = PointLift.identity(4, 3)
    h = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    out = lift(h).data
    assert out.shape == (1, 3, 4)
    for point in range(3):
        np.testing.assert_array_equal(out[0, point], h.data[0])
    with pytest.raises(ShapeError):
        lift(Tensor(np.zeros((1, 5))))


def test_text_to_points(rng):
    """Labels become P pseudo-point prompts through the mean token embedding."""
    table = rng.normal(size=(len(VOCABULARY), 4))
    lift = PointLift.identity(4, 2)
    single = text_to_points(["the", "red", "circle"], table, lift)
    assert single.sparse.shape == (1, 2, 4)
    assert single.tags == (PromptTag.PSEUDO_POINT, PromptTag.PSEUDO_POINT)
    np.testing.assert_allclose(
        single.sparse.data[0, 0], label_embedding(["the", "red", "circle"], table)
    )
    batch = text_to_points([["the", "circle"], ["the", "blue", "square"]], table, lift)
    assert batch.sparse.shape == (2, 2, 4)
    with pytest.raises(VocabularyError):
        text_to_points(["the", "hexagon"], table, lift)


def test_text_to_points_applies_projection(rng):
    """The optional projection runs before the lift."""
    table = rng.normal(size=(len(VOCABULARY), 4))
    lift = PointLift.identity(4, 1)
    doubled = text_to_points(["the", "square"], table, lift, project=lambda x: x * 2.0)
    plain = text_to_points(["the", "square"], table, lift)
    np.testing.assert_allclose(doubled.sparse.data, 2.0 * plain.sparse.data)


@pytest.mark.parametrize("reprompt", [True, False])
def test_pretrain_text_step_reduces_loss(reprompt):
    """Repeated steps on one batch lower the text-path loss."""
    rng = np.random.default_rng(1)
    data = build_dataset(2, 4, GenerationConfig(image_size=32), latent_dim=4)
    batch = make_batch(data, [0, 1, 2, 3])
    encoder = ImageEncoder(EMBED, rng, patch_size=8)
    lift = PointLift(4, EMBED, 2, rng)
    decoder = MaskDecoder(DecoderPath.TEXT, EMBED, 4, rng)
    table = rng.normal(size=(len(VOCABULARY), 4))
    params = encoder.parameters() + lift.parameters() + [
        p for name, p in decoder.named_parameters().items() if reprompt or name != "dense_lift"
    ]
    opt = Adam(params, lr=0.01)
    losses = [
        pretrain_text_step(
            batch, encoder, lambda x: x, lift, decoder, table, opt, reprompt=reprompt
        ).loss
        for _ in range(40)
    ]
    assert losses[-1] < losses[0]



def test_pretrain_text_step_reports_first_pass_loss():
    """The step loss is CE + Dice of the first pass; the reprompt pass is reported apart."""
    rng = np.random.default_rng(3)
    data = build_dataset(2, 2, GenerationConfig(image_size=32), latent_dim=4)
    batch = make_batch(data, [0, 1])
    encoder = ImageEncoder(EMBED, rng, patch_size=8)
    lift = PointLift(4, EMBED, 2, rng)
    decoder = MaskDecoder(DecoderPath.TEXT, EMBED, 4, rng)
    decoder.dense_lift.data = rng.normal(size=decoder.dense_lift.shape)
    table = rng.normal(size=(len(VOCABULARY), 4))
    with dc.no_grad():
        img_emb = encode_image(batch.images, encoder)
        prompts = text_to_points(batch.tokens, table, lift)
        first = decode_mask(img_emb, prompts, decoder)
        expected = mask_loss(first.logits, batch.label_masks, LossWeights()).item()
        dense = dense_from_logits(first.logits)
        second = decode_mask(img_emb, prompts.with_dense(dense), decoder)
        again = mask_loss(second.logits, batch.label_masks, LossWeights()).item()
    opt = Adam(encoder.parameters() + lift.parameters() + decoder.parameters(), lr=0.01)
    result = pretrain_text_step(batch, encoder, lambda x: x, lift, decoder, table, opt)
    assert result.loss == pytest.approx(expected)
    assert result.mask_reprompt == pytest.approx(again)
    assert result.mask_reprompt != pytest.approx(result.loss)


def test_pgm_write_then_read(tmp_path):
    """Probability maps are stored as 8-bit grey levels."""
    probs = np.array([[0.0, 0.5], [1.0, 0.25]])
    path = write_pgm(tmp_path / "masks" / "scene.pgm", probs)
    assert path.read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(read_pgm(path), [[0, 128], [255, 64]])
    with pytest.raises(ShapeError):
        write_pgm(tmp_path / "bad.pgm", np.zeros(3))
