"""
Toy promptable segmenter: patch encoder, prompt set, two-block attention mask decoder,
text-to-point prompts and self-feedback dense reprompting.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Module, Parameter, Tensor, xavier_uniform
from .errors import ContractError, ShapeError
from .losses import LossWeights, mask_loss
from .optim import Optimizer
from .synthdata import SceneBatch, encode_label

logger = logging.getLogger(__name__)

ImageLike = Union[np.ndarray, Tensor]


class PromptTag(str, Enum):
    DECOUPLED_TEXT = "decoupled_text"
    DECOUPLED_VISUAL = "decoupled_visual"
    PSEUDO_POINT = "pseudo_point"


class DecoderPath(str, Enum):
    TEXT = "text_decoder"
    VISUAL = "visual_decoder"


ALLOWED_TAGS = {
    DecoderPath.TEXT: {PromptTag.PSEUDO_POINT, PromptTag.DECOUPLED_TEXT},
    DecoderPath.VISUAL: {PromptTag.DECOUPLED_VISUAL},
}


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """
    Split (B, S, S, 3) images into (B, G*G, 3*p*p) patch rows, row-major over the grid.

    Raises:
        ShapeError: If the sides are not divisible by the patch size
    """
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeError(f"expected (B, H, W, 3) images, got {images.shape}")
    batch, height, width, _ = images.shape
    if height % patch_size or width % patch_size:
        raise ShapeError(f"image {height}x{width} is not divisible by patch size {patch_size}")
    gh, gw = height // patch_size, width // patch_size
    patches = images.reshape(batch, gh, patch_size, gw, patch_size, 3).transpose(0, 1, 3, 2, 4, 5)
    return patches.reshape(batch, gh * gw, patch_size * patch_size * 3)


@dataclass
class ImageEmbedding:
    """Patch grid (B, G*G, E) plus per-pixel skip features (B, S*S, E)."""
    grid: Tensor
    pixels: Tensor
    grid_size: int
    image_size: int
    source_id: Optional[int] = None


class ImageEncoder(Module):
    """patchify -> linear -> LeakyReLU -> linear, with a per-pixel color lift as a skip."""

    def __init__(
        self,
        embed_dim: int,
        rng: np.random.Generator,
        patch_size: int = 8,
        slope: float = dc.DEFAULT_LEAKY_SLOPE,
    ):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.slope = slope
        patch_dim = 3 * patch_size * patch_size
        self.w1 = Parameter(xavier_uniform(rng, patch_dim, embed_dim))
        self.b1 = Parameter(np.zeros(embed_dim))
        self.w2 = Parameter(xavier_uniform(rng, embed_dim, embed_dim))
        self.b2 = Parameter(np.zeros(embed_dim))
        self.pixel_w = Parameter(xavier_uniform(rng, 3, embed_dim))
        self.pixel_b = Parameter(np.zeros(embed_dim))


def _image_array(image: ImageLike) -> np.ndarray:
    array = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if array.ndim == 3:
        array = array[None]
    return array.astype(np.float64)


def encode_image(
    image: ImageLike, encoder: ImageEncoder, source_id: Optional[int] = None
) -> ImageEmbedding:
    """
    Embed one (S, S, 3) image or a (B, S, S, 3) batch.

    Raises:
        ShapeError: If the sides are not divisible by the patch size
    """
    array = _image_array(image)
    patches = Tensor(patchify(array, encoder.patch_size), copy=False)
    hidden = dc.leaky_relu(patches @ encoder.w1 + encoder.b1, encoder.slope)
    grid = hidden @ encoder.w2 + encoder.b2
    batch, size = array.shape[0], array.shape[1]
    rgb = Tensor(array.reshape(batch, size * size, 3), copy=False)
    pixels = dc.leaky_relu(rgb @ encoder.pixel_w + encoder.pixel_b, encoder.slope)
    return ImageEmbedding(
        grid=grid,
        pixels=pixels,
        grid_size=size // encoder.patch_size,
        image_size=size,
        source_id=source_id,
    )


class PointLift(Module):
    """Affine map from an H-dim feature to P prompt tokens of width E."""

    def __init__(
        self, in_dim: int, embed_dim: int, points: int, rng: Optional[np.random.Generator] = None
    ):
        self.in_dim = in_dim
        self.embed_dim = embed_dim
        self.points = points
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(xavier_uniform(rng, in_dim, points * embed_dim))
        self.bias = Parameter(np.zeros(points * embed_dim))

    @classmethod
    def identity(cls, dim: int, points: int) -> "PointLift":
        lift = cls(dim, dim, points)
        lift.weight.data = np.tile(np.eye(dim), (1, points))
        return lift

    def __call__(self, h: Tensor) -> Tensor:
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"PointLift expects (B, {self.in_dim}), got {h.shape}")
        return (h @ self.weight + self.bias).reshape(h.shape[0], self.points, self.embed_dim)


@dataclass
class PromptSet:
    """Sparse prompt tokens (B, n, E) with one tag each, and an optional dense (B, S, S) mask."""
    sparse: Optional[Tensor] = None
    tags: Tuple[PromptTag, ...] = ()
    dense: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.tags = tuple(PromptTag(t) for t in self.tags)
        count = 0 if self.sparse is None else self.sparse.shape[1]
        if count == 0 and self.dense is None:
            raise ContractError("prompt set needs at least one sparse token or a dense prompt")
        if self.sparse is not None and (self.sparse.ndim != 3 or len(self.tags) != count):
            raise ContractError(
                f"sparse prompts {self.sparse.shape} need (B, n, E) and n tags, "
                f"got {len(self.tags)} tags"
            )
        if self.dense is not None:
            dense = np.asarray(self.dense, dtype=np.float64)
            if dense.ndim == 2:
                dense = dense[None]
            if dense.min(initial=0.0) < 0.0 or dense.max(initial=0.0) > 1.0:
                raise ContractError("dense prompt values must lie in [0, 1]")
            self.dense = dense

    @property
    def batch_size(self) -> int:
        if self.sparse is not None:
            return self.sparse.shape[0]
        assert self.dense is not None
        return self.dense.shape[0]

    def with_dense(self, dense: Optional[np.ndarray]) -> "PromptSet":
        return replace(self, dense=dense)


def label_embedding(tokens: Sequence[str], table: np.ndarray) -> np.ndarray:
    """Mean of the table rows of a label's tokens."""
    ids = encode_label(tokens)
    if not ids:
        raise ContractError("label has no tokens")
    return table[ids].mean(axis=0)


def text_to_points(
    tokens: Union[Sequence[str], Sequence[Sequence[str]]],
    table: np.ndarray,
    lift: PointLift,
    project: Optional[Callable[[Tensor], Tensor]] = None,
) -> PromptSet:
    """
    Convert label(s) into P pseudo-point prompts.

    Args:
        tokens: One label (list of tokens) or a batch of labels
        table: (V, D) token embedding table
        lift: H -> P*E lift
        project: Optional map applied to the mean embedding before lifting

    Returns:
        PromptSet with (B, P, E) sparse tokens tagged pseudo_point

    Raises:
        VocabularyError: On an out-of-vocabulary token
    """
    labels = [tokens] if tokens and isinstance(tokens[0], str) else tokens
    means = Tensor(np.stack([label_embedding(label, table) for label in labels]), copy=False)
    features = project(means) if project is not None else means
    points = lift(features)
    return PromptSet(sparse=points, tags=(PromptTag.PSEUDO_POINT,) * lift.points)


@lru_cache(maxsize=16)
def _interp_1d(size: int, grid: int) -> np.ndarray:
    matrix = np.zeros((size, grid))
    centers = (np.arange(size) + 0.5) * grid / size - 0.5
    centers = np.clip(centers, 0.0, grid - 1)
    low = np.floor(centers).astype(int)
    high = np.minimum(low + 1, grid - 1)
    frac = centers - low
    matrix[np.arange(size), low] += 1.0 - frac
    matrix[np.arange(size), high] += frac
    return matrix


@lru_cache(maxsize=16)
def upsample_matrix(size: int, grid: int) -> np.ndarray:
    """(G*G, S*S) bilinear upsampling operator for row-major flattened maps."""
    axis = _interp_1d(size, grid)
    return np.kron(axis, axis).T.copy()


def pool_dense(dense: np.ndarray, grid: int) -> np.ndarray:
    """Average-pool (B, S, S) to (B, G*G, 1)."""
    batch, size, _ = dense.shape
    cell = size // grid
    pooled = dense.reshape(batch, grid, cell, grid, cell).mean(axis=(2, 4))
    return pooled.reshape(batch, grid * grid, 1)


def _heads(x: Tensor, heads: int) -> Tensor:
    batch, count, width = x.shape
    return x.reshape(batch, count, heads, width // heads).transpose(0, 2, 1, 3)


def _merge(x: Tensor) -> Tensor:
    batch, heads, count, width = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, count, heads * width)


class _Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ContractError(f"embed dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim // heads)
        self.w_q = Parameter(xavier_uniform(rng, dim, dim))
        self.w_k = Parameter(xavier_uniform(rng, dim, dim))
        self.w_v = Parameter(xavier_uniform(rng, dim, dim))
        self.w_o = Parameter(xavier_uniform(rng, dim, dim))

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        q = _heads(queries @ self.w_q, self.heads)
        k = _heads(keys @ self.w_k, self.heads)
        v = _heads(values @ self.w_v, self.heads)
        weights = dc.softmax((q @ k.transpose(0, 1, 3, 2)) * self.scale, axis=-1)
        return _merge(weights @ v) @ self.w_o


class _DecoderBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, slope: float):
        self.slope = slope
        self.self_attn = _Attention(dim, heads, rng)
        self.cross_attn = _Attention(dim, heads, rng)
        self.mlp_w1 = Parameter(xavier_uniform(rng, dim, 2 * dim))
        self.mlp_b1 = Parameter(np.zeros(2 * dim))
        self.mlp_w2 = Parameter(xavier_uniform(rng, 2 * dim, dim))
        self.mlp_b2 = Parameter(np.zeros(dim))

    def __call__(self, tokens: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        tokens = tokens + self.self_attn(tokens, tokens, tokens)
        tokens = tokens + self.cross_attn(tokens, keys, values)
        hidden = dc.leaky_relu(tokens @ self.mlp_w1 + self.mlp_b1, self.slope)
        return tokens + (hidden @ self.mlp_w2 + self.mlp_b2)


class MaskDecoder(Module):
    """
    One decoder path. A learned mask token attends, with the sparse prompts, over the
    image grid; its output query is dotted with the position-tagged grid (upsampled
    bilinearly) and with the per-pixel skip features.
    """

    def __init__(
        self,
        path: Union[DecoderPath, str],
        embed_dim: int,
        grid_size: int,
        rng: np.random.Generator,
        blocks: int = 2,
        heads: int = 2,
        slope: float = dc.DEFAULT_LEAKY_SLOPE,
    ):
        self.path = DecoderPath(path)
        self.embed_dim = embed_dim
        self.grid_size = grid_size
        self.mask_token = Parameter(rng.normal(0.0, 0.1, size=(1, 1, embed_dim)))
        self.pos_embed = Parameter(rng.normal(0.0, 0.1, size=(grid_size * grid_size, embed_dim)))
        self.dense_lift = Parameter(np.zeros((1, embed_dim)))
        self.blocks = [_DecoderBlock(embed_dim, heads, rng, slope) for _ in range(blocks)]
        self.out_w = Parameter(xavier_uniform(rng, embed_dim, embed_dim))
        self.out_b = Parameter(np.zeros(embed_dim))

    def zero_output_head(self) -> None:
        self.out_w.data = np.zeros_like(self.out_w.data)
        self.out_b.data = np.zeros_like(self.out_b.data)


@dataclass
class MaskLogits:
    logits: Tensor
    path: DecoderPath
    mask_token: Tensor

    def probabilities(self) -> np.ndarray:
        return dense_from_logits(self.logits)


def decode_mask(img_emb: ImageEmbedding, prompts: PromptSet, decoder: MaskDecoder) -> MaskLogits:
    """
    Decode per-pixel logits for one path.

    Args:
        img_emb: Image embedding (B images)
        prompts: Prompt set with tags valid for the decoder's path
        decoder: Path parameters

    Returns:
        MaskLogits with (B, S, S) logits and the final (B, E) mask token

    Raises:
        ContractError: If a prompt tag does not belong to the decoder's path
        ShapeError: On batch or width mismatch
    """
    bad = [t.value for t in prompts.tags if t not in ALLOWED_TAGS[decoder.path]]
    if bad:
        raise ContractError(f"{decoder.path.value} does not accept prompt tags {bad}")
    batch, cells, width = img_emb.grid.shape
    if prompts.batch_size != batch:
        raise ShapeError(f"prompt batch {prompts.batch_size} != image batch {batch}")
    if width != decoder.embed_dim or img_emb.grid_size != decoder.grid_size:
        raise ShapeError(
            f"decoder expects grid {decoder.grid_size} and width {decoder.embed_dim}, "
            f"got {img_emb.grid_size} and {width}"
        )

    grid = img_emb.grid
    if prompts.dense is not None:
        if prompts.dense.shape != (batch, img_emb.image_size, img_emb.image_size):
            raise ShapeError(f"dense prompt shape {prompts.dense.shape} does not match images")
        pooled = Tensor(pool_dense(prompts.dense, img_emb.grid_size), copy=False)
        grid = grid + pooled @ decoder.dense_lift
    keys = grid + decoder.pos_embed

    mask = dc.broadcast_to(decoder.mask_token, (batch, 1, width))
    tokens = mask if prompts.sparse is None else dc.concat([mask, prompts.sparse], axis=1)
    for block in decoder.blocks:
        tokens = block(tokens, keys, grid)

    token = tokens[:, 0, :]
    query = (token @ decoder.out_w + decoder.out_b).reshape(batch, width, 1)
    coarse = (keys @ query).reshape(batch, cells)
    size = img_emb.image_size
    fine = (img_emb.pixels @ query).reshape(batch, size * size)
    logits = coarse @ upsample_matrix(size, img_emb.grid_size) + fine
    return MaskLogits(logits=logits.reshape(batch, size, size), path=decoder.path, mask_token=token)


def dense_from_logits(logits: Tensor, hard: bool = False) -> np.ndarray:
    """Detached sigmoid of logits, optionally thresholded at 0.5."""
    x = logits.data
    prob = np.exp(-np.logaddexp(0.0, -x))
    return (prob > 0.5).astype(np.float64) if hard else prob


def self_feedback_refine(
    img_emb: ImageEmbedding,
    prompts: PromptSet,
    decoder: MaskDecoder,
    iterations: int = 1,
    hard: bool = False,
) -> MaskLogits:
    """
    Decode, then re-decode T times with the previous mask as the dense prompt.

    Sparse prompts stay fixed; the first pass ignores any dense prompt in prompts.

    Args:
        img_emb: Image embedding
        prompts: Sparse prompts
        decoder: Decoder path
        iterations: T >= 0
        hard: Threshold the fed-back mask at 0.5

    Returns:
        Logits after T refinements
    """
    if iterations < 0:
        raise ContractError(f"iterations must be >= 0, got {iterations}")
    current = decode_mask(img_emb, prompts.with_dense(None), decoder)
    for _ in range(iterations):
        dense = dense_from_logits(current.logits, hard)
        current = decode_mask(img_emb, prompts.with_dense(dense), decoder)
    return current


class TextStepLoss(NamedTuple):
    """Loss values of one text pre-training step, taken before the update."""

    loss: float
    mask_reprompt: float


def pretrain_text_step(
    batch: SceneBatch,
    encoder: ImageEncoder,
    project: Callable[[Tensor], Tensor],
    lift: PointLift,
    decoder: MaskDecoder,
    table: np.ndarray,
    optimizer: Optimizer,
    weights: Optional[LossWeights] = None,
    reprompt: bool = True,
) -> TextStepLoss:
    """
    One text-understanding step: real labels -> pseudo points -> text decoder,
    supervised by CE + Dice against label_mask.

    With reprompt a second pass feeds the detached first mask back as a dense prompt and
    its CE + Dice is added to the optimized objective.

    Returns:
        The first-pass CE + Dice against label_mask and the reprompt term (0 without
        reprompt)
    """
    weights = weights or LossWeights()
    with dc.Tape():
        img_emb = encode_image(batch.images, encoder)
        prompts = text_to_points(batch.tokens, table, lift, project)
        first = decode_mask(img_emb, prompts, decoder)
        loss = mask_loss(first.logits, batch.label_masks, weights)
        objective, extra = loss, 0.0
        if reprompt:
            dense = dense_from_logits(first.logits)
            second = decode_mask(img_emb, prompts.with_dense(dense), decoder)
            again = mask_loss(second.logits, batch.label_masks, weights)
            objective, extra = loss + again, again.item()
        dc.backward(objective)
    optimizer.step()
    return TextStepLoss(loss=loss.item(), mask_reprompt=extra)


def write_pgm(path: Union[str, Path], probabilities: np.ndarray) -> Path:
    """Write an (H, W) probability map as binary PGM (P5, maxval 255)."""
    array = np.asarray(probabilities, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D map, got {array.shape}")
    pixels = np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return path


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read a P5 PGM written by write_pgm back into uint8 pixels."""
    with open(path, "rb") as f:
        payload = f.read()
    header: List[bytes] = payload.split(b"\n", 3)
    if len(header) < 4 or header[0] != b"P5":
        raise ShapeError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in header[1].split())
    return np.frombuffer(header[3], dtype=np.uint8).reshape(height, width).copy()
