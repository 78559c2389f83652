"""Synthetic referring-segmentation scenes and fused hidden states with a known factorization."""

import itertools
import logging
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, GenerationError, ShapeError, VocabularyError

logger = logging.getLogger(__name__)

MOTIONS = ("static", "fast")
SIZES = ("small", "large")
COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white")
SHAPES = ("circle", "square", "triangle")

VOCABULARY: Tuple[str, ...] = ("<pad>", "the") + MOTIONS + SIZES + COLORS + SHAPES
TOKEN_IDS: Dict[str, int] = {token: i for i, token in enumerate(VOCABULARY)}

COLOR_RGB: Dict[str, Tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "white": (1.0, 1.0, 1.0),
}

RADIUS_RANGE = {"small": (0.08, 0.11), "large": (0.16, 0.22)}
STREAK_OFFSET = 3
STREAK_ALPHAS = (0.5, 0.3, 0.15)
POOL_GRID = 4
CALIBRATION_SCENES = 256
MAX_CONDITION = 100.0


def encode_label(tokens: Sequence[str]) -> List[int]:
    """
    Map tokens to vocabulary ids.

    Raises:
        VocabularyError: If a token is not in the vocabulary
    """
    ids = []
    for token in tokens:
        if token not in TOKEN_IDS:
            raise VocabularyError(f"token {token!r} is not in the vocabulary")
        ids.append(TOKEN_IDS[token])
    return ids


def decode_label(ids: Sequence[int]) -> List[str]:
    tokens = []
    for i in ids:
        if not 0 <= int(i) < len(VOCABULARY):
            raise VocabularyError(f"token id {i} is outside the vocabulary")
        tokens.append(VOCABULARY[int(i)])
    return tokens


@dataclass(frozen=True)
class GenerationConfig:
    """Scene generation settings."""
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_target_pixels: int = 16
    max_retries: int = 64

    def __post_init__(self) -> None:
        if self.image_size < 32 or self.image_size % POOL_GRID:
            raise ContractError(
                f"image_size must be >= 32 and divisible by {POOL_GRID}, got {self.image_size}"
            )
        if not 1 <= self.min_objects <= self.max_objects <= 4:
            raise ContractError(
                f"object counts must satisfy 1 <= min <= max <= 4, "
                f"got {self.min_objects}..{self.max_objects}"
            )
        if self.min_target_pixels < 1 or self.max_retries < 1:
            raise ContractError("min_target_pixels and max_retries must be positive")


@dataclass(frozen=True)
class SceneObject:
    """One drawn object; attributes plus float32-exact geometry."""
    kind: str
    color: str
    size: str
    motion: str
    cx: float
    cy: float
    radius: float

    def attribute(self, name: str) -> str:
        values = {"motion": self.motion, "size": self.size, "color": self.color, "shape": self.kind}
        return values[name]


@dataclass(eq=False)
class Scene:
    """A rendered scene with per-object masks and an unambiguous referring label."""
    image: np.ndarray
    objects: List[SceneObject]
    gt_masks: np.ndarray
    label_tokens: List[str]
    label_mask: np.ndarray
    target_index: int
    seed: int

    @property
    def gt_mask(self) -> np.ndarray:
        return self.gt_masks[self.target_index]

    @property
    def image_size(self) -> int:
        return int(self.image.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.target_index == other.target_index
            and self.objects == other.objects
            and self.label_tokens == other.label_tokens
            and _same_array(self.image, other.image)
            and _same_array(self.gt_masks, other.gt_masks)
            and _same_array(self.label_mask, other.label_mask)
        )


@dataclass(eq=False)
class FusedHiddenState:
    """Stand-in for a multimodal model's [SEG] hidden state."""
    x_fused: np.ndarray
    e_text: np.ndarray
    e_vis: np.ndarray
    mixing_id: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FusedHiddenState):
            return NotImplemented
        return (
            self.mixing_id == other.mixing_id
            and _same_array(self.x_fused, other.x_fused)
            and _same_array(self.e_text, other.e_text)
            and _same_array(self.e_vis, other.e_vis)
        )


def _same_array(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


# --- rendering --------------------------------------------------------------


def _pixel_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def shape_mask(obj: SceneObject, size: int, shift_x: float = 0.0) -> np.ndarray:
    """Boolean footprint of an object on a size×size canvas."""
    yy, xx = _pixel_grid(size)
    cx, cy, r = obj.cx + shift_x, obj.cy, obj.radius
    if obj.kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if obj.kind == "square":
        half = 0.85 * r
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # triangle, apex up
    depth = yy - (cy - r)
    return (depth >= 0) & (depth <= 1.5 * r) & (np.abs(xx - cx) <= depth / np.sqrt(3.0))


def _sample_object(rng: np.random.Generator, size: int) -> SceneObject:
    kind = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))]
    size_class = SIZES[rng.integers(len(SIZES))]
    motion = MOTIONS[rng.integers(len(MOTIONS))]
    low, high = RADIUS_RANGE[size_class]
    radius = rng.uniform(low, high) * size
    cx, cy = rng.uniform(radius, size - radius, size=2)
    return SceneObject(
        kind=kind,
        color=color,
        size=size_class,
        motion=motion,
        cx=float(np.float32(cx)),
        cy=float(np.float32(cy)),
        radius=float(np.float32(radius)),
    )


def render(objects: Sequence[SceneObject], size: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Paint objects back to front on a black canvas.

    Fast objects leave a fading streak to their left on background pixels only.

    Returns:
        (image float32 (size, size, 3), visible masks uint8 (n, size, size))
    """
    owner = np.full((size, size), -1, dtype=np.int64)
    for index, obj in enumerate(objects):
        owner[shape_mask(obj, size)] = index

    image = np.zeros((size, size, 3), dtype=np.float64)
    for index, obj in enumerate(objects):
        image[owner == index] = COLOR_RGB[obj.color]

    background = owner < 0
    for obj in objects:
        if obj.motion != "fast":
            continue
        rgb = np.asarray(COLOR_RGB[obj.color])
        for step, alpha in enumerate(STREAK_ALPHAS, start=1):
            trail = shape_mask(obj, size, shift_x=-STREAK_OFFSET * step) & background
            image[trail] = np.maximum(image[trail], alpha * rgb)

    masks = np.stack([(owner == i) for i in range(len(objects))]).astype(np.uint8)
    return np.clip(image, 0.0, 1.0).astype(np.float32), masks


def referring_attributes(objects: Sequence[SceneObject], target: int) -> Optional[List[str]]:
    """
    Shortest attribute conjunction (shape always included) matching only the target.

    Returns:
        Attribute names in label order, or None when the target is indistinguishable
    """
    optional = ("motion", "size", "color")
    goal = objects[target]
    for count in range(len(optional) + 1):
        for subset in itertools.combinations(optional, count):
            names = list(subset) + ["shape"]
            matches = [
                i
                for i, obj in enumerate(objects)
                if all(obj.attribute(n) == goal.attribute(n) for n in names)
            ]
            if matches == [target]:
                return names
    return None


def generate_scene(seed: int, spec: Optional[GenerationConfig] = None) -> Scene:
    """
    Generate one scene as a pure function of (seed, spec).

    Args:
        seed: Non-negative integer seed
        spec: Generation settings (defaults when None)

    Returns:
        Scene whose referring label matches exactly one object

    Raises:
        GenerationError: If no valid scene is found within spec.max_retries attempts
    """
    spec = spec or GenerationConfig()
    rng = np.random.default_rng(seed)
    size = spec.image_size
    for _ in range(spec.max_retries):
        count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        objects = [_sample_object(rng, size) for _ in range(count)]
        target = int(rng.integers(count))
        image, masks = render(objects, size)
        if np.any(masks.reshape(count, -1).sum(axis=1) < 1):
            continue
        if int(masks[target].sum()) < spec.min_target_pixels:
            continue
        names = referring_attributes(objects, target)
        if names is None:
            continue
        tokens = ["the"] + [objects[target].attribute(n) for n in names]
        return Scene(
            image=image,
            objects=objects,
            gt_masks=masks,
            label_tokens=tokens,
            label_mask=masks[target].copy(),
            target_index=target,
            seed=int(seed),
        )
    raise GenerationError(
        f"no valid scene for seed {seed} after {spec.max_retries} attempts "
        f"(image_size={size}, min_target_pixels={spec.min_target_pixels})"
    )


# --- latent factors ---------------------------------------------------------


def token_vector(mixing_seed: int, token: str, latent_dim: int) -> np.ndarray:
    """Hash-seeded Gaussian embedding of one token."""
    if token not in TOKEN_IDS:
        raise VocabularyError(f"token {token!r} is not in the vocabulary")
    key = zlib.crc32(f"{mixing_seed}:{token}".encode("utf-8"))
    return np.random.default_rng(key).standard_normal(latent_dim)


def pooled_colors(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """4×4 grid of mean colors of the masked image, flattened to 48 values."""
    size = image.shape[0]
    cell = size // POOL_GRID
    masked = image.astype(np.float64) * mask[..., None]
    return masked.reshape(POOL_GRID, cell, POOL_GRID, cell, 3).mean(axis=(1, 3)).reshape(-1)


@dataclass
class MixingModel:
    """Fixed generative map from (e_text, e_vis) to the fused state."""
    mixing_seed: int
    latent_dim: int
    token_table: np.ndarray
    vis_projection: np.ndarray
    vis_mean: np.ndarray
    vis_std: np.ndarray
    w_mix: np.ndarray
    condition: float = field(default=0.0)

    @property
    def mixing_id(self) -> int:
        return self.mixing_seed & 0xFFFFFFFF

    def e_text(self, tokens: Sequence[str]) -> np.ndarray:
        ids = encode_label(tokens)
        return self.token_table[ids].mean(axis=0)

    def e_vis(self, scene: Scene) -> np.ndarray:
        raw = pooled_colors(scene.image, scene.label_mask) @ self.vis_projection
        return (raw - self.vis_mean) / self.vis_std

    def mix(self, e_text: np.ndarray, e_vis: np.ndarray) -> np.ndarray:
        return np.concatenate([e_text, e_vis], axis=-1) @ self.w_mix.T


def _mixing_matrix(rng: np.random.Generator, dim: int) -> Tuple[np.ndarray, float]:
    while True:
        q1, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        q2, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        scales = np.exp(rng.uniform(np.log(0.3), np.log(3.0), size=dim))
        w = (q1 * scales) @ q2
        condition = float(np.linalg.cond(w))
        if condition <= MAX_CONDITION:
            return w, condition
        logger.debug("mixing matrix condition %.1f rejected", condition)


@lru_cache(maxsize=8)
def get_mixing_model(mixing_seed: int, latent_dim: int = 64, image_size: int = 64) -> MixingModel:
    """
    Build (once per arguments) the mixing model of a dataset.

    Args:
        mixing_seed: Seed of the token table, projection and W_mix
        latent_dim: D, dimension of each factor
        image_size: Side of calibration scenes

    Returns:
        MixingModel with a full-rank W_mix of condition number <= 100
    """
    if latent_dim < 1:
        raise ContractError(f"latent_dim must be positive, got {latent_dim}")
    root = np.random.SeedSequence(mixing_seed)
    proj_rng, mix_rng, calib_rng = (np.random.default_rng(s) for s in root.spawn(3))
    table = np.stack([token_vector(mixing_seed, t, latent_dim) for t in VOCABULARY])
    projection = proj_rng.standard_normal((POOL_GRID * POOL_GRID * 3, latent_dim))

    spec = GenerationConfig(image_size=image_size)
    calib_seeds = calib_rng.integers(0, 2**62, size=CALIBRATION_SCENES)
    raw = np.stack(
        [
            pooled_colors(s.image, s.label_mask) @ projection
            for s in (generate_scene(int(seed), spec) for seed in calib_seeds)
        ]
    )
    std = raw.std(axis=0)
    std[std < 1e-8] = 1.0
    w_mix, condition = _mixing_matrix(mix_rng, 2 * latent_dim)
    logger.debug("mixing model %d: D=%d cond=%.2f", mixing_seed, latent_dim, condition)
    return MixingModel(
        mixing_seed=mixing_seed,
        latent_dim=latent_dim,
        token_table=table,
        vis_projection=projection,
        vis_mean=raw.mean(axis=0),
        vis_std=std,
        w_mix=w_mix,
        condition=condition,
    )


def synthesize_hidden_state(
    scene: Scene,
    seed: int,
    sigma_noise: float,
    mixing: Optional[MixingModel] = None,
) -> FusedHiddenState:
    """
    Build the fused state x = W_mix [e_text; e_vis] + noise for a scene.

    Each noise coordinate is resampled until |noise_i| <= 3 sigma.

    Args:
        scene: Source scene
        seed: Noise seed
        sigma_noise: Noise standard deviation (>= 0)
        mixing: Mixing model (default: seed 0, D=64, the scene's image size)

    Returns:
        FusedHiddenState with float32 vectors
    """
    if sigma_noise < 0:
        raise ContractError(f"sigma_noise must be >= 0, got {sigma_noise}")
    mixing = mixing or get_mixing_model(0, 64, scene.image_size)
    e_text = mixing.e_text(scene.label_tokens)
    e_vis = mixing.e_vis(scene)
    clean = mixing.mix(e_text, e_vis)

    noise = np.zeros_like(clean)
    if sigma_noise > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, sigma_noise, size=clean.shape)
        outside = np.abs(noise) > 3 * sigma_noise
        while np.any(outside):
            noise[outside] = rng.normal(0.0, sigma_noise, size=int(outside.sum()))
            outside = np.abs(noise) > 3 * sigma_noise

    return FusedHiddenState(
        x_fused=(clean + noise).astype(np.float32),
        e_text=e_text.astype(np.float32),
        e_vis=e_vis.astype(np.float32),
        mixing_id=mixing.mixing_id,
    )


# --- datasets ---------------------------------------------------------------


@dataclass
class Dataset:
    """Scenes with their fused states."""
    scenes: List[Scene]
    states: List[FusedHiddenState]
    latent_dim: int

    def __post_init__(self) -> None:
        if len(self.scenes) != len(self.states):
            raise ContractError(
                f"{len(self.scenes)} scenes but {len(self.states)} hidden states"
            )

    def __len__(self) -> int:
        return len(self.scenes)

    @property
    def image_size(self) -> int:
        return self.scenes[0].image_size if self.scenes else 0

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(
            scenes=[self.scenes[i] for i in indices],
            states=[self.states[i] for i in indices],
            latent_dim=self.latent_dim,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.latent_dim == other.latent_dim
            and self.scenes == other.scenes
            and self.states == other.states
        )


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def build_dataset(
    seed: int,
    count: int,
    spec: Optional[GenerationConfig] = None,
    latent_dim: int = 64,
    sigma_noise: float = 0.01,
    mixing_seed: int = 0,
) -> Dataset:
    """
    Generate count scenes and their fused states, deterministically from seed.

    Args:
        seed: Dataset seed; scene i uses a seed derived from (seed, i)
        count: Number of scenes
        spec: Scene generation settings
        latent_dim: Factor dimension D
        sigma_noise: Hidden-state noise level
        mixing_seed: Seed of the shared mixing model

    Returns:
        Dataset
    """
    if count < 0:
        raise ContractError(f"scene count must be >= 0, got {count}")
    spec = spec or GenerationConfig()
    mixing = get_mixing_model(mixing_seed, latent_dim, spec.image_size)
    scenes: List[Scene] = []
    states: List[FusedHiddenState] = []
    for i in range(count):
        scene = generate_scene(scene_seed(seed, i), spec)
        scenes.append(scene)
        states.append(synthesize_hidden_state(scene, scene.seed ^ 0x5EED, sigma_noise, mixing))
    logger.debug("built dataset seed=%d scenes=%d", seed, count)
    return Dataset(scenes=scenes, states=states, latent_dim=latent_dim)


@dataclass
class SceneBatch:
    """Stacked arrays of a batch of scenes (float64 for the autodiff substrate)."""
    images: np.ndarray
    label_masks: np.ndarray
    gt_masks: np.ndarray
    tokens: List[List[str]]
    x_fused: np.ndarray
    e_text: np.ndarray
    e_vis: np.ndarray

    def __len__(self) -> int:
        return int(self.images.shape[0])


def make_batch(dataset: Dataset, indices: Sequence[int]) -> SceneBatch:
    """Stack the selected scenes into a SceneBatch."""
    if len(indices) == 0:
        raise ContractError("batch needs at least one scene")
    scenes = [dataset.scenes[i] for i in indices]
    states = [dataset.states[i] for i in indices]
    sizes = {s.image.shape for s in scenes}
    if len(sizes) != 1:
        raise ShapeError(f"scenes in a batch have different image shapes: {sorted(sizes)}")
    return SceneBatch(
        images=np.stack([s.image for s in scenes]).astype(np.float64),
        label_masks=np.stack([s.label_mask for s in scenes]).astype(np.float64),
        gt_masks=np.stack([s.gt_mask for s in scenes]).astype(np.float64),
        tokens=[list(s.label_tokens) for s in scenes],
        x_fused=np.stack([st.x_fused for st in states]).astype(np.float64),
        e_text=np.stack([st.e_text for st in states]).astype(np.float64),
        e_vis=np.stack([st.e_vis for st in states]).astype(np.float64),
    )
