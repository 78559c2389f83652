"""DSVAModel: the container that wires every trainable part and the decoupling objective."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .adversary import AdvBatchLoss, Discriminator, DiscriminatorRole, adv_objective
from .club import VariationalQ, club_estimate
from .config import RunConfig
from .decoupler import DecoupledState, Decoupler, decouple, encode_real_text, ortho_loss
from .diffcore import Module, Parameter, Tensor
from .errors import ContractError
from .losses import FusionGate, LossWeights, fuse_masks, triple_supervision
from .segcore import (
    DecoderPath,
    ImageEmbedding,
    ImageEncoder,
    MaskDecoder,
    MaskLogits,
    PointLift,
    PromptSet,
    PromptTag,
    decode_mask,
    dense_from_logits,
    encode_image,
    self_feedback_refine,
    text_to_points,
)
from .synthdata import VOCABULARY, SceneBatch, token_vector
from .types import LossBreakdown

logger = logging.getLogger(__name__)

TEXT_MODULE_PREFIXES = (
    "text_lift.", "text_decoder.", "decoupler.w_real_text", "decoupler.b_real_text"
)
DENSE_LIFTS = ("text_decoder.dense_lift", "visual_decoder.dense_lift")


@dataclass
class MaskPrediction:
    """Text, visual and fused logits for one batch, with the features that produced them."""
    text: MaskLogits
    visual: Optional[MaskLogits]
    fused: Tensor
    decoupled: Optional[DecoupledState] = None
    breakdown: Optional[LossBreakdown] = None


@dataclass
class DecoupleStep:
    """Everything one phase-2 forward pass produces."""
    objective: Tensor
    breakdown: LossBreakdown
    adversarial: AdvBatchLoss
    prediction: MaskPrediction


class DSVAModel(Module):
    """
    Image encoder, decoupler, two prompt lifts and mask decoders, fusion gate,
    two modality discriminators and the variational conditional q.

    Parameter names are dotted attribute paths ("visual_decoder.blocks.0.mlp_w1"),
    which is also how checkpoints store them.
    """

    def __init__(self, config: RunConfig):
        self._config = config
        m, d = config.model, config.data
        rng = np.random.default_rng(np.random.SeedSequence([config.run.seed, 0xD5A]))
        grid = d.image_size // m.patch_size
        fused_dim = 2 * d.latent_dim

        self.encoder = ImageEncoder(m.embed_dim, rng, m.patch_size, m.leaky_slope)
        self.decoupler = Decoupler(fused_dim, m.hidden_dim, d.latent_dim, rng)
        self.text_lift = PointLift(m.hidden_dim, m.embed_dim, m.points, rng)
        self.text_decoder = MaskDecoder(
            DecoderPath.TEXT, m.embed_dim, grid, rng, m.blocks, m.heads, m.leaky_slope
        )
        self.visual_lift = PointLift(m.hidden_dim, m.embed_dim, m.points, rng)
        self.visual_decoder = MaskDecoder(
            DecoderPath.VISUAL, m.embed_dim, grid, rng, m.blocks, m.heads, m.leaky_slope
        )
        self.gate = FusionGate(config.loss.gate_mode, config.loss.gate_value)
        self.disc_text = Discriminator(
            m.hidden_dim, rng, DiscriminatorRole.TEXT, m.disc_hidden, m.leaky_slope,
            config.adversary.clamp_eps,
        )
        self.disc_vision = Discriminator(
            m.hidden_dim, rng, DiscriminatorRole.VISION, m.disc_hidden, m.leaky_slope,
            config.adversary.clamp_eps,
        )
        self.q = VariationalQ(
            m.hidden_dim, rng, m.q_hidden, config.club.mixture_components, m.leaky_slope
        )
        self._token_table = np.stack(
            [token_vector(d.mixing_seed, token, d.latent_dim) for token in VOCABULARY]
        )

    @property
    def config(self) -> RunConfig:
        return self._config

    @property
    def token_table(self) -> np.ndarray:
        return self._token_table

    # --- parameter groups -------------------------------------------------

    def _select(self, keep: Callable[[str], bool]) -> Dict[str, Parameter]:
        return {name: p for name, p in self.named_parameters().items() if keep(name)}

    def text_module_parameters(self) -> Dict[str, Parameter]:
        """Prompt lift, text decoder and real-text head: the pre-trained text path."""
        return self._select(lambda name: name.startswith(TEXT_MODULE_PREFIXES))

    def phase1_parameters(self, reprompt: bool = True) -> Dict[str, Parameter]:
        return self._select(
            lambda name: (name.startswith("encoder.") or name.startswith(TEXT_MODULE_PREFIXES))
            and (reprompt or name not in DENSE_LIFTS)
        )

    def main_parameters(
        self, reprompt: bool = True, freeze_encoder: bool = False, include_text_path: bool = False
    ) -> Dict[str, Parameter]:
        """
        Parameters driven by the phase-2 objective.

        The real-text head never receives gradient in phase 2, so it is never included.
        """
        groups = ["decoupler.w_text", "decoupler.b_text", "decoupler.w_vision",
                  "decoupler.b_vision", "visual_lift.", "visual_decoder.", "gate."]
        if not freeze_encoder:
            groups.append("encoder.")
        if include_text_path:
            groups.extend(["text_lift.", "text_decoder."])
        return self._select(
            lambda name: name.startswith(tuple(groups)) and (reprompt or name not in DENSE_LIFTS)
        )

    def discriminator_parameters(self) -> Dict[str, Parameter]:
        return self._select(lambda name: name.startswith(("disc_text.", "disc_vision.")))

    def q_parameters(self) -> Dict[str, Parameter]:
        return self._select(lambda name: name.startswith("q."))

    # --- forward pieces ---------------------------------------------------

    def embed(self, images: np.ndarray) -> ImageEmbedding:
        return encode_image(images, self.encoder)

    def project_real_text(self, label_embedding: Tensor) -> Tensor:
        return encode_real_text(label_embedding, self.decoupler)

    def real_text_prompts(self, tokens: Sequence[Sequence[str]]) -> PromptSet:
        return text_to_points(
            list(tokens), self.token_table, self.text_lift, self.project_real_text
        )

    def text_prompts(self, h_text: Tensor) -> PromptSet:
        return PromptSet(
            sparse=self.text_lift(h_text), tags=(PromptTag.DECOUPLED_TEXT,) * self.text_lift.points
        )

    def visual_prompts(self, h_vision: Tensor) -> PromptSet:
        return PromptSet(
            sparse=self.visual_lift(h_vision),
            tags=(PromptTag.DECOUPLED_VISUAL,) * self.visual_lift.points,
        )

    def decouple(self, x_fused: np.ndarray) -> DecoupledState:
        return decouple(x_fused, self.decoupler)

    def _decode_pair(
        self,
        img_emb: ImageEmbedding,
        text_prompts: PromptSet,
        visual_prompts: PromptSet,
        dense: Optional[np.ndarray] = None,
    ) -> Tuple[MaskLogits, MaskLogits, Tensor]:
        text = decode_mask(img_emb, text_prompts.with_dense(dense), self.text_decoder)
        visual = decode_mask(img_emb, visual_prompts.with_dense(dense), self.visual_decoder)
        return text, visual, fuse_masks(text.logits, visual.logits, self.gate)

    def predict(
        self, batch: SceneBatch, iterations: int = 0, hard: bool = False
    ) -> MaskPrediction:
        """
        Decoupled prediction with T rounds of self-feedback.

        Each round feeds the fused mask back as the dense prompt of both decoders;
        sparse prompts stay fixed.
        """
        if iterations < 0:
            raise ContractError(f"iterations must be >= 0, got {iterations}")
        img_emb = self.embed(batch.images)
        state = self.decouple(batch.x_fused)
        text_prompts = self.text_prompts(state.h_text)
        visual_prompts = self.visual_prompts(state.h_vision)
        text, visual, fused = self._decode_pair(img_emb, text_prompts, visual_prompts)
        for _ in range(iterations):
            dense = dense_from_logits(fused, hard)
            text, visual, fused = self._decode_pair(img_emb, text_prompts, visual_prompts, dense)
        return MaskPrediction(text=text, visual=visual, fused=fused, decoupled=state)

    def predict_text_only(
        self, batch: SceneBatch, iterations: int = 0, hard: bool = False
    ) -> MaskPrediction:
        """Real labels through the text path only (models with no decoupling stage yet)."""
        img_emb = self.embed(batch.images)
        text = self_feedback_refine(
            img_emb, self.real_text_prompts(batch.tokens), self.text_decoder, iterations, hard
        )
        return MaskPrediction(text=text, visual=None, fused=text.logits)

    def decouple_step(
        self, batch: SceneBatch, weights: LossWeights, reprompt: bool = True
    ) -> DecoupleStep:
        """
        Phase-2 forward pass and objective.

        The objective is the triple-supervision total plus the discriminator loss -J,
        computed on gradient-reversed features; backward on it trains the
        discriminators up J and the decoupler down lambda_adv * J in one pass.
        H_label comes from the text decoder on real labels and carries no gradient.
        """
        adv_cfg = self.config.adversary
        img_emb = self.embed(batch.images)
        state = self.decouple(batch.x_fused)
        text_prompts = self.text_prompts(state.h_text)
        visual_prompts = self.visual_prompts(state.h_vision)
        text, visual, fused = self._decode_pair(img_emb, text_prompts, visual_prompts)

        reprompt_logits = None
        if reprompt:
            dense = dense_from_logits(fused)
            _, _, reprompt_logits = self._decode_pair(img_emb, text_prompts, visual_prompts, dense)

        with dc.no_grad():
            h_label = decode_mask(
                img_emb, self.real_text_prompts(batch.tokens), self.text_decoder
            ).mask_token
        adversarial = adv_objective(
            state.h_text, state.h_vision, self.disc_text, self.disc_vision,
            grl_lambda=weights.lambda_adv, wiring=adv_cfg.wiring,
        )
        aux = {
            "adv": adversarial.objective,
            "club": club_estimate(self.q, state.h_text, state.h_vision),
            "ortho": ortho_loss(h_label, visual.mask_token),
        }
        total, breakdown = triple_supervision(
            text.logits, visual.logits, fused, batch.label_masks, batch.gt_masks, aux, weights,
            reprompt_logits=reprompt_logits,
        )
        prediction = MaskPrediction(
            text=text, visual=visual, fused=fused, decoupled=state, breakdown=breakdown
        )
        return DecoupleStep(
            objective=total + adversarial.discriminator_loss,
            breakdown=breakdown,
            adversarial=adversarial,
            prediction=prediction,
        )


def loss_weights(config: RunConfig) -> LossWeights:
    return LossWeights(
        lambda_adv=config.adversary.lambda_adv,
        lambda_club=config.club.lambda_club,
        lambda_ortho=config.loss.lambda_ortho,
        ce_variant=config.loss.ce_variant,
        epsilon_dice=config.loss.epsilon_dice,
    )


def has_decoupling_stage(state_names: List[str]) -> bool:
    """True when a saved state includes the visual path, i.e. phase 2 has run."""
    return any(name.startswith("visual_decoder.") for name in state_names)
