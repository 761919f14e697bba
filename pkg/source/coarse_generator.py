# coarse_generator.py
# Dual-stream sampling: the full prompt and the intransitive prompt share
# one latent; aligned cross-attention columns and (early) self-attention
# come from the intransitive stream. Produces the k candidate previews.
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import torch

from source.attention_engine import (
    STREAM_FULL,
    STREAM_INTRANS,
    AttentionMapSet,
    eliminate_overlap,
    merge_cross_attention,
    merge_self_attention,
)
from source.diffusion_backbone import (
    STREAM_UNCOND,
    AttentionHooks,
    DiffusionBackbone,
    GuidanceConfig,
    LatentState,
    SamplerSchedule,
    guided_noise,
    sampler_step,
)
from source.errors import CandidateCountZero
from source.prompt_engine import PromptPair

logger = logging.getLogger(__name__)


@dataclass
class CandidateImage:
    index: int
    seed: int
    preview: np.ndarray  # (h, w, 3) in [0, 1]
    final_cross_maps: AttentionMapSet
    prompt_pair: PromptPair
    trajectory: Tuple[torch.Tensor, ...] = ()  # trajectory[i] is the latent at t = T1 - i
    attention_trace: List[AttentionMapSet] = field(default_factory=list)


@dataclass
class SampleResult:
    state: LatentState
    final_cross_maps: AttentionMapSet
    trajectory: Tuple[torch.Tensor, ...]
    attention_trace: List[AttentionMapSet]


class SubstitutionHooks(AttentionHooks):
    """
    Full-stream hooks that pull aligned cross-attention columns and, while
    t > gamma, the self-attention grid from the intransitive stream. With an
    object column set, the merged maps are also inverse-masked by the object.
    """

    def __init__(
        self,
        intrans_maps: Optional[AttentionMapSet],
        alignment: Mapping[int, int],
        gamma: int,
        object_column: Optional[int] = None,
    ):
        self.intrans_maps = intrans_maps
        self.alignment = dict(alignment)
        self.gamma = gamma
        self.object_column = object_column
        self._provenance: Dict[str, Tuple[str, ...]] = {}

    def on_cross(self, layer_id, probs, step):
        maps = AttentionMapSet.captured({layer_id: probs}, {}, step, STREAM_FULL)
        if self.intrans_maps is not None and layer_id in self.intrans_maps.cross:
            other = AttentionMapSet(
                cross={layer_id: self.intrans_maps.cross[layer_id]},
                step=step,
                provenance={layer_id: (STREAM_INTRANS,) * int(self.intrans_maps.cross[layer_id].shape[-1])},
            )
            maps = merge_cross_attention(maps, other, self.alignment)
        if self.object_column is not None:
            masked = eliminate_overlap(maps, self.object_column)
            assert torch.equal(
                masked.cross[layer_id][..., self.object_column], maps.cross[layer_id][..., self.object_column]
            ), "object map changed by its own inverse mask"
            maps = AttentionMapSet(cross=masked.cross, step=step, provenance=maps.provenance)
        self._provenance[layer_id] = maps.provenance[layer_id]
        return maps.cross[layer_id]

    def on_self(self, layer_id, probs, step):
        if self.intrans_maps is None or layer_id not in self.intrans_maps.self_:
            return None
        return merge_self_attention(probs, self.intrans_maps.self_[layer_id], step, self.gamma)

    def provenance(self, layer_id, num_tokens):
        return self._provenance.get(layer_id, (STREAM_FULL,) * num_tokens)


class DualStreamSampler:
    """Runs the shared-latent dual-stream denoiser for one prompt pair."""

    def __init__(
        self,
        backbone: DiffusionBackbone,
        pair: PromptPair,
        config: GuidanceConfig,
        substitution: Optional[bool] = None,
    ):
        self.backbone = backbone
        self.pair = pair
        self.config = config
        self.substitution = config.substitution if substitution is None else substitution
        self.emb_full = backbone.encode_prompt(pair.full_prompt)
        self.emb_intrans = backbone.encode_prompt(pair.intransitive_prompt)
        self.emb_uncond = backbone.uncond_embedding()
        off = backbone.token_offset
        self.alignment = {i + off: j + off for i, j in pair.alignment.items()}
        self.object_column = pair.object_index + off if pair.object_index is not None else None

    def intransitive_maps(self, state: LatentState) -> AttentionMapSet:
        with torch.no_grad():
            z = state.z.detach()
            _, maps = self.backbone.predict_noise(
                state.with_latent(z).with_stream(STREAM_INTRANS), self.emb_intrans
            )
        return maps

    def conditional(self, state: LatentState, mask_overlap: bool = False) -> Tuple[torch.Tensor, AttentionMapSet]:
        """Full-prompt noise estimate with the stream merge (and object mask) applied."""
        intrans = self.intransitive_maps(state) if self.substitution else None
        if intrans is None and not mask_overlap:
            return self.backbone.predict_noise(state, self.emb_full)
        hooks = SubstitutionHooks(
            intrans,
            self.alignment if self.substitution else {},
            self.config.gamma,
            object_column=self.object_column if mask_overlap else None,
        )
        return self.backbone.predict_noise(state, self.emb_full, hooks)

    @torch.no_grad()
    def denoise_step(
        self, state: LatentState, schedule: SamplerSchedule, mask_overlap: bool = False
    ) -> Tuple[LatentState, AttentionMapSet]:
        cond, maps = self.conditional(state, mask_overlap)
        uncond, _ = self.backbone.predict_noise(state.with_stream(STREAM_UNCOND), self.emb_uncond)
        eps = guided_noise(cond, uncond, self.config.cfg_scale)
        return sampler_step(state, eps, schedule), maps

    def run(self, state: LatentState, schedule: SamplerSchedule, record_attention: bool = False) -> SampleResult:
        trajectory = [state.z.detach().clone()]
        trace: List[AttentionMapSet] = []
        maps = None
        while state.t > 0:
            state, maps = self.denoise_step(state, schedule)
            trajectory.append(state.z.detach().clone())
            if record_attention:
                trace.append(maps.detached())
        return SampleResult(
            state=state,
            final_cross_maps=maps.detached(),
            trajectory=tuple(trajectory),
            attention_trace=trace,
        )


def generate_candidates(
    pair: PromptPair,
    config: GuidanceConfig,
    backbone: DiffusionBackbone,
    base_seed: int = 0,
    k: Optional[int] = None,
    record_attention: bool = False,
) -> List[CandidateImage]:
    """k short dual-stream runs, candidate i seeded with base_seed + i."""
    k = config.k if k is None else k
    if k < 1:
        raise CandidateCountZero(f"k must be >= 1, got {k}")
    sampler = DualStreamSampler(backbone, pair, config)
    schedule = backbone.schedule(config.T1)
    candidates: List[CandidateImage] = []
    for index in range(k):
        seed = base_seed + index
        result = sampler.run(backbone.initial_latent(seed, schedule.num_steps), schedule, record_attention)
        candidates.append(
            CandidateImage(
                index=index,
                seed=seed,
                preview=backbone.decode(result.state),
                final_cross_maps=result.final_cross_maps,
                prompt_pair=pair,
                trajectory=result.trajectory,
                attention_trace=result.attention_trace,
            )
        )
        logger.debug("Candidate %d (seed %d) done", index, seed)
    logger.info("Generated %d candidates for %r", k, pair.full_prompt)
    return candidates


def plain_sample(
    pair: PromptPair,
    config: GuidanceConfig,
    backbone: DiffusionBackbone,
    seed: int = 0,
    record_attention: bool = False,
) -> Tuple[np.ndarray, SampleResult]:
    """Full-prompt sampling over T2 steps with no stream substitution."""
    sampler = DualStreamSampler(backbone, pair, config, substitution=False)
    schedule = backbone.schedule(config.T2)
    result = sampler.run(backbone.initial_latent(seed, schedule.num_steps), schedule, record_attention)
    return backbone.decode(result.state), result
