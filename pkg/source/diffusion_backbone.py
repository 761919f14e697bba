# diffusion_backbone.py
# Denoiser contract with attention hooks, classifier-free guidance, the
# deterministic DDIM update and latent decode. Ships a weight-free toy
# backbone and a Stable Diffusion adapter behind the same contract.
import abc
import hashlib
import math
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from source import settings
from source.attention_engine import STREAM_FULL, AttentionMapSet, QKInputs, compute_attention, map_resolution
from source.errors import (
    BackboneFailure,
    ConfigError,
    HookShapeMismatch,
    ScheduleExhausted,
    ShapeMismatch,
    ValueOutOfRange,
)
from source.str_utils import whitespace_tokenize

logger = logging.getLogger(__name__)

STREAM_UNCOND = "uncond"
MASK_WINDOWS = ("loss", "always")
HANDOFFS = ("seed", "latent")


# -----------------------------
# Types
# -----------------------------
@dataclass
class LatentState:
    z: torch.Tensor  # (channels, h, w)
    t: int  # countdown step: num_steps at the start, 0 when clean
    seed: int
    stream_tag: str = STREAM_FULL
    num_steps: int = 0  # length of the schedule this state is walking

    def __post_init__(self):
        if not bool(torch.isfinite(self.z.detach()).all()):
            raise ValueOutOfRange("latent has non-finite entries")
        if self.t < 0 or (self.num_steps and self.t > self.num_steps):
            raise ValueOutOfRange(f"step {self.t} outside [0, {self.num_steps}]")

    def with_latent(self, z: torch.Tensor, t: Optional[int] = None) -> "LatentState":
        return replace(self, z=z, t=self.t if t is None else t)

    def with_stream(self, stream_tag: str) -> "LatentState":
        return replace(self, stream_tag=stream_tag)


@dataclass(frozen=True)
class SamplerSchedule:
    num_steps: int
    alphas_bar: Tuple[float, ...]  # index t; alphas_bar[0] is the clean end
    eta: float = 0.0

    def __post_init__(self):
        if self.num_steps < 1 or len(self.alphas_bar) != self.num_steps + 1:
            raise ConfigError(f"schedule needs {self.num_steps + 1} alpha_bar values, got {len(self.alphas_bar)}")
        if self.alphas_bar[0] > 1.0 or self.alphas_bar[-1] <= 0.0:
            raise ConfigError("alpha_bar must lie in (0, 1]")
        if any(b >= a for a, b in zip(self.alphas_bar, self.alphas_bar[1:])):
            raise ConfigError("alpha_bar must be strictly decreasing in t")
        if self.eta != 0.0:
            raise ConfigError("only the deterministic sampler (eta = 0) is supported")

    @classmethod
    def linear(cls, num_steps: int, start: float = settings.ALPHA_BAR_START, end: float = settings.ALPHA_BAR_END):
        values = np.linspace(start, end, num_steps) if num_steps > 1 else np.array([start])
        return cls(num_steps=num_steps, alphas_bar=(1.0,) + tuple(float(v) for v in values))

    def alpha_bar(self, t: int) -> float:
        return self.alphas_bar[t]

    def nearest_step(self, alpha_bar: float) -> int:
        return min(range(1, self.num_steps + 1), key=lambda t: (abs(self.alphas_bar[t] - alpha_bar), t))


@dataclass(frozen=True)
class GuidanceConfig:
    T1: int = settings.T1
    T2: int = settings.T2
    k: int = settings.K_CANDIDATES
    gamma: int = settings.GAMMA
    cfg_scale: float = settings.CFG_SCALE
    alpha_max: float = settings.ALPHA_MAX
    alpha_schedule: Optional[Tuple[float, ...]] = None  # explicit per-step weights, first T2 step first
    loss_weights: Tuple[float, float, float] = settings.LOSS_WEIGHTS
    change_threshold: float = settings.CHANGE_THRESHOLD
    loss_active_fraction: float = settings.LOSS_ACTIVE_FRACTION
    top_fraction: float = settings.TOP_FRACTION
    corner_band: int = settings.CORNER_BAND
    substitution: bool = True
    mask_window: str = "loss"
    handoff: str = "seed"
    handoff_step: Optional[int] = None
    divergence_patience: int = settings.DIVERGENCE_PATIENCE
    divergence_tolerance: float = settings.DIVERGENCE_TOLERANCE
    attention_resolutions: Tuple[int, ...] = ()

    def __post_init__(self):
        problems = []
        if not 1 <= self.T1 <= self.T2:
            problems.append("need 1 <= T1 <= T2")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.gamma < 0:
            problems.append("gamma must be >= 0")
        if self.cfg_scale < 1:
            problems.append("cfg_scale must be >= 1")
        if self.alpha_max < 0 or any(a < 0 for a in (self.alpha_schedule or ())):
            problems.append("alpha weights must be >= 0")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            problems.append("loss_weights must be three values >= 0")
        if not 0.0 <= self.change_threshold <= 1.0:
            problems.append("change_threshold must lie in [0, 1]")
        if not 0.0 < self.loss_active_fraction <= 1.0:
            problems.append("loss_active_fraction must lie in (0, 1]")
        if not 0.0 < self.top_fraction <= 1.0:
            problems.append("top_fraction must lie in (0, 1]")
        if self.corner_band < 0:
            problems.append("corner_band must be >= 0")
        if self.mask_window not in MASK_WINDOWS:
            problems.append(f"mask_window must be one of {MASK_WINDOWS}")
        if self.handoff not in HANDOFFS:
            problems.append(f"handoff must be one of {HANDOFFS}")
        if self.handoff_step is not None and not 1 <= self.handoff_step <= self.T1:
            problems.append("handoff_step must lie in [1, T1]")
        if problems:
            raise ConfigError("; ".join(problems))

    def active_steps(self) -> int:
        return min(self.T2, max(1, int(round(self.loss_active_fraction * self.T2))))

    def step_position(self, t: int) -> int:
        """0 for the first T2 step (t = T2), T2 - 1 for the last (t = 1)."""
        return self.T2 - t

    def is_active(self, t: int) -> bool:
        return 0 <= self.step_position(t) < self.active_steps()

    def alpha_at(self, t: int) -> float:
        pos = self.step_position(t)
        if self.alpha_schedule is not None:
            return float(self.alpha_schedule[pos]) if 0 <= pos < len(self.alpha_schedule) else 0.0
        if not self.is_active(t):
            return 0.0
        return self.alpha_max * (1.0 - pos / self.active_steps())


# -----------------------------
# Hooks
# -----------------------------
class AttentionHooks:
    """
    Callbacks invoked inside predict_noise for every configured layer.
    Returning None keeps the map; returning a tensor of the same shape
    replaces it before it weights the values.
    """

    stream: str = STREAM_FULL

    def on_cross(self, layer_id: str, probs: torch.Tensor, step: int) -> Optional[torch.Tensor]:
        return None

    def on_self(self, layer_id: str, probs: torch.Tensor, step: int) -> Optional[torch.Tensor]:
        return None

    def provenance(self, layer_id: str, num_tokens: int) -> Tuple[str, ...]:
        return (self.stream,) * num_tokens


class CaptureHooks(AttentionHooks):
    """Observe-only hooks; keeps a detached copy of every map it sees."""

    def __init__(self):
        self.cross: Dict[str, torch.Tensor] = {}
        self.self_: Dict[str, torch.Tensor] = {}

    def on_cross(self, layer_id, probs, step):
        self.cross[layer_id] = probs.detach().clone()
        return None

    def on_self(self, layer_id, probs, step):
        self.self_[layer_id] = probs.detach().clone()
        return None


def _apply_hook(fn, layer_id: str, probs: torch.Tensor, step: int) -> torch.Tensor:
    new = fn(layer_id, probs, step)
    if new is None:
        return probs
    if tuple(new.shape) != tuple(probs.shape):
        raise HookShapeMismatch(f"{layer_id}: hook returned {tuple(new.shape)}, expected {tuple(probs.shape)}")
    return new.to(probs.dtype)


# -----------------------------
# Guidance and sampler
# -----------------------------
def guided_noise(cond: torch.Tensor, uncond: torch.Tensor, s: float) -> torch.Tensor:
    """Classifier-free guidance: uncond + s * (cond - uncond)."""
    if cond.shape != uncond.shape:
        raise ShapeMismatch(f"cond {tuple(cond.shape)} vs uncond {tuple(uncond.shape)}")
    if s == 1:
        return cond.clone()
    return uncond + s * (cond - uncond)


def ddim_update(z: torch.Tensor, eps: torch.Tensor, alpha_bar_t: float, alpha_bar_prev: float) -> torch.Tensor:
    x0 = (z - math.sqrt(1.0 - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)
    return math.sqrt(alpha_bar_prev) * x0 + math.sqrt(1.0 - alpha_bar_prev) * eps


def sampler_step(state: LatentState, noise_est: torch.Tensor, schedule: SamplerSchedule) -> LatentState:
    """One deterministic DDIM step from t to t - 1."""
    if state.t < 1 or state.t > schedule.num_steps:
        raise ScheduleExhausted(f"no step left at t={state.t} on a {schedule.num_steps}-step schedule")
    if noise_est.shape != state.z.shape:
        raise ShapeMismatch(f"noise {tuple(noise_est.shape)} vs latent {tuple(state.z.shape)}")
    z = ddim_update(state.z, noise_est, schedule.alpha_bar(state.t), schedule.alpha_bar(state.t - 1))
    return state.with_latent(z, t=state.t - 1)


# -----------------------------
# Backbone contract
# -----------------------------
class DiffusionBackbone(abc.ABC):
    name = "abstract"
    # column of prompt token 0 in the attention maps (1 when a BOS token leads)
    token_offset = 0

    @abc.abstractmethod
    def tokenize(self, text: str) -> List[str]:
        ...

    @abc.abstractmethod
    def encode_prompt(self, text: str) -> torch.Tensor:
        ...

    @abc.abstractmethod
    def uncond_embedding(self) -> torch.Tensor:
        ...

    @abc.abstractmethod
    def schedule(self, num_steps: int) -> SamplerSchedule:
        ...

    @abc.abstractmethod
    def initial_latent(self, seed: int, num_steps: int) -> LatentState:
        ...

    @abc.abstractmethod
    def predict_noise(
        self,
        state: LatentState,
        prompt_embedding: torch.Tensor,
        hooks: Optional[AttentionHooks] = None,
    ) -> Tuple[torch.Tensor, AttentionMapSet]:
        ...

    @abc.abstractmethod
    def decode(self, state: LatentState) -> np.ndarray:
        """(h, w, 3) float image in [0, 1]."""

    def prompt_columns(self, tokens: Sequence[str]) -> List[int]:
        return [i + self.token_offset for i in range(len(tokens))]


def _token_vector(token: str, dim: int) -> torch.Tensor:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    g = torch.Generator().manual_seed(seed)
    return torch.randn(dim, generator=g, dtype=torch.float64)


class ToyBackbone(DiffusionBackbone):
    """
    Weight-free denoiser for tests and desk runs.

    Latent 4 x 8 x 8, hash-seeded token embeddings (d = 16), one
    cross-attention layer and one self-attention layer at 8 x 8:
        Q = x Wq + pos, K = E Wk, A = Softmax(Q K^T / sqrt(d))
        S = Softmax(Qs Qs^T / sqrt(d)), Qs = x Ws + pos
        h = A (E Wv), eps = (h + S h) / 2
    With uniform cross rows every position gets mean_n(E Wv) regardless of S.

    pos is a fixed per-position offset, so the query map is affine in the
    latent. Without it a spatially constant latent gives identical rows in
    every map and the object box has nothing to threshold. It is constant
    in z, so gradients through Q are those of the linear part x Wq.
    """

    name = "toy"
    CHANNELS = 4
    RES = 8
    DIM = 16
    CROSS_LAYER = "cross_8"
    SELF_LAYER = "self_8"
    UNCOND_TOKEN = "<uncond>"

    def __init__(self, weights_seed: int = 0, value_scale: float = 0.1, decode_scale: float = 0.25):
        g = torch.Generator().manual_seed(weights_seed)
        c, d, p = self.CHANNELS, self.DIM, self.RES * self.RES
        dt = torch.float64
        self.Wq = torch.randn(c, d, generator=g, dtype=dt) / math.sqrt(c)
        self.Ws = torch.randn(c, d, generator=g, dtype=dt) / math.sqrt(c)
        self.Wk = torch.randn(d, d, generator=g, dtype=dt) / math.sqrt(d)
        self.Wv = torch.randn(d, c, generator=g, dtype=dt) / math.sqrt(d) * value_scale
        self.pos = torch.randn(p, d, generator=g, dtype=dt)
        self.Wdec = torch.randn(3, c, generator=g, dtype=dt) * decode_scale
        self._schedules: Dict[int, SamplerSchedule] = {}

    def tokenize(self, text: str) -> List[str]:
        return whitespace_tokenize(text)

    def encode_prompt(self, text: str) -> torch.Tensor:
        tokens = self.tokenize(text) or [self.UNCOND_TOKEN]
        return torch.stack([_token_vector(t, self.DIM) for t in tokens])

    def uncond_embedding(self) -> torch.Tensor:
        return _token_vector(self.UNCOND_TOKEN, self.DIM).unsqueeze(0)

    def schedule(self, num_steps: int) -> SamplerSchedule:
        if num_steps not in self._schedules:
            self._schedules[num_steps] = SamplerSchedule.linear(num_steps)
        return self._schedules[num_steps]

    def initial_latent(self, seed: int, num_steps: int) -> LatentState:
        g = torch.Generator().manual_seed(int(seed))
        z = torch.randn(self.CHANNELS, self.RES, self.RES, generator=g, dtype=torch.float64)
        return LatentState(z=z, t=num_steps, seed=int(seed), num_steps=num_steps)

    def predict_noise(self, state, prompt_embedding, hooks=None):
        if state.z.shape != (self.CHANNELS, self.RES, self.RES):
            raise ShapeMismatch(f"toy latent must be {(self.CHANNELS, self.RES, self.RES)}, got {tuple(state.z.shape)}")
        x = state.z.reshape(self.CHANNELS, -1).T  # (P, C)
        emb = prompt_embedding.to(torch.float64)

        a = compute_attention(QKInputs(Q=x @ self.Wq + self.pos, K=emb @ self.Wk, d=self.DIM))
        qs = x @ self.Ws + self.pos
        s = compute_attention(QKInputs(Q=qs, K=qs, d=self.DIM))
        if hooks is not None:
            a = _apply_hook(hooks.on_cross, self.CROSS_LAYER, a, state.t)
            s = _apply_hook(hooks.on_self, self.SELF_LAYER, s, state.t)

        h = a @ (emb @ self.Wv)  # (P, C)
        eps = 0.5 * (h + s @ h)
        eps = eps.T.reshape(self.CHANNELS, self.RES, self.RES)

        stream = hooks.stream if hooks is not None else state.stream_tag
        maps = AttentionMapSet(
            cross={self.CROSS_LAYER: a},
            self_={self.SELF_LAYER: s},
            step=state.t,
            provenance={
                self.CROSS_LAYER: hooks.provenance(self.CROSS_LAYER, a.shape[-1])
                if hooks is not None
                else (stream,) * a.shape[-1]
            },
        )
        return eps, maps

    def decode(self, state: LatentState) -> np.ndarray:
        z = state.z.detach().to(torch.float64)
        rgb = torch.einsum("kc,chw->khw", self.Wdec, z)
        img = (0.5 + rgb).clamp(0.0, 1.0)
        img = img.repeat_interleave(8, dim=1).repeat_interleave(8, dim=2)
        return img.permute(1, 2, 0).numpy().copy()


# -----------------------------
# Stable Diffusion adapter
# -----------------------------
class _HookedAttnProcessor:
    """Attention processor that exposes probabilities to the active hooks."""

    def __init__(self, owner: "StableDiffusionBackbone", name: str):
        self.owner = owner
        self.name = name

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        is_cross = encoder_hidden_states is not None
        batch_size, seq_len, _ = hidden_states.shape
        context = encoder_hidden_states if is_cross else hidden_states
        attention_mask = attn.prepare_attention_mask(attention_mask, context.shape[1], batch_size)

        query = attn.head_to_batch_dim(attn.to_q(hidden_states))
        key = attn.head_to_batch_dim(attn.to_k(context))
        value = attn.head_to_batch_dim(attn.to_v(context))
        probs = attn.get_attention_scores(query, key, attention_mask)

        res = int(round(math.sqrt(seq_len)))
        if res in self.owner.resolutions:
            hooks = self.owner._active_hooks
            if hooks is not None:
                fn = hooks.on_cross if is_cross else hooks.on_self
                probs = _apply_hook(fn, self.name, probs, self.owner._active_step)
            self.owner._record(self.name, probs, is_cross)

        out = attn.batch_to_head_dim(torch.bmm(probs, value))
        out = attn.to_out[0](out)
        out = attn.to_out[1](out)
        return out


class StableDiffusionBackbone(DiffusionBackbone):
    """
    Latent diffusion adapter (diffusers). Hooks run on the cross- and
    self-attention layers whose spatial resolution is in `resolutions`;
    by default the two coarsest cross-attention resolutions.
    """

    name = "ldm-adapter"
    token_offset = 1

    def __init__(self, model_id: str = settings.SD_MODEL_ID, device: str = settings.DEVICE,
                 attention_resolutions: Sequence[int] = ()):
        try:
            from diffusers import DDIMScheduler, StableDiffusionPipeline
        except ImportError as e:
            raise BackboneFailure("diffusers is not installed (pip install -r requirements-real.txt)") from e
        try:
            pipe = StableDiffusionPipeline.from_pretrained(model_id, safety_checker=None)
        except Exception as e:
            raise BackboneFailure(f"cannot load {model_id}: {e}") from e
        pipe.scheduler = DDIMScheduler.from_config(pipe.scheduler.config)
        self.device = torch.device(device)
        self.unet = pipe.unet.to(self.device).eval()
        self.vae = pipe.vae.to(self.device).eval()
        self.text_encoder = pipe.text_encoder.to(self.device).eval()
        self.tokenizer = pipe.tokenizer
        self.scheduler = pipe.scheduler
        for module in (self.unet, self.vae, self.text_encoder):
            module.requires_grad_(False)

        latent_res = int(self.unet.config.sample_size)
        cross_res = self._cross_resolutions(latent_res)
        self.resolutions = tuple(sorted(attention_resolutions)) if attention_resolutions else tuple(cross_res[:2])
        self.unet.set_attn_processor({name: _HookedAttnProcessor(self, name) for name in self.unet.attn_processors})
        self._active_hooks: Optional[AttentionHooks] = None
        self._active_step = 0
        self._cross: Dict[str, torch.Tensor] = {}
        self._self: Dict[str, torch.Tensor] = {}
        self._timesteps: Dict[int, List[int]] = {}
        self._schedules: Dict[int, SamplerSchedule] = {}
        logger.info("Loaded %s on %s, hooked resolutions %s", model_id, device, self.resolutions)

    def _cross_resolutions(self, latent_res: int) -> List[int]:
        res = set()
        for name in self.unet.attn_processors:
            if not name.endswith("attn2.processor"):
                continue
            if name.startswith("mid_block"):
                level = len(self.unet.config.block_out_channels) - 1
            else:
                level = int(name.split(".")[1])
                if name.startswith("up_blocks"):
                    level = len(self.unet.config.block_out_channels) - 1 - level
            res.add(latent_res // (2 ** level))
        return sorted(res)

    def _record(self, name: str, probs: torch.Tensor, is_cross: bool) -> None:
        (self._cross if is_cross else self._self)[name] = probs

    def tokenize(self, text: str) -> List[str]:
        return [t.replace("</w>", "") for t in self.tokenizer.tokenize(text)]

    @torch.no_grad()
    def encode_prompt(self, text: str) -> torch.Tensor:
        ids = self.tokenizer(
            text, padding="max_length", max_length=self.tokenizer.model_max_length,
            truncation=True, return_tensors="pt",
        ).input_ids.to(self.device)
        return self.text_encoder(ids)[0][0]

    def uncond_embedding(self) -> torch.Tensor:
        return self.encode_prompt("")

    def schedule(self, num_steps: int) -> SamplerSchedule:
        if num_steps not in self._schedules:
            self.scheduler.set_timesteps(num_steps)
            timesteps = [int(t) for t in self.scheduler.timesteps]
            cumprod = self.scheduler.alphas_cumprod
            alphas = [1.0] + [float(cumprod[timesteps[num_steps - t]]) for t in range(1, num_steps + 1)]
            self._timesteps[num_steps] = timesteps
            self._schedules[num_steps] = SamplerSchedule(num_steps=num_steps, alphas_bar=tuple(alphas))
        return self._schedules[num_steps]

    def initial_latent(self, seed: int, num_steps: int) -> LatentState:
        g = torch.Generator("cpu").manual_seed(int(seed))
        c = int(self.unet.config.in_channels)
        r = int(self.unet.config.sample_size)
        z = torch.randn(c, r, r, generator=g) * float(self.scheduler.init_noise_sigma)
        return LatentState(z=z.to(self.device), t=num_steps, seed=int(seed), num_steps=num_steps)

    def predict_noise(self, state, prompt_embedding, hooks=None):
        if not state.num_steps:
            raise BackboneFailure("latent state does not name its schedule length")
        self.schedule(state.num_steps)
        timestep = self._timesteps[state.num_steps][state.num_steps - state.t]
        self._active_hooks, self._active_step = hooks, state.t
        self._cross, self._self = {}, {}
        try:
            with torch.set_grad_enabled(state.z.requires_grad):
                eps = self.unet(
                    state.z.unsqueeze(0), timestep, encoder_hidden_states=prompt_embedding.unsqueeze(0)
                ).sample[0]
        except (HookShapeMismatch, ShapeMismatch):
            raise
        except Exception as e:
            raise BackboneFailure(f"unet forward failed at t={state.t}: {e}") from e
        finally:
            self._active_hooks = None
        stream = hooks.stream if hooks is not None else state.stream_tag
        provenance = {
            layer: hooks.provenance(layer, a.shape[-1]) if hooks is not None else (stream,) * a.shape[-1]
            for layer, a in self._cross.items()
        }
        return eps, AttentionMapSet(cross=dict(self._cross), self_=dict(self._self), step=state.t, provenance=provenance)

    @torch.no_grad()
    def decode(self, state: LatentState) -> np.ndarray:
        try:
            z = state.z.unsqueeze(0) / float(self.vae.config.scaling_factor)
            img = self.vae.decode(z).sample[0]
        except Exception as e:
            raise BackboneFailure(f"vae decode failed: {e}") from e
        img = (img / 2 + 0.5).clamp(0, 1)
        return img.permute(1, 2, 0).float().cpu().numpy()


def build_backbone(name: str, model_id: str = settings.SD_MODEL_ID, device: str = settings.DEVICE,
                   attention_resolutions: Sequence[int] = ()) -> DiffusionBackbone:
    if name == "toy":
        return ToyBackbone()
    if name == "ldm-adapter":
        return StableDiffusionBackbone(model_id=model_id, device=device, attention_resolutions=attention_resolutions)
    raise ConfigError(f"unknown backbone: {name!r} (expected toy | ldm-adapter)")
