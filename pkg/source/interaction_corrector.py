# interaction_corrector.py
# Re-denoises the chosen candidate on the long schedule. Inside the
# loss-active window each step pulls the object's attention into the
# proposed box with one gradient step on the latent, then the object's
# inverse mask suppresses overlapping attention before the sampler step.
import math
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch

from source.attention_engine import AttentionMap, AttentionMapSet, aggregate_token_map, normalize_map
from source.coarse_generator import CandidateImage, DualStreamSampler
from source.diffusion_backbone import DiffusionBackbone, GuidanceConfig, LatentState, SamplerSchedule
from source.errors import (
    BoxTooSmall,
    DivergenceDetected,
    NonFiniteGradient,
    PreconditionViolation,
    ShapeMismatch,
    ValueOutOfRange,
)
from source.prompt_engine import PromptPair
from source.reasoning_agents import BoundingBox, LayoutSuggestion

logger = logging.getLogger(__name__)

LOSS_TRACE_COLUMNS = ["step", "L_IB", "L_OB", "L_CC", "total", "grad_norm"]


@dataclass(frozen=True)
class BoxLossReport:
    L_IB: float
    L_OB: float
    L_CC: float
    total: float
    step: int
    grad_norm: float = 0.0

    def __post_init__(self):
        for name in ("L_IB", "L_OB", "L_CC", "total"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < -1e-12:
                raise ValueOutOfRange(f"{name} = {v} is not a non-negative finite loss")


@dataclass
class CorrectionResult:
    image: np.ndarray
    loss_trace: List[BoxLossReport]
    final_cross_maps: AttentionMapSet
    state: LatentState
    attention_trace: List[AttentionMapSet] = field(default_factory=list)


# -----------------------------
# Box constraints
# -----------------------------
def _cell(v: float, r: int) -> int:
    return min(r, max(0, int(math.floor(v * r + 0.5))))


def box_cells(box: BoundingBox, resolution: int) -> Tuple[int, int, int, int]:
    """(x0, y0, x1, y1) cell edges of a box on an r x r grid, upper edges exclusive."""
    x0, y0 = _cell(box.x_min, resolution), _cell(box.y_min, resolution)
    x1, y1 = _cell(box.x_max, resolution), _cell(box.y_max, resolution)
    if x1 <= x0 or y1 <= y0:
        raise BoxTooSmall(f"box {box} covers no cell at resolution {resolution}")
    return x0, y0, x1, y1


def rasterize_box(box: BoundingBox, resolution: int, dtype=torch.float64) -> torch.Tensor:
    x0, y0, x1, y1 = box_cells(box, resolution)
    mask = torch.zeros(resolution, resolution, dtype=dtype)
    mask[y0:y1, x0:x1] = 1.0
    return mask


def _top_mean(values: torch.Tensor, count: int, fraction: float) -> torch.Tensor:
    k = max(1, int(math.ceil(fraction * count - 1e-9)))
    return torch.topk(values.reshape(-1), k).values.mean()


def _edge_band(edges: Tuple[int, int], width: int, r: int, dtype) -> torch.Tensor:
    band = torch.zeros(r, dtype=dtype)
    for e in edges:
        band[max(0, e - width): min(r, e + width + 1)] = 1.0
    return band


def box_loss_terms(
    object_map: torch.Tensor,
    box: BoundingBox,
    top_fraction: float,
    corner_band: int,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable (L_IB, L_OB, L_CC) of an r x r map normalized to [0, 1]."""
    if not 0.0 < top_fraction <= 1.0:
        raise PreconditionViolation("top_fraction must lie in (0, 1]")
    if object_map.dim() != 2 or object_map.shape[0] != object_map.shape[1]:
        raise ShapeMismatch(f"object map must be r x r, got {tuple(object_map.shape)}")
    r = int(object_map.shape[0])
    b = rasterize_box(box, r, dtype=object_map.dtype)
    n_in = int(b.sum())
    n_out = r * r - n_in

    l_ib = 1.0 - _top_mean(object_map * b, n_in, top_fraction)
    if n_out:
        l_ob = _top_mean(object_map * (1.0 - b), n_out, top_fraction)
    else:
        l_ob = object_map.new_zeros(())

    x0, y0, x1, y1 = box_cells(box, r)
    terms = []
    for axis, edges in ((0, (x0, x1)), (1, (y0, y1))):
        # axis 0: max over rows gives the per-column (x) profile
        proj_a = object_map.max(dim=axis).values
        proj_b = b.max(dim=axis).values
        band = _edge_band(edges, corner_band, r, object_map.dtype)
        terms.append(((proj_a - proj_b).abs() * band).sum() / band.sum())
    l_cc = 0.5 * (terms[0] + terms[1])
    return l_ib, l_ob, l_cc


def box_losses(
    object_map: Union[AttentionMap, torch.Tensor],
    box: BoundingBox,
    top_fraction: float,
    corner_band: int = 2,
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    step: int = 0,
) -> BoxLossReport:
    values = object_map.values if isinstance(object_map, AttentionMap) else object_map
    with torch.no_grad():
        l_ib, l_ob, l_cc = box_loss_terms(values.detach(), box, top_fraction, corner_band)
    l_ib, l_ob, l_cc = float(l_ib), float(l_ob), float(l_cc)
    total = weights[0] * l_ib + weights[1] * l_ob + weights[2] * l_cc
    return BoxLossReport(L_IB=l_ib, L_OB=l_ob, L_CC=l_cc, total=total, step=step)


def update_latent(state: LatentState, loss_grad: torch.Tensor, alpha_t: float) -> LatentState:
    """z <- z - alpha_t * grad; the step index is unchanged."""
    if loss_grad.shape != state.z.shape:
        raise ShapeMismatch(f"gradient {tuple(loss_grad.shape)} vs latent {tuple(state.z.shape)}")
    if not bool(torch.isfinite(loss_grad).all()):
        raise NonFiniteGradient(f"non-finite gradient at t={state.t}")
    if alpha_t == 0:
        return state
    return state.with_latent((state.z - alpha_t * loss_grad).detach())


# -----------------------------
# Correction loop
# -----------------------------
def object_loss(
    sampler: DualStreamSampler,
    state: LatentState,
    box: BoundingBox,
    config: GuidanceConfig,
    need_grad: bool = True,
) -> Tuple[BoxLossReport, Optional[torch.Tensor]]:
    """Box loss of the aggregated object map at z_t, and its gradient w.r.t. z_t."""
    if sampler.object_column is None:
        raise PreconditionViolation("the prompt has no object to place")
    z = state.z.detach().clone().requires_grad_(need_grad)
    with torch.enable_grad():
        _, maps = sampler.conditional(state.with_latent(z))
        obj = normalize_map(aggregate_token_map(maps, sampler.object_column))
        l_ib, l_ob, l_cc = box_loss_terms(obj, box, config.top_fraction, config.corner_band)
        w = config.loss_weights
        total = w[0] * l_ib + w[1] * l_ob + w[2] * l_cc
        grad = torch.autograd.grad(total, z)[0] if need_grad and total.requires_grad else None
    if need_grad and grad is None:
        grad = torch.zeros_like(state.z)
    parts = (float(l_ib), float(l_ob), float(l_cc))
    report = BoxLossReport(
        L_IB=parts[0],
        L_OB=parts[1],
        L_CC=parts[2],
        total=w[0] * parts[0] + w[1] * parts[1] + w[2] * parts[2],
        step=state.t,
        grad_norm=float(grad.norm()) if grad is not None else 0.0,
    )
    return report, grad


def start_state(
    chosen: CandidateImage,
    config: GuidanceConfig,
    backbone: DiffusionBackbone,
    schedule: SamplerSchedule,
) -> LatentState:
    """Initial T2 latent: the candidate's seed, or its stored latent at the handoff step."""
    if config.handoff == "latent" and chosen.trajectory:
        h = config.handoff_step or max(1, config.T1 // 2)
        z = chosen.trajectory[config.T1 - h]
        t2 = schedule.nearest_step(backbone.schedule(config.T1).alpha_bar(h))
        logger.info("Handing off candidate %d at T1 step %d -> T2 step %d", chosen.index, h, t2)
        return LatentState(z=z.clone(), t=t2, seed=chosen.seed, num_steps=schedule.num_steps)
    return backbone.initial_latent(chosen.seed, schedule.num_steps)


class _DivergenceWatch:
    def __init__(self, patience: int, tolerance: float):
        self.patience = patience
        self.tolerance = tolerance
        self.rises = 0
        self.first: Optional[float] = None
        self.last: Optional[float] = None

    def observe(self, total: float, t: int) -> None:
        if self.first is None:
            self.first = total
        if self.last is not None and total > self.last + self.tolerance:
            self.rises += 1
        else:
            self.rises = 0
        self.last = total
        if self.rises >= self.patience:
            raise DivergenceDetected(f"box loss rose on {self.rises} consecutive steps (t={t}, loss={total:.4f})")

    def finish(self) -> None:
        if self.first is not None and self.last > self.first + self.tolerance:
            raise DivergenceDetected(f"box loss ended at {self.last:.4f}, above its start {self.first:.4f}")


def _run_t2(
    chosen: CandidateImage,
    pair: PromptPair,
    config: GuidanceConfig,
    backbone: DiffusionBackbone,
    box: Optional[BoundingBox],
    record_attention: bool,
) -> CorrectionResult:
    sampler = DualStreamSampler(backbone, pair, config)
    schedule = backbone.schedule(config.T2)
    state = start_state(chosen, config, backbone, schedule)
    trace: List[BoxLossReport] = []
    attention: List[AttentionMapSet] = []
    watch = _DivergenceWatch(config.divergence_patience, config.divergence_tolerance)
    maps = None

    while state.t > 0:
        t = state.t
        alpha = config.alpha_at(t) if box is not None else 0.0
        active = box is not None and config.is_active(t)
        if active:
            report, grad = object_loss(sampler, state, box, config, need_grad=alpha > 0)
            trace.append(report)
            if alpha > 0:
                watch.observe(report.total, t)
                state = update_latent(state, grad, alpha)
        mask = box is not None and (config.mask_window == "always" or (active and alpha > 0))
        state, maps = sampler.denoise_step(state, schedule, mask_overlap=mask)
        if record_attention:
            attention.append(maps.detached())

    if box is not None:
        watch.finish()
    return CorrectionResult(
        image=backbone.decode(state),
        loss_trace=trace,
        final_cross_maps=maps.detached(),
        state=state,
        attention_trace=attention,
    )


def corrected_generate(
    chosen: CandidateImage,
    suggestion: LayoutSuggestion,
    pair: PromptPair,
    config: GuidanceConfig,
    backbone: DiffusionBackbone,
    record_attention: bool = False,
) -> CorrectionResult:
    if not suggestion.needs_correction:
        raise PreconditionViolation("the Layout Agent signalled no changes; re-render instead")
    if pair.object_index is None:
        raise PreconditionViolation("the prompt has no object to place")
    logger.info("Correcting candidate %d towards %s", chosen.index, suggestion.proposed_box)
    result = _run_t2(chosen, pair, config, backbone, suggestion.proposed_box, record_attention)
    if result.loss_trace:
        logger.info(
            "Box loss %.4f -> %.4f over %d active steps",
            result.loss_trace[0].total, result.loss_trace[-1].total, len(result.loss_trace),
        )
    return result


def rerender(
    chosen: CandidateImage,
    pair: PromptPair,
    config: GuidanceConfig,
    backbone: DiffusionBackbone,
    record_attention: bool = False,
) -> CorrectionResult:
    """The chosen candidate on the T2 schedule with stream substitution and no box guidance."""
    return _run_t2(chosen, pair, config, backbone, None, record_attention)


def object_mass_in_box(maps: AttentionMapSet, object_column: int, box: BoundingBox) -> float:
    """Share of the aggregated object attention that falls inside the box."""
    obj = aggregate_token_map(maps, object_column).detach()
    b = rasterize_box(box, int(obj.shape[0]), dtype=obj.dtype)
    total = float(obj.sum())
    return float((obj * b).sum()) / total if total > 0 else 0.0


def write_loss_trace(trace: List[BoxLossReport], path: str) -> None:
    df = pd.DataFrame([asdict(r) for r in trace], columns=LOSS_TRACE_COLUMNS)
    df.to_csv(path, index=False)
