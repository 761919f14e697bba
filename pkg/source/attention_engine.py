# attention_engine.py
# Attention maps as values: compute (softmax QK^T / sqrt(d)), merge the full
# and intransitive streams, gate self-attention by step, and suppress
# overlap with the object's inverse mask.
import math
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import torch

from source.errors import ResolutionMismatch, ShapeMismatch, ValueOutOfRange

logger = logging.getLogger(__name__)

STREAM_FULL = "full"
STREAM_INTRANS = "intransitive"


def map_resolution(num_positions: int) -> int:
    r = int(round(math.sqrt(num_positions)))
    if r * r != num_positions:
        raise ShapeMismatch(f"{num_positions} positions do not form a square grid")
    return r


# -----------------------------
# Types
# -----------------------------
@dataclass(frozen=True)
class AttentionMap:
    values: torch.Tensor  # (r, r), non-negative
    token_index: int
    layer_id: str
    step: int
    provenance: str = STREAM_FULL

    def __post_init__(self):
        if self.values.dim() != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ShapeMismatch(f"attention map must be r x r, got {tuple(self.values.shape)}")
        v = self.values.detach()
        if not bool(torch.isfinite(v).all()):
            raise ValueOutOfRange("attention map has non-finite values")
        if bool((v < 0).any()):
            raise ValueOutOfRange("attention map has negative values")

    @property
    def resolution(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class AttentionMapSet:
    """
    Maps captured at one denoising step.

    cross[layer] has shape (..., positions, tokens) (a leading head axis is
    allowed); self_[layer] has shape (..., positions, positions).
    provenance[layer][n] names the stream column n came from.
    """

    cross: Dict[str, torch.Tensor]
    self_: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    provenance: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def captured(cls, cross: Mapping[str, torch.Tensor], self_: Mapping[str, torch.Tensor], step: int, stream: str):
        prov = {layer: (stream,) * int(a.shape[-1]) for layer, a in cross.items()}
        return cls(cross=dict(cross), self_=dict(self_), step=step, provenance=prov)

    @property
    def layer_ids(self) -> List[str]:
        return list(self.cross.keys())

    def resolution(self, layer_id: str) -> int:
        return map_resolution(int(self.cross[layer_id].shape[-2]))

    def num_tokens(self, layer_id: Optional[str] = None) -> int:
        layer_id = layer_id or self.layer_ids[0]
        return int(self.cross[layer_id].shape[-1])

    def token_map(self, layer_id: str, token_index: int) -> AttentionMap:
        a = self.cross[layer_id]
        col = a[..., token_index]
        while col.dim() > 1:
            col = col.mean(dim=0)
        r = map_resolution(col.shape[0])
        prov = self.provenance.get(layer_id, ())
        return AttentionMap(
            values=col.reshape(r, r),
            token_index=token_index,
            layer_id=layer_id,
            step=self.step,
            provenance=prov[token_index] if token_index < len(prov) else STREAM_FULL,
        )

    def detached(self) -> "AttentionMapSet":
        return AttentionMapSet(
            cross={k: v.detach().cpu() for k, v in self.cross.items()},
            self_={k: v.detach().cpu() for k, v in self.self_.items()},
            step=self.step,
            provenance=dict(self.provenance),
        )

    def check_stochastic(self, tol: float = 1e-5) -> None:
        """Rows of captured (unmerged) maps are softmax rows."""
        for name, group in (("cross", self.cross), ("self", self.self_)):
            for layer, a in group.items():
                err = float((a.detach().sum(dim=-1) - 1.0).abs().max())
                if err > tol:
                    raise ValueOutOfRange(f"{name} rows of {layer} are off by {err:.2e}")


@dataclass(frozen=True)
class QKInputs:
    Q: torch.Tensor  # (positions, d)
    K: torch.Tensor  # (tokens, d)
    d: int

    def __post_init__(self):
        if self.d <= 0:
            raise ShapeMismatch("embedding width d must be positive")
        if self.Q.shape[-1] != self.d or self.K.shape[-1] != self.d:
            raise ShapeMismatch(f"Q {tuple(self.Q.shape)} / K {tuple(self.K.shape)} do not match d={self.d}")
        if not (bool(torch.isfinite(self.Q).all()) and bool(torch.isfinite(self.K).all())):
            raise ValueOutOfRange("Q/K contain non-finite entries")


# -----------------------------
# Operations
# -----------------------------
def compute_attention(qk: QKInputs) -> torch.Tensor:
    """Row-stochastic (positions x tokens) map: Softmax(Q K^T / sqrt(d))."""
    scores = qk.Q @ qk.K.transpose(-1, -2) / math.sqrt(qk.d)
    return torch.softmax(scores, dim=-1)


def merge_cross_attention(
    full_maps: AttentionMapSet,
    intrans_maps: AttentionMapSet,
    alignment: Mapping[int, int],
) -> AttentionMapSet:
    """
    Columns of tokens that exist in the intransitive prompt are taken from
    the intransitive stream; every other column stays the full-stream one.
    `alignment` maps full-stream columns to intransitive-stream columns.
    """
    if set(full_maps.cross) != set(intrans_maps.cross):
        raise ResolutionMismatch("streams captured different layers")
    if not alignment:
        return full_maps

    src = sorted(alignment)
    dst = [alignment[i] for i in src]
    merged: Dict[str, torch.Tensor] = {}
    provenance: Dict[str, Tuple[str, ...]] = {}
    for layer, a in full_maps.cross.items():
        b = intrans_maps.cross[layer]
        if a.shape[:-1] != b.shape[:-1]:
            raise ResolutionMismatch(f"{layer}: {tuple(a.shape)} vs {tuple(b.shape)}")
        if max(src) >= a.shape[-1] or max(dst) >= b.shape[-1]:
            raise ShapeMismatch(f"{layer}: alignment points past the token axis")
        out = a.clone()
        out[..., src] = b[..., dst]
        merged[layer] = out
        prov = list(full_maps.provenance.get(layer, (STREAM_FULL,) * a.shape[-1]))
        intrans_prov = intrans_maps.provenance.get(layer, (STREAM_INTRANS,) * b.shape[-1])
        for i, j in zip(src, dst):
            prov[i] = intrans_prov[j]
        provenance[layer] = tuple(prov)
    return AttentionMapSet(cross=merged, self_=dict(full_maps.self_), step=full_maps.step, provenance=provenance)


def merge_self_attention(full_self: torch.Tensor, intrans_self: torch.Tensor, step: int, gamma: int) -> torch.Tensor:
    """Intransitive-stream self-attention once t > gamma, the full-stream grid otherwise."""
    if full_self.shape != intrans_self.shape:
        raise ShapeMismatch(f"self-attention grids differ: {tuple(full_self.shape)} vs {tuple(intrans_self.shape)}")
    return intrans_self if step > gamma else full_self


def normalize_map(values: torch.Tensor) -> torch.Tensor:
    """Scale a map into [0, 1] by its maximum; an all-zero map stays zero."""
    peak = values.max()
    if float(peak) <= 0.0:
        return torch.zeros_like(values)
    return values / peak


def inverse_mask(object_map: torch.Tensor) -> torch.Tensor:
    """1 - A_m for a map already normalized into [0, 1]."""
    v = object_map.detach()
    if bool((v < 0).any()) or bool((v > 1).any()) or not bool(torch.isfinite(v).all()):
        raise ValueOutOfRange("object map must lie in [0, 1]; normalize it first")
    return 1.0 - object_map


def _mask_layer(a: torch.Tensor, mask: torch.Tensor, object_index: int, layer: str) -> torch.Tensor:
    flat = mask.reshape(-1)
    if flat.shape[0] != a.shape[-2]:
        raise ShapeMismatch(f"{layer}: mask has {flat.shape[0]} cells, maps have {a.shape[-2]} positions")
    out = a * flat.to(a.dtype).unsqueeze(-1)
    out[..., object_index] = a[..., object_index]
    return out


def apply_inverse_mask(mask: torch.Tensor, maps: AttentionMapSet, object_index: int) -> AttentionMapSet:
    """A_n <- mask * A_n for every token n != m; token m is left untouched."""
    out = {layer: _mask_layer(a, mask, object_index, layer) for layer, a in maps.cross.items()}
    return AttentionMapSet(cross=out, self_=dict(maps.self_), step=maps.step, provenance=dict(maps.provenance))


def eliminate_overlap(maps: AttentionMapSet, object_index: int) -> AttentionMapSet:
    """Inverse-mask every layer with its own head-averaged, max-normalized object map."""
    out: Dict[str, torch.Tensor] = {}
    for layer, a in maps.cross.items():
        m = maps.token_map(layer, object_index).values
        out[layer] = _mask_layer(a, inverse_mask(normalize_map(m)), object_index, layer)
    return AttentionMapSet(cross=out, self_=dict(maps.self_), step=maps.step, provenance=dict(maps.provenance))


def aggregate_token_map(maps: AttentionMapSet, token_index: int, resolution: Optional[int] = None) -> torch.Tensor:
    """Mean of a token's maps over the layers at one resolution (coarsest by default)."""
    layers = maps.layer_ids
    if not layers:
        raise ShapeMismatch("no cross-attention layers captured")
    res = resolution or min(maps.resolution(layer) for layer in layers)
    picked = [maps.token_map(layer, token_index).values for layer in layers if maps.resolution(layer) == res]
    if not picked:
        raise ResolutionMismatch(f"no layer at resolution {res}")
    return torch.stack(picked).mean(dim=0)
