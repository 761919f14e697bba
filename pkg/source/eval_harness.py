# eval_harness.py
# CLIP-Score of the full prompt and of the verb phrase alone, pluggable
# extra scorers, batch summaries and the Layout Agent's box accuracy.
import math
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np
import pandas as pd

from source import settings
from source.errors import EmbedderUnavailable, EmptyBatch, PreconditionViolation, ValueOutOfRange
from source.prompt_engine import PromptPair, to_gerund
from source.reasoning_agents import BoundingBox, LayoutAgent, box_iou

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["run_id", "prompt", "clip_score", "verb_clip_score"]


class Embedder(Protocol):
    name: str

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        ...

    def embed_text(self, text: str) -> np.ndarray:
        ...


@runtime_checkable
class ExtraScoreProvider(Protocol):
    """External metric hook (FID, PickScore, HOI classification). None ships here."""

    name: str

    def score(self, image: np.ndarray, record: "ScoreRecord") -> float:
        ...


class ClipEmbedder:
    """CLIP image/text embeddings via transformers (optional dependency)."""

    name = "clip"

    def __init__(self, model_id: str = settings.CLIP_MODEL, device: str = settings.DEVICE):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise EmbedderUnavailable("transformers is not installed (pip install -r requirements-real.txt)") from e
        try:
            self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
            self.processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as e:
            raise EmbedderUnavailable(f"cannot load {model_id}: {e}") from e
        self._torch = torch
        self.device = device

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        pixels = (np.clip(image, 0, 1) * 255).astype(np.uint8)
        inputs = self.processor(images=pixels, return_tensors="pt").to(self.device)
        with self._torch.no_grad():
            return self.model.get_image_features(**inputs)[0].cpu().numpy().astype(np.float64)

    def embed_text(self, text: str) -> np.ndarray:
        inputs = self.processor(text=[text], return_tensors="pt", padding=True, truncation=True).to(self.device)
        with self._torch.no_grad():
            return self.model.get_text_features(**inputs)[0].cpu().numpy().astype(np.float64)


def build_embedder(name: str, model_id: str = settings.CLIP_MODEL, device: str = settings.DEVICE) -> Optional[Embedder]:
    if name in ("", "none"):
        return None
    if name == "clip":
        return ClipEmbedder(model_id=model_id, device=device)
    raise EmbedderUnavailable(f"unknown embedder: {name!r} (expected none | clip)")


@dataclass
class ScoreRecord:
    run_id: str
    prompt: str
    clip_score: float
    verb_clip_score: float
    extra: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        values = [self.clip_score, self.verb_clip_score, *self.extra.values()]
        if not all(math.isfinite(v) for v in values):
            raise ValueOutOfRange(f"non-finite score in run {self.run_id}")


def score_pair(image: np.ndarray, text: str, embedder: Optional[Embedder]) -> float:
    """CLIP_SCORE_SCALE * max(0, cos(image embedding, text embedding))."""
    if embedder is None:
        raise EmbedderUnavailable("no embedder configured")
    a = np.asarray(embedder.embed_image(image), dtype=np.float64).ravel()
    b = np.asarray(embedder.embed_text(text), dtype=np.float64).ravel()
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    cos = float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    return settings.CLIP_SCORE_SCALE * max(0.0, cos)


def verb_phrase(triplet: Any, gerund_overrides: Optional[Dict[str, str]] = None) -> str:
    verb = (getattr(triplet, "verb", "") or "").strip()
    if not verb:
        raise PreconditionViolation("triplet has no verb")
    return f"a {settings.VERB_PHRASE_SUBJECT} is {to_gerund(verb, gerund_overrides)}"


def verb_score(
    image: np.ndarray,
    triplet: Any,
    embedder: Optional[Embedder],
    gerund_overrides: Optional[Dict[str, str]] = None,
) -> float:
    return score_pair(image, verb_phrase(triplet, gerund_overrides), embedder)


def score_run(
    run_id: str,
    image: np.ndarray,
    pair: PromptPair,
    embedder: Embedder,
    extra_providers: Sequence[ExtraScoreProvider] = (),
    gerund_overrides: Optional[Dict[str, str]] = None,
) -> ScoreRecord:
    record = ScoreRecord(
        run_id=run_id,
        prompt=pair.full_prompt,
        clip_score=score_pair(image, pair.full_prompt, embedder),
        verb_clip_score=verb_score(image, pair.triplet, embedder, gerund_overrides),
    )
    for provider in extra_providers:
        record.extra[provider.name] = float(provider.score(image, record))
    return record


def records_frame(records: Sequence[ScoreRecord]) -> pd.DataFrame:
    extras = sorted({k for r in records for k in r.extra})
    rows = [
        {"run_id": r.run_id, "prompt": r.prompt, "clip_score": r.clip_score,
         "verb_clip_score": r.verb_clip_score, **{k: r.extra.get(k, np.nan) for k in extras}}
        for r in records
    ]
    df = pd.DataFrame(rows, columns=SCORE_COLUMNS + extras)
    return df.sort_values(["prompt", "run_id"], kind="mergesort").reset_index(drop=True)


def batch_report(records: Sequence[ScoreRecord]) -> pd.DataFrame:
    """One-row table: record count and the mean of every metric."""
    if not records:
        raise EmptyBatch("no score records to summarize")
    df = records_frame(records)
    metrics = [c for c in df.columns if c not in ("run_id", "prompt")]
    summary = {"count": len(df)}
    for col in metrics:
        summary[col] = float(df[col].mean())
    return pd.DataFrame([summary], columns=["count"] + metrics)


def _write_with_scale_header(df: pd.DataFrame, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# clip_score_scale={settings.CLIP_SCORE_SCALE:g}\n")
        df.to_csv(f, sep="\t", index=False)


def write_scores(records: Sequence[ScoreRecord], path: str) -> None:
    _write_with_scale_header(records_frame(records), path)


def write_report(records: Sequence[ScoreRecord], path: str) -> None:
    _write_with_scale_header(batch_report(records), path)


def read_scores(path: str) -> List[ScoreRecord]:
    df = pd.read_csv(path, sep="\t", comment="#", dtype={"run_id": str})
    extras = [c for c in df.columns if c not in SCORE_COLUMNS]
    return [
        ScoreRecord(
            run_id=row["run_id"], prompt=row["prompt"],
            clip_score=float(row["clip_score"]), verb_clip_score=float(row["verb_clip_score"]),
            extra={k: float(row[k]) for k in extras if not pd.isna(row[k])},
        )
        for _, row in df.iterrows()
    ]


# -----------------------------
# Layout Agent accuracy
# -----------------------------
def perturb_box(box: BoundingBox, rng: np.random.Generator, scale: float = 0.2, shift: float = 0.1) -> BoundingBox:
    """Rescale about the centre by 1 +/- scale and shift by up to +/- shift, kept inside the image."""
    w = (box.x_max - box.x_min) * rng.uniform(1.0 - scale, 1.0 + scale)
    h = (box.y_max - box.y_min) * rng.uniform(1.0 - scale, 1.0 + scale)
    w, h = min(w, 1.0), min(h, 1.0)
    cx = (box.x_min + box.x_max) / 2 + rng.uniform(-shift, shift)
    cy = (box.y_min + box.y_max) / 2 + rng.uniform(-shift, shift)
    cx = min(max(cx, w / 2), 1.0 - w / 2)
    cy = min(max(cy, h / 2), 1.0 - h / 2)
    return BoundingBox(max(0.0, cx - w / 2), max(0.0, cy - h / 2), min(1.0, cx + w / 2), min(1.0, cy + h / 2))


@dataclass
class LayoutSample:
    candidate: Any  # CandidateImage
    points: Any  # PoseKeypoints
    human_box: BoundingBox
    truth: BoundingBox
    pair: PromptPair


def evaluate_layout_agent(
    agent: LayoutAgent,
    samples: Sequence[LayoutSample],
    seed: int = 0,
    scale: float = 0.2,
    shift: float = 0.1,
) -> Tuple[float, List[float]]:
    """mIoU of the boxes the agent proposes from perturbed ground-truth boxes."""
    if not samples:
        raise EmptyBatch("no layout samples")
    rng = np.random.default_rng(seed)
    ious = []
    for s in samples:
        start = perturb_box(s.truth, rng, scale, shift)
        suggestion = agent.suggest(s.candidate, s.points, s.human_box, start, s.pair)
        ious.append(box_iou(suggestion.proposed_box, s.truth))
    miou = float(np.mean(ious))
    logger.info("Layout Agent mIoU %.4f over %d samples", miou, len(ious))
    return miou, ious
