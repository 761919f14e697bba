# reasoning_agents.py
# Pose Selection Agent and Layout Agent over a VLM client, Otsu box
# extraction from the object's attention map, pose keypoints and the
# change gate that decides whether correction runs at all.
import os
import re
import json
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from jsonschema import Draft202012Validator
from jsonschema.exceptions import ValidationError
from PIL import Image, ImageDraw
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from source import settings
from source.attention_engine import AttentionMap
from source.call_vlm import VLMClient, VLMRequest, image_to_png
from source.coarse_generator import CandidateImage
from source.errors import (
    BoxOutOfRange,
    DegenerateMap,
    InsufficientKeypoints,
    NoHumanDetected,
    PreconditionViolation,
    UnparsableAgentReply,
)
from source.prompt_engine import PromptPair

logger = logging.getLogger(__name__)

OTSU_LEVELS = 256


# -----------------------------
# Boxes
# -----------------------------
@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        # fields are builtin floats so boxes serialize as JSON
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise BoxOutOfRange(f"non-finite box {vals}")
        if not (0.0 <= self.x_min < self.x_max <= 1.0 and 0.0 <= self.y_min < self.y_max <= 1.0):
            raise BoxOutOfRange(f"box {vals} breaks 0 <= min < max <= 1")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def __str__(self) -> str:
        return "[" + ", ".join(f"{v:.4f}" for v in self.as_list()) + "]"


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    ih = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def change_gate(b_o: BoundingBox, b_hat: BoundingBox, threshold: float) -> bool:
    """True when the proposed box moved enough to warrant correction (IoU < threshold)."""
    return bool(box_iou(b_o, b_hat) < threshold)


# -----------------------------
# Otsu box extraction
# -----------------------------
def _to_numpy(values: Union[AttentionMap, torch.Tensor, np.ndarray]) -> np.ndarray:
    if isinstance(values, AttentionMap):
        values = values.values
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def quantize_levels(values: np.ndarray, levels: int = OTSU_LEVELS) -> np.ndarray:
    """Min-max scale to integer levels 0..levels-1."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        raise DegenerateMap("map is constant; no threshold exists")
    scaled = (values - lo) / (hi - lo)
    return np.clip(np.floor(scaled * levels), 0, levels - 1).astype(np.int64)


def otsu_threshold(level_map: np.ndarray, levels: int = OTSU_LEVELS) -> int:
    """
    Level k maximizing the between-class variance w0*w1*(mu0 - mu1)^2 of the
    split {< k} / {>= k}; the first maximizer wins.
    """
    hist = np.bincount(level_map.ravel(), minlength=levels).astype(np.float64)
    idx = np.arange(levels, dtype=np.float64)
    total, total_sum = hist.sum(), (hist * idx).sum()
    w0 = np.cumsum(hist)[:-1]  # classes for k = 1..levels-1
    s0 = np.cumsum(hist * idx)[:-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(valid, s0 / w0, 0.0)
        mu1 = np.where(valid, (total_sum - s0) / w1, 0.0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    if not valid.any():
        raise DegenerateMap("map has a single level")
    return int(np.argmax(between)) + 1


def largest_component_box(mask: np.ndarray) -> BoundingBox:
    """Tight box (normalized, cell edges) of the largest 8-connected component."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        raise DegenerateMap("threshold left no foreground")
    sizes = np.bincount(labels.ravel())[1:]
    largest = int(np.argmax(sizes)) + 1
    rows, cols = np.nonzero(labels == largest)
    h, w = mask.shape
    return BoundingBox(cols.min() / w, rows.min() / h, (cols.max() + 1) / w, (rows.max() + 1) / h)


def extract_object_box(object_map: Union[AttentionMap, torch.Tensor, np.ndarray]) -> BoundingBox:
    values = _to_numpy(object_map)
    if values.ndim != 2:
        raise DegenerateMap(f"expected a 2-D map, got shape {values.shape}")
    if (values < 0).any():
        raise DegenerateMap("object map has negative values")
    levels = quantize_levels(values)
    k = otsu_threshold(levels)
    return largest_component_box(levels >= k)


# -----------------------------
# Keypoints
# -----------------------------
POSE_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "properties": {
        "source": {"type": "string"},
        "landmarks": {
            "type": "array",
            "minItems": settings.NUM_KEYPOINTS,
            "maxItems": settings.NUM_KEYPOINTS,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "x": {"type": "number"},
                    "y": {"type": "number"},
                    "visibility": {"type": "number", "minimum": 0, "maximum": 1},
                },
                "required": ["x", "y", "visibility"],
            },
        },
    },
    "required": ["landmarks"],
}


@dataclass(frozen=True)
class PoseKeypoints:
    points: Tuple[Tuple[float, float, bool], ...]  # (x, y, valid), standard landmark order
    source: str = "stub"

    def __post_init__(self):
        if len(self.points) != settings.NUM_KEYPOINTS:
            raise PreconditionViolation(f"expected {settings.NUM_KEYPOINTS} keypoints, got {len(self.points)}")
        for i, (x, y, ok) in enumerate(self.points):
            if ok and not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise PreconditionViolation(f"keypoint {i} ({x}, {y}) lies outside the image")

    @property
    def valid_points(self) -> List[Tuple[float, float]]:
        return [(x, y) for x, y, ok in self.points if ok]

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "PoseKeypoints":
        try:
            Draft202012Validator(POSE_SCHEMA).validate(data)
        except ValidationError as e:
            raise PreconditionViolation(f"bad pose annotation: {e.message}") from e
        pts = []
        for lm in data["landmarks"]:
            x, y, vis = float(lm["x"]), float(lm["y"]), float(lm["visibility"])
            inside = 0.0 <= x <= 1.0 and 0.0 <= y <= 1.0
            pts.append((x, y, vis >= settings.KEYPOINT_VISIBILITY and inside))
        return cls(points=tuple(pts), source=str(data.get("source", "stub")))

    def serialize(self) -> str:
        """One line per valid landmark, as sent to the Layout Agent."""
        lines = [
            f"{name}: ({x:.3f}, {y:.3f})"
            for name, (x, y, ok) in zip(settings.POSE_LANDMARK_NAMES, self.points)
            if ok
        ]
        return "\n".join(lines)


def load_pose_annotation(path: str) -> PoseKeypoints:
    with open(path, "r", encoding="utf-8") as f:
        return PoseKeypoints.from_json(json.load(f))


def image_key(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(np.asarray(image, dtype=np.float64))
    return hashlib.sha256(arr.tobytes()).hexdigest()


class KeypointDetector:
    name = "base"

    def detect(self, image: np.ndarray) -> PoseKeypoints:
        raise NotImplementedError


class StubKeypointDetector(KeypointDetector):
    """Returns stored annotations: by image hash, else the default skeleton."""

    name = "stub"

    def __init__(
        self,
        annotations: Optional[Dict[str, PoseKeypoints]] = None,
        default: Optional[PoseKeypoints] = None,
        default_file: Optional[str] = settings.pose_default_file,
    ):
        self.annotations = dict(annotations or {})
        if default is None and default_file and os.path.isfile(default_file):
            default = load_pose_annotation(default_file)
        self.default = default

    def detect(self, image: np.ndarray) -> PoseKeypoints:
        arr = np.asarray(image, dtype=np.float64)
        if arr.size == 0 or float(np.ptp(arr)) == 0.0:
            raise NoHumanDetected("blank image")
        found = self.annotations.get(image_key(arr), self.default)
        if found is None:
            raise NoHumanDetected("no stored annotation for this image")
        return found


class MediaPipeKeypointDetector(KeypointDetector):
    """33-landmark full-body detector (mediapipe, optional dependency)."""

    name = "mediapipe"

    def __init__(self, min_detection_confidence: float = 0.5):
        try:
            import mediapipe as mp
        except ImportError as e:
            raise NoHumanDetected("mediapipe is not installed (pip install -r requirements-real.txt)") from e
        self.mp_pose = mp.solutions.pose
        self.pose = self.mp_pose.Pose(static_image_mode=True, min_detection_confidence=min_detection_confidence)

    def detect(self, image: np.ndarray) -> PoseKeypoints:
        arr = np.asarray(image, dtype=np.float64)
        if arr.size == 0 or float(np.ptp(arr)) == 0.0:
            raise NoHumanDetected("blank image")
        rgb = (np.clip(arr, 0, 1) * 255).astype(np.uint8)
        results = self.pose.process(rgb)
        if not results.pose_landmarks:
            raise NoHumanDetected("no pose landmarks detected")
        landmarks = [
            {"x": lm.x, "y": lm.y, "visibility": min(1.0, max(0.0, lm.visibility))}
            for lm in results.pose_landmarks.landmark
        ]
        return PoseKeypoints.from_json({"source": self.name, "landmarks": landmarks})


def human_box(points: PoseKeypoints, margin: float = settings.HUMAN_BOX_MARGIN) -> BoundingBox:
    pts = points.valid_points
    if len(pts) < 2:
        raise InsufficientKeypoints(f"need at least 2 valid keypoints, got {len(pts)}")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = max(0.0, min(xs) - margin), min(1.0, max(xs) + margin)
    y0, y1 = max(0.0, min(ys) - margin), min(1.0, max(ys) + margin)
    if x1 <= x0 or y1 <= y0:
        raise InsufficientKeypoints("valid keypoints span no area")
    return BoundingBox(x0, y0, x1, y1)


def human_mask(points: PoseKeypoints, resolution: int) -> np.ndarray:
    """Convex hull of the valid keypoints rasterized on a resolution x resolution grid."""
    pts = np.array(points.valid_points, dtype=np.float64) * resolution
    if len(pts) < 2:
        raise InsufficientKeypoints(f"need at least 2 valid keypoints, got {len(pts)}")
    try:
        polygon = [tuple(pts[i]) for i in ConvexHull(pts).vertices]
    except (QhullError, ValueError):
        # collinear or too few points for a hull
        (x0, y0), (x1, y1) = pts.min(axis=0), pts.max(axis=0)
        polygon = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    canvas = Image.new("L", (resolution, resolution), 0)
    ImageDraw.Draw(canvas).polygon(polygon, fill=1, outline=1)
    return np.asarray(canvas, dtype=bool)


# -----------------------------
# Reply parsing
# -----------------------------
_IMAGE_WORDS = r"(?<![a-z])(?:image|picture|pic|photo|candidate|option|number|no\.?|#)"
_NUMBER_WORDS = "|".join(sorted(settings.NUMBER_WORDS, key=len, reverse=True))
_POSE_DIGIT_RE = re.compile(_IMAGE_WORDS + r"\s*#?\s*(\d+)\b", re.IGNORECASE)
_POSE_WORD_RE = re.compile(_IMAGE_WORDS + r"\s+(" + _NUMBER_WORDS + r")\b", re.IGNORECASE)
_POSE_ORDINAL_RE = re.compile(
    r"\b(" + _NUMBER_WORDS + r")\s+(?:image|picture|pic|photo|candidate|option)\b", re.IGNORECASE
)
_POSE_BARE_RE = re.compile(r"^\s*(\d+)\s*[.)]?\s*$")
_NUM = r"\s*(-?\d+(?:\.\d+)?)\s*"
_BOX_RE = re.compile(r"\[" + ",".join([_NUM] * 4) + r"\]")
_ATTR_RE = re.compile(
    r"^\s*[-*]?\s*(" + "|".join(re.escape(a) for a in settings.VISUAL_ATTRIBUTES) + r")\s*:\s*(.+?)\s*$",
    re.IGNORECASE | re.MULTILINE,
)


def parse_pose_reply(text: str, k: int) -> int:
    """1-based image reference in a reply to a 0-based index in [0, k)."""
    text = text or ""
    n: Optional[int] = None
    m = _POSE_DIGIT_RE.search(text)
    if m:
        n = int(m.group(1))
    else:
        m = _POSE_WORD_RE.search(text) or _POSE_ORDINAL_RE.search(text)
        if m:
            n = settings.NUMBER_WORDS[m.group(1).lower()]
        else:
            m = _POSE_BARE_RE.match(text)
            if m:
                n = int(m.group(1))
    if n is None:
        raise UnparsableAgentReply("no image reference in reply", text)
    if not 1 <= n <= k:
        raise UnparsableAgentReply(f"image {n} is outside 1..{k}", text)
    return n - 1


def parse_box_reply(text: str, image_size: Optional[Tuple[int, int]] = None) -> BoundingBox:
    """First [x_min, y_min, x_max, y_max] group; pixel values need the (width, height)."""
    m = _BOX_RE.search(text or "")
    if not m:
        raise UnparsableAgentReply("no [x_min, y_min, x_max, y_max] group in reply", text)
    vals = [float(g) for g in m.groups()]
    if all(0.0 <= v <= 1.0 for v in vals):
        return BoundingBox(*vals)
    if image_size is not None and all(v >= 0.0 for v in vals):
        w, h = image_size
        return BoundingBox(vals[0] / w, vals[1] / h, vals[2] / w, vals[3] / h)
    raise BoxOutOfRange(f"box {vals} is neither normalized nor a pixel box", text)


def parse_visual_attributes(text: str) -> Tuple[Tuple[str, str], ...]:
    found: Dict[str, str] = {}
    for m in _ATTR_RE.finditer(text or ""):
        found.setdefault(m.group(1).lower(), m.group(2))
    return tuple((a, found[a]) for a in settings.VISUAL_ATTRIBUTES if a in found)


# -----------------------------
# Fixtures and transcript
# -----------------------------
def load_exemplars(directory: str) -> Tuple[str, ...]:
    exemplars = []
    for i in (1, 2, 3):
        path = os.path.join(directory, f"{i}.txt")
        if not os.path.isfile(path):
            raise PreconditionViolation(f"missing few-shot exemplar {path}")
        with open(path, "r", encoding="utf-8") as f:
            exemplars.append(f.read().strip())
    return tuple(exemplars)


def load_guidelines(path: str = settings.guidelines_file) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read().strip()


class AgentTranscript:
    """Every request/reply the agents exchanged during one run."""

    def __init__(self):
        self.entries: List[Dict[str, Any]] = []

    def add(self, agent: str, attempt: int, request: VLMRequest, reply: str, cached: bool) -> None:
        self.entries.append({
            "agent": agent,
            "attempt": attempt,
            "request_hash": request.content_hash(),
            "images": len(request.images),
            "cached": cached,
            "instruction": request.instruction,
            "reply": reply,
        })

    def render(self) -> str:
        blocks = []
        for e in self.entries:
            blocks.append(
                f"### {e['agent']} attempt {e['attempt']} request={e['request_hash'][:16]} "
                f"images={e['images']} cached={e['cached']}\n"
                f"--- instruction\n{e['instruction']}\n--- reply\n{e['reply']}\n"
            )
        return "\n".join(blocks)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.render())


# -----------------------------
# Agents
# -----------------------------
def _ask(
    agent: str,
    vlm: VLMClient,
    build: Callable[[str], VLMRequest],
    parse: Callable[[str], Any],
    retries: int,
    transcript: Optional[AgentTranscript],
):
    """Send, parse, and re-ask with a format reminder until the retry budget runs out."""
    suffix = ""
    last: Optional[UnparsableAgentReply] = None
    for attempt in range(retries + 1):
        request = build(suffix)
        response = vlm.complete(request)
        if transcript is not None:
            transcript.add(agent, attempt, request, response.text, response.cached)
        try:
            return parse(response.text), response.text
        except UnparsableAgentReply as e:
            last = e
            logger.warning("%s reply unreadable (attempt %d/%d): %s", agent, attempt + 1, retries + 1, e)
            suffix = settings.REASK_SUFFIX
    raise last


class PoseSelectionAgent:
    DEFAULT_INSTRUCTION = (
        "Task: pick the image whose human pose best performs the action in the prompt.\n"
        "Prompt: \"{prompt}\"\n"
        "The {k} candidate images are attached in order as Image 1 to Image {k}.\n"
        "Judge only the body pose and how it fits the action; ignore image quality.\n"
        "Answer with one line of the form \"Image N\"."
    )

    def __init__(
        self,
        vlm: VLMClient,
        exemplars: Optional[Sequence[str]] = None,
        retries: int = settings.AGENT_RETRIES,
        instruction: Optional[str] = None,
    ):
        self.vlm = vlm
        self.exemplars = tuple(exemplars) if exemplars is not None else load_exemplars(settings.pose_fewshot_path)
        self.retries = retries
        self.instruction = instruction or self.DEFAULT_INSTRUCTION

    def select(
        self,
        candidates: Sequence[CandidateImage],
        pair: PromptPair,
        transcript: Optional[AgentTranscript] = None,
    ) -> int:
        k = len(candidates)
        if k < 1:
            raise PreconditionViolation("no candidates to choose from")
        if k == 1:
            return 0
        images = tuple(image_to_png(c.preview) for c in candidates)
        text = self.instruction.format(prompt=pair.full_prompt, k=k)

        def build(suffix: str) -> VLMRequest:
            return VLMRequest(
                instruction=text + suffix,
                images=images,
                exemplars=self.exemplars,
                max_images=k + 1,
                meta={"agent": "pose", "k": k},
            )

        index, _ = _ask("pose", self.vlm, build, lambda r: parse_pose_reply(r, k), self.retries, transcript)
        logger.info("Pose Selection Agent chose candidate %d of %d", index, k)
        return index


@dataclass(frozen=True)
class LayoutSuggestion:
    extracted_box: BoundingBox
    proposed_box: BoundingBox
    needs_correction: bool
    rationale: str = ""
    visual_attributes: Tuple[Tuple[str, str], ...] = ()
    threshold: float = settings.CHANGE_THRESHOLD

    def __post_init__(self):
        iou = box_iou(self.extracted_box, self.proposed_box)
        if not self.needs_correction and iou < self.threshold:
            raise PreconditionViolation(f"no-change suggestion with IoU {iou:.3f} < {self.threshold}")
        if self.needs_correction and iou >= self.threshold:
            raise PreconditionViolation(f"correction requested with IoU {iou:.3f} >= {self.threshold}")

    @property
    def iou(self) -> float:
        return box_iou(self.extracted_box, self.proposed_box)


class LayoutAgent:
    DEFAULT_INSTRUCTION = (
        "{guidelines}\n\n"
        "Prompt: \"{prompt}\"\n"
        "The attached image shows the selected pose.\n"
        "Human keypoints (x, y), normalized to [0, 1]:\n{keypoints}\n"
        "Human box b_h: {b_h}\n"
        "Current object box b_o for \"{object}\": {b_o}\n\n"
        "Reason step by step. First describe these visual attributes, one per line:\n"
        "{attributes}\n"
        "Then give the new object box on its own line as\n"
        "proposed box: [x_min, y_min, x_max, y_max]\n"
        "with values normalized to [0, 1]. Repeat b_o unchanged if it already fits."
    )

    def __init__(
        self,
        vlm: VLMClient,
        exemplars: Optional[Sequence[str]] = None,
        guidelines: Optional[str] = None,
        threshold: float = settings.CHANGE_THRESHOLD,
        retries: int = settings.AGENT_RETRIES,
        instruction: Optional[str] = None,
    ):
        self.vlm = vlm
        self.exemplars = tuple(exemplars) if exemplars is not None else load_exemplars(settings.fewshot_path)
        self.guidelines = guidelines if guidelines is not None else load_guidelines()
        self.threshold = threshold
        self.retries = retries
        self.instruction = instruction or self.DEFAULT_INSTRUCTION

    def suggest(
        self,
        selected: CandidateImage,
        points: PoseKeypoints,
        b_h: BoundingBox,
        b_o: BoundingBox,
        pair: PromptPair,
        transcript: Optional[AgentTranscript] = None,
    ) -> LayoutSuggestion:
        text = self.instruction.format(
            guidelines=self.guidelines,
            prompt=pair.full_prompt,
            keypoints=points.serialize(),
            b_h=b_h,
            b_o=b_o,
            object=pair.triplet.object,
            attributes="\n".join(f"{a}: ..." for a in settings.VISUAL_ATTRIBUTES),
        )
        image = image_to_png(selected.preview)
        h, w = selected.preview.shape[:2]

        def build(suffix: str) -> VLMRequest:
            return VLMRequest(
                instruction=text + suffix,
                images=(image,),
                exemplars=self.exemplars,
                max_images=2,
                meta={"agent": "layout", "b_o": b_o.as_list(), "b_h": b_h.as_list()},
            )

        proposed, reply = _ask(
            "layout", self.vlm, build, lambda r: parse_box_reply(r, (w, h)), self.retries, transcript
        )
        needs = change_gate(b_o, proposed, self.threshold)
        logger.info(
            "Layout Agent proposed %s (IoU %.3f with %s): %s",
            proposed, box_iou(b_o, proposed), b_o, "correct" if needs else "no changes",
        )
        return LayoutSuggestion(
            extracted_box=b_o,
            proposed_box=proposed,
            needs_correction=needs,
            rationale=reply,
            visual_attributes=parse_visual_attributes(reply),
            threshold=self.threshold,
        )


def select_pose(
    candidates: Sequence[CandidateImage],
    pair: PromptPair,
    vlm: VLMClient,
    transcript: Optional[AgentTranscript] = None,
    **kwargs,
) -> int:
    return PoseSelectionAgent(vlm, **kwargs).select(candidates, pair, transcript)


def suggest_layout(
    selected: CandidateImage,
    points: PoseKeypoints,
    b_h: BoundingBox,
    b_o: BoundingBox,
    pair: PromptPair,
    vlm: VLMClient,
    transcript: Optional[AgentTranscript] = None,
    **kwargs,
) -> LayoutSuggestion:
    return LayoutAgent(vlm, **kwargs).suggest(selected, points, b_h, b_o, pair, transcript)


# -----------------------------
# Scripted replies for the offline client
# -----------------------------
def scripted_responder(layout_mode: str = "mirror") -> Callable[[VLMRequest], str]:
    """
    Deterministic replies: the pose agent always gets "Image 1"; the layout
    agent gets b_o mirrored left-right ("mirror") or repeated ("echo").
    """
    if layout_mode not in ("mirror", "echo"):
        raise PreconditionViolation(f"unknown mock layout mode: {layout_mode!r}")

    def respond(request: VLMRequest) -> str:
        if request.meta.get("agent") == "pose":
            return "Image 1"
        x0, y0, x1, y1 = request.meta["b_o"]
        if layout_mode == "mirror":
            x0, x1 = 1.0 - x1, 1.0 - x0
        return (
            "pose type: as shown\n"
            "body orientation: facing the viewer\n"
            "object relation: within reach of the hands\n"
            "contact region: hands\n"
            f"proposed box: [{x0:.6f}, {y0:.6f}, {x1:.6f}, {y1:.6f}]"
        )

    return respond
