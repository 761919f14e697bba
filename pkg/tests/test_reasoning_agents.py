import json
import random
from collections import deque

import numpy as np
import pytest
import torch

from source import settings
from source.call_vlm import MockVLMClient
from source.coarse_generator import generate_candidates
from source.diffusion_backbone import GuidanceConfig
from source.errors import (
    BoxOutOfRange,
    DegenerateMap,
    InsufficientKeypoints,
    NoHumanDetected,
    PreconditionViolation,
    UnparsableAgentReply,
)
from source.reasoning_agents import (
    AgentTranscript,
    BoundingBox,
    LayoutAgent,
    LayoutSuggestion,
    PoseKeypoints,
    PoseSelectionAgent,
    StubKeypointDetector,
    box_iou,
    change_gate,
    extract_object_box,
    human_box,
    human_mask,
    image_key,
    parse_box_reply,
    parse_pose_reply,
    parse_visual_attributes,
    scripted_responder,
    select_pose,
    suggest_layout,
)


def _points(*valid):
    pts = [(0.0, 0.0, False)] * settings.NUM_KEYPOINTS
    for i, (x, y) in enumerate(valid):
        pts[i] = (x, y, True)
    return PoseKeypoints(points=tuple(pts))


@pytest.fixture
def candidates(toy, kick_pair):
    return generate_candidates(kick_pair, GuidanceConfig(T1=2, T2=4, k=5), toy)


# -----------------------------
# Otsu
# -----------------------------
def _oracle_box(values):
    lo, hi = values.min(), values.max()
    levels = np.minimum(np.floor((values - lo) / (hi - lo) * 256), 255).astype(int)
    best, best_k = -1.0, None
    for k in range(1, 256):
        fg = levels >= k
        n1, n0 = fg.sum(), (~fg).sum()
        if n0 == 0 or n1 == 0:
            continue
        mu0 = float(levels[~fg].sum()) / float(n0)
        mu1 = float(levels[fg].sum()) / float(n1)
        var = float(n0) * float(n1) * (mu0 - mu1) ** 2
        if var > best:
            best, best_k = var, k
    mask = levels >= best_k

    h, w = mask.shape
    seen = np.zeros_like(mask)
    best_cells = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            cells, queue = [], deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                cells.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            if len(cells) > len(best_cells):
                best_cells = cells
    rows = [p[0] for p in best_cells]
    cols = [p[1] for p in best_cells]
    return [min(cols) / w, min(rows) / h, (max(cols) + 1) / w, (max(rows) + 1) / h]


def test_otsu_block():
    m = np.full((4, 4), 0.1)
    m[1:3, 1:3] = 0.9
    assert extract_object_box(m).as_list() == [0.25, 0.25, 0.75, 0.75]


def test_otsu_constant_map_is_degenerate():
    with pytest.raises(DegenerateMap):
        extract_object_box(np.full((4, 4), 0.3))


def test_otsu_picks_largest_component():
    m = np.zeros((6, 6))
    for r, c in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 1)]:
        m[r, c] = 1.0
    m[4, 4] = m[4, 5] = 1.0
    assert extract_object_box(torch.tensor(m)).as_list() == [0.0, 0.0, 2 / 6, 3 / 6]


def test_otsu_oracle_on_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = rng.random((16, 16))
        assert extract_object_box(m).as_list() == _oracle_box(m)


# -----------------------------
# Keypoints and boxes
# -----------------------------
def test_human_box_tight_and_with_margin():
    pts = _points((0.2, 0.2), (0.6, 0.8))
    assert human_box(pts, margin=0.0).as_list() == [0.2, 0.2, 0.6, 0.8]
    assert human_box(pts, margin=0.05).as_list() == pytest.approx([0.15, 0.15, 0.65, 0.85])
    assert human_box(_points((0.01, 0.5), (0.99, 0.6)), margin=0.05).as_list() == pytest.approx([0.0, 0.45, 1.0, 0.65])


def test_human_box_needs_two_points():
    with pytest.raises(InsufficientKeypoints):
        human_box(_points((0.5, 0.5)))


def test_stub_detector_returns_fixture():
    detector = StubKeypointDetector()
    points = detector.detect(np.random.default_rng(0).random((64, 64, 3)))
    assert len(points.points) == 33
    assert points.source == "fixture"
    box = human_box(points, margin=0.0)
    assert box.as_list() == pytest.approx([0.25, 0.10, 0.55, 0.95])


def test_stub_detector_by_image_hash_and_blank():
    image = np.random.default_rng(1).random((8, 8, 3))
    stored = _points((0.1, 0.1), (0.3, 0.4))
    detector = StubKeypointDetector(annotations={image_key(image): stored}, default_file=None)
    assert detector.detect(image) is stored
    with pytest.raises(NoHumanDetected):
        detector.detect(np.zeros((8, 8, 3)))
    with pytest.raises(NoHumanDetected):
        detector.detect(np.random.default_rng(2).random((8, 8, 3)))


def test_keypoints_validation():
    with pytest.raises(PreconditionViolation):
        PoseKeypoints(points=((0.5, 0.5, True),))
    with pytest.raises(PreconditionViolation):
        PoseKeypoints.from_json({"landmarks": [{"x": 0.5, "y": 0.5, "visibility": 1.0}] * 3})


def test_human_mask_covers_the_figure():
    mask = human_mask(StubKeypointDetector().detect(np.random.default_rng(0).random((4, 4, 3))), 8)
    assert mask.shape == (8, 8) and mask.dtype == bool
    assert mask[4, 3] and not mask[0, 7]
    flat = human_mask(_points((0.1, 0.5), (0.5, 0.5), (0.9, 0.5)), 8)
    assert flat[4].any()


def test_change_gate():
    a = BoundingBox(0.0, 0.0, 0.5, 0.5)
    assert change_gate(a, a, 1.0) is False
    assert change_gate(a, BoundingBox(0.5, 0.5, 1.0, 1.0), 0.01) is True
    b = BoundingBox(0.0, 0.0, 0.5, 0.25)  # IoU 0.5 with a
    assert box_iou(a, b) == 0.5
    assert change_gate(a, b, 0.5) is False
    assert change_gate(a, b, 0.51) is True


def test_extracted_box_holds_builtin_values():
    m = np.full((4, 4), 0.1)
    m[1:3, 1:3] = 0.9
    box = extract_object_box(m)
    assert all(type(v) is float for v in box.as_list())
    assert type(change_gate(box, BoundingBox(0.5, 0.5, 1.0, 1.0), 0.8)) is bool
    assert json.loads(json.dumps({"box": box.as_list(), "gate": change_gate(box, box, 0.8)})) == {
        "box": [0.25, 0.25, 0.75, 0.75],
        "gate": False,
    }


def test_bounding_box_validation():
    for bad in [(0.5, 0.0, 0.5, 1.0), (-0.1, 0.0, 0.5, 0.5), (0.0, 0.0, 1.2, 0.5), (0.0, float("nan"), 0.5, 0.5)]:
        with pytest.raises(BoxOutOfRange):
            BoundingBox(*bad)


# -----------------------------
# Reply parsing
# -----------------------------
@pytest.mark.parametrize(
    "reply,index",
    [("Image 3", 2), ("the best is picture two", 1), ("I choose image #4.", 3), ("Second image.", 1),
     ("5", 4), ("Answer: Image 1 because the arm is raised", 0)],
)
def test_parse_pose_reply(reply, index):
    assert parse_pose_reply(reply, 5) == index


@pytest.mark.parametrize("reply", ["", "none of them", "Image 6", "image 0", "topic 2 of the talk"])
def test_parse_pose_reply_failures(reply):
    with pytest.raises(UnparsableAgentReply):
        parse_pose_reply(reply, 5)


def test_parse_box_reply():
    assert parse_box_reply("proposed box: [0.10, 0.50, 0.40, 0.90]").as_list() == [0.10, 0.50, 0.40, 0.90]
    assert parse_box_reply("box [16, 32, 48, 64]", image_size=(64, 64)).as_list() == [0.25, 0.5, 0.75, 1.0]
    with pytest.raises(UnparsableAgentReply):
        parse_box_reply("move it left")
    with pytest.raises(BoxOutOfRange):
        parse_box_reply("[16, 32, 48, 64]")
    with pytest.raises(BoxOutOfRange):
        parse_box_reply("[0.5, 0.5, 0.2, 0.9]")


def test_parse_visual_attributes():
    reply = "Pose type: crouching\n- contact region: left hand\nproposed box: [0, 0, 1, 1]"
    assert parse_visual_attributes(reply) == (("pose type", "crouching"), ("contact region", "left hand"))


def test_parsers_never_return_out_of_range_values():
    rng = random.Random(0)
    words = ["image", "Image", "picture", "#", "no.", "option", "two", "third", "ten", "the", "box",
             "proposed box:", "[", "]", ",", "-", ".", "pixel", "left", "\n"]

    def number():
        return rng.choice([str(rng.randint(-5, 300)), f"{rng.uniform(-1.5, 2.5):.3f}", str(rng.randint(0, 9))])

    def box():
        return "[" + ", ".join(number() for _ in range(4)) + "]"

    for _ in range(1000):
        parts = [rng.choice([rng.choice(words), number(), box()]) for _ in range(rng.randint(0, 8))]
        text = " ".join(parts)
        try:
            i = parse_pose_reply(text, 5)
            assert 0 <= i < 5
        except UnparsableAgentReply:
            pass
        for size in (None, (64, 64)):
            try:
                b = parse_box_reply(text, image_size=size)
                assert 0.0 <= b.x_min < b.x_max <= 1.0 and 0.0 <= b.y_min < b.y_max <= 1.0
            except UnparsableAgentReply:
                pass


# -----------------------------
# Agents
# -----------------------------
def test_pose_agent_parses_mock_reply(candidates, kick_pair):
    vlm = MockVLMClient(responder=lambda r: "Image 3")
    transcript = AgentTranscript()
    assert PoseSelectionAgent(vlm).select(candidates, kick_pair, transcript) == 2
    request = vlm.requests[0]
    assert len(request.images) == 5 and len(request.exemplars) == 3
    assert request.meta["agent"] == "pose"
    assert "Image 3" in transcript.render()


def test_pose_agent_single_candidate_skips_vlm(candidates, kick_pair):
    vlm = MockVLMClient()
    assert PoseSelectionAgent(vlm).select(candidates[:1], kick_pair) == 0
    assert vlm.requests == []


def test_pose_agent_reasks_after_unreadable_reply(candidates, kick_pair):
    replies = iter(["I like them all", "Image 2"])
    vlm = MockVLMClient(responder=lambda r: next(replies))
    transcript = AgentTranscript()
    assert PoseSelectionAgent(vlm, retries=1).select(candidates, kick_pair, transcript) == 1
    assert [e["attempt"] for e in transcript.entries] == [0, 1]
    assert vlm.requests[1].instruction.endswith(settings.REASK_SUFFIX)


def test_pose_agent_gives_up(candidates, kick_pair):
    vlm = MockVLMClient(responder=lambda r: "no idea")
    with pytest.raises(UnparsableAgentReply):
        PoseSelectionAgent(vlm, retries=2).select(candidates, kick_pair)
    assert len(vlm.requests) == 3


def test_layout_agent_proposes_box(candidates, kick_pair):
    vlm = MockVLMClient(responder=lambda r: "contact region: foot\nproposed box: [0.10, 0.50, 0.40, 0.90]")
    b_h = BoundingBox(0.25, 0.1, 0.55, 0.95)
    b_o = BoundingBox(0.6, 0.1, 0.9, 0.4)
    points = StubKeypointDetector().detect(candidates[0].preview)
    s = LayoutAgent(vlm).suggest(candidates[0], points, b_h, b_o, kick_pair)
    assert s.proposed_box.as_list() == [0.10, 0.50, 0.40, 0.90]
    assert s.needs_correction is True
    assert s.visual_attributes == (("contact region", "foot"),)
    request = vlm.requests[0]
    assert len(request.images) == 1 and len(request.exemplars) == 3
    assert "left_wrist" in request.instruction and str(b_o) in request.instruction


def test_layout_agent_echo_means_no_change(candidates, kick_pair):
    vlm = MockVLMClient(responder=scripted_responder("echo"))
    b_o = BoundingBox(0.6, 0.1, 0.9, 0.4)
    points = StubKeypointDetector().detect(candidates[0].preview)
    s = LayoutAgent(vlm).suggest(candidates[0], points, human_box(points), b_o, kick_pair)
    assert s.needs_correction is False
    assert s.iou == pytest.approx(1.0)


def test_layout_agent_unreadable_reply(candidates, kick_pair):
    vlm = MockVLMClient(responder=lambda r: "move it left")
    points = StubKeypointDetector().detect(candidates[0].preview)
    with pytest.raises(UnparsableAgentReply):
        LayoutAgent(vlm, retries=0).suggest(
            candidates[0], points, human_box(points), BoundingBox(0.6, 0.1, 0.9, 0.4), kick_pair
        )


def test_scripted_mirror_reply(candidates, kick_pair):
    vlm = MockVLMClient(responder=scripted_responder("mirror"))
    b_o = BoundingBox(0.6, 0.1, 0.9, 0.4)
    points = StubKeypointDetector().detect(candidates[0].preview)
    s = LayoutAgent(vlm).suggest(candidates[0], points, human_box(points), b_o, kick_pair)
    assert s.proposed_box.as_list() == pytest.approx([0.1, 0.1, 0.4, 0.4])
    assert s.needs_correction is True
    assert len(s.visual_attributes) == 4


def test_layout_suggestion_gate_must_agree():
    a = BoundingBox(0.0, 0.0, 0.5, 0.5)
    with pytest.raises(PreconditionViolation):
        LayoutSuggestion(extracted_box=a, proposed_box=a, needs_correction=True)
    with pytest.raises(PreconditionViolation):
        LayoutSuggestion(extracted_box=a, proposed_box=BoundingBox(0.5, 0.5, 1, 1), needs_correction=False)


def test_module_level_agent_helpers(candidates, kick_pair):
    vlm = MockVLMClient(responder=scripted_responder("mirror"))
    transcript = AgentTranscript()
    assert select_pose(candidates, kick_pair, vlm, transcript) == 0
    points = StubKeypointDetector().detect(candidates[0].preview)
    b_o = BoundingBox(0.6, 0.1, 0.9, 0.4)
    s = suggest_layout(candidates[0], points, human_box(points), b_o, kick_pair, vlm, transcript, retries=0)
    assert s.proposed_box.as_list() == pytest.approx([0.1, 0.1, 0.4, 0.4])
    assert [r.meta["agent"] for r in vlm.requests] == ["pose", "layout"]
