import os

# Guidance Params
# Denoising steps of the coarse stage (candidate previews).
T1 = 10
# Denoising steps of the correction stage.
T2 = 50
# Number of coarse candidates handed to the Pose Selection Agent.
K_CANDIDATES = 5
# Self-attention substitution is active once the countdown step t > GAMMA.
GAMMA = 5
# Classifier-free guidance scale s.
CFG_SCALE = 7.5
# Peak latent step size. Decays linearly to 0 across the loss-active window.
# Toy units; real backbones need their own value.
ALPHA_MAX = 20.0
# Weights (w_IB, w_OB, w_CC) of the box constraints.
LOSS_WEIGHTS = (1.0, 1.0, 1.0)
# IoU below which the Layout Agent's box counts as a real change.
CHANGE_THRESHOLD = 0.8
# Leading share of the T2 steps that receive latent updates.
LOSS_ACTIVE_FRACTION = 0.6
# Share of cells averaged by the inner/outer box constraints.
TOP_FRACTION = 0.2
# Half width (cells) of the corner-constraint band around each box edge.
CORNER_BAND = 2
# Consecutive rising active steps before a correction run is abandoned.
DIVERGENCE_PATIENCE = 10
DIVERGENCE_TOLERANCE = 1e-4

# Sampler
ALPHA_BAR_START = 0.99
ALPHA_BAR_END = 0.05

# Agents
HUMAN_BOX_MARGIN = 0.02
AGENT_RETRIES = 2
VLM_MAX_RETRIES = 2
VLM_MIN_INTERVAL = 1.0
VLM_MODEL = "gpt-4o"
VLM_API_KEY_ENV = "OPENAI_API_KEY"
REASK_SUFFIX = (
    "\n\nYour previous answer could not be read. "
    "Answer again and follow the required output format exactly."
)

# Evaluation
# CLIP-Score = CLIP_SCORE_SCALE * max(0, cosine similarity).
CLIP_SCORE_SCALE = 100.0
CLIP_MODEL = "openai/clip-vit-base-patch32"
VERB_PHRASE_SUBJECT = "person"

# Backbones
SD_MODEL_ID = "runwayml/stable-diffusion-v1-5"
DEVICE = "cpu"

# FILE PATH
current_file = os.path.abspath(__file__)
project_root = os.path.dirname(os.path.dirname(current_file))  # go up two levels
fixtures_path = os.path.join(project_root, "fixtures")
fewshot_path = os.path.join(fixtures_path, "fewshot")
pose_fewshot_path = os.path.join(fewshot_path, "pose")
guidelines_file = os.path.join(fixtures_path, "guidelines_v1.txt")
pose_default_file = os.path.join(fixtures_path, "pose", "standing.json")
runs_path = os.path.join(project_root, "runs")
dumps_path = os.path.join(project_root, "dumps")
vlm_cache_path = os.path.join(project_root, "cache", "vlm")

# NAME
candidates_subdir = "candidates"
manifest_name = "manifest.json"
agent_log_name = "agent_log.txt"
final_image_name = "final.png"
loss_trace_name = "loss_trace.csv"
scores_name = "scores.tsv"
attention_name = "attention.npz"
human_mask_name = "human_mask.png"

# Module sets selectable from the CLI. "sd" is the plain backbone.
MODULE_SETS = {
    "sd": ("sd",),
    "g": ("g",),
    "g,r": ("g", "r"),
    "g,r,c": ("g", "r", "c"),
}

# PROMPTS
ARTICLES = ("a", "an", "the")
# Verbs that end in "ing" in their base form.
BASE_VERBS_ENDING_ING = {
    "bring", "sing", "swing", "string", "fling", "sling", "sting", "ring",
    "wring", "spring", "cling", "wing", "ding",
}
# Gerunds that the rule table gets wrong.
GERUND_OVERRIDES = {
    "lie": "lying",
    "tie": "tying",
    "die": "dying",
    "be": "being",
    "see": "seeing",
    "ski": "skiing",
    "panic": "panicking",
    "picnic": "picnicking",
}
# Subjects used to diversify verb/object pairs.
SUBJECT_POOL = [
    "man", "woman", "boy", "girl", "child", "toddler", "young man",
    "young woman", "old man", "old woman", "person", "teenager",
]

# 33 full-body landmarks, in the standard pose-landmarker order.
POSE_LANDMARK_NAMES = [
    "nose", "left_eye_inner", "left_eye", "left_eye_outer",
    "right_eye_inner", "right_eye", "right_eye_outer", "left_ear",
    "right_ear", "mouth_left", "mouth_right", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist",
    "right_wrist", "left_pinky", "right_pinky", "left_index",
    "right_index", "left_thumb", "right_thumb", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle", "left_heel",
    "right_heel", "left_foot_index", "right_foot_index",
]
NUM_KEYPOINTS = len(POSE_LANDMARK_NAMES)
KEYPOINT_VISIBILITY = 0.5

# Number words understood in pose-selection replies.
NUMBER_WORDS = {
    "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
    "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10,
    "first": 1, "second": 2, "third": 3, "fourth": 4, "fifth": 5,
    "sixth": 6, "seventh": 7, "eighth": 8, "ninth": 9, "tenth": 10,
}

# Visual attributes the Layout Agent reasons over before proposing a box.
VISUAL_ATTRIBUTES = ["pose type", "body orientation", "object relation", "contact region"]
