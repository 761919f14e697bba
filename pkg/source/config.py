# config.py
# Run configuration: a flat key=value file over the settings defaults,
# then CLI flags, then repeated --set overrides. Every key is typed.
import os
import logging
from dataclasses import dataclass, fields
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Tuple

from source import settings
from source.diffusion_backbone import GuidanceConfig
from source.errors import ConfigError

logger = logging.getLogger(__name__)


# -----------------------------
# Value parsers
# -----------------------------
def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _mapping(s: str) -> Tuple[Tuple[str, str], ...]:
    """"lie:lying, tie:tying" -> (("lie", "lying"), ("tie", "tying"))."""
    pairs = []
    for item in s.split(","):
        if not item.strip():
            continue
        key, sep, value = item.partition(":")
        if not sep or not key.strip() or not value.strip():
            raise ValueError(f"expected key:value, got {item!r}")
        pairs.append((key.strip(), value.strip()))
    return tuple(sorted(pairs))


def _str(s: str) -> str:
    return s.strip()


def _optional_int(s: str) -> Optional[int]:
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


def _optional_floats(s: str) -> Optional[Tuple[float, ...]]:
    return None if s.strip().lower() in ("", "none") else _floats(s)


# key -> (parser, default); order is the order of docs/config.md
DEFAULT_CONFIG: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    # guidance
    "T1": (int, settings.T1),
    "T2": (int, settings.T2),
    "k": (int, settings.K_CANDIDATES),
    "gamma": (int, settings.GAMMA),
    "cfg_scale": (float, settings.CFG_SCALE),
    "alpha_max": (float, settings.ALPHA_MAX),
    "alpha_schedule": (_optional_floats, None),
    "loss_weights": (_floats, settings.LOSS_WEIGHTS),
    "change_threshold": (float, settings.CHANGE_THRESHOLD),
    "loss_active_fraction": (float, settings.LOSS_ACTIVE_FRACTION),
    "top_fraction": (float, settings.TOP_FRACTION),
    "corner_band": (int, settings.CORNER_BAND),
    "substitution": (_bool, True),
    "mask_window": (_str, "loss"),
    "handoff": (_str, "seed"),
    "handoff_step": (_optional_int, None),
    "divergence_patience": (int, settings.DIVERGENCE_PATIENCE),
    "divergence_tolerance": (float, settings.DIVERGENCE_TOLERANCE),
    "attention_resolutions": (_ints, ()),
    # run
    "seed": (int, 0),
    "modules": (_str, "g,r,c"),
    "gerund_overrides": (_mapping, ()),
    "record_attention": (_bool, True),
    # backbone
    "backbone": (_str, "toy"),
    "model_id": (_str, settings.SD_MODEL_ID),
    "device": (_str, settings.DEVICE),
    # agents
    "vlm": (_str, "mock"),
    "mock_layout": (_str, "mirror"),
    "vlm_model": (_str, settings.VLM_MODEL),
    "vlm_api_key_env": (_str, settings.VLM_API_KEY_ENV),
    "vlm_min_interval": (float, settings.VLM_MIN_INTERVAL),
    "vlm_max_retries": (int, settings.VLM_MAX_RETRIES),
    "agent_retries": (int, settings.AGENT_RETRIES),
    "keypoints": (_str, "stub"),
    "human_box_margin": (float, settings.HUMAN_BOX_MARGIN),
    # evaluation
    "embedder": (_str, "none"),
    "clip_model": (_str, settings.CLIP_MODEL),
    # runner
    "workers": (int, 1),
    "out": (_str, settings.runs_path),
    "vlm_cache": (_str, settings.vlm_cache_path),
}

# keys that never change what a run produces
NON_OUTPUT_KEYS = {"workers", "out", "vlm_cache", "vlm_min_interval", "vlm_max_retries", "vlm_api_key_env"}


@dataclass(frozen=True)
class PipelineConfig:
    T1: int
    T2: int
    k: int
    gamma: int
    cfg_scale: float
    alpha_max: float
    alpha_schedule: Optional[Tuple[float, ...]]
    loss_weights: Tuple[float, ...]
    change_threshold: float
    loss_active_fraction: float
    top_fraction: float
    corner_band: int
    substitution: bool
    mask_window: str
    handoff: str
    handoff_step: Optional[int]
    divergence_patience: int
    divergence_tolerance: float
    attention_resolutions: Tuple[int, ...]
    seed: int
    modules: str
    gerund_overrides: Tuple[Tuple[str, str], ...]
    record_attention: bool
    backbone: str
    model_id: str
    device: str
    vlm: str
    mock_layout: str
    vlm_model: str
    vlm_api_key_env: str
    vlm_min_interval: float
    vlm_max_retries: int
    agent_retries: int
    keypoints: str
    human_box_margin: float
    embedder: str
    clip_model: str
    workers: int
    out: str
    vlm_cache: str

    def __post_init__(self):
        if self.modules not in settings.MODULE_SETS:
            raise ConfigError(f"modules must be one of {sorted(settings.MODULE_SETS)}, got {self.modules!r}")
        choices = {
            "backbone": ("toy", "ldm-adapter"),
            "vlm": ("mock", "remote"),
            "mock_layout": ("mirror", "echo"),
            "keypoints": ("stub", "mediapipe"),
            "embedder": ("none", "clip"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.agent_retries < 0 or self.vlm_max_retries < 0:
            raise ConfigError("retry counts must be >= 0")
        if self.human_box_margin < 0:
            raise ConfigError("human_box_margin must be >= 0")
        self.guidance()

    @property
    def module_set(self) -> Tuple[str, ...]:
        return settings.MODULE_SETS[self.modules]

    @property
    def gerund_table(self) -> Dict[str, str]:
        return dict(self.gerund_overrides)

    def guidance(self) -> GuidanceConfig:
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights needs three values")
        return GuidanceConfig(
            T1=self.T1, T2=self.T2, k=self.k, gamma=self.gamma, cfg_scale=self.cfg_scale,
            alpha_max=self.alpha_max, alpha_schedule=self.alpha_schedule,
            loss_weights=tuple(self.loss_weights), change_threshold=self.change_threshold,
            loss_active_fraction=self.loss_active_fraction, top_fraction=self.top_fraction,
            corner_band=self.corner_band, substitution=self.substitution,
            mask_window=self.mask_window, handoff=self.handoff, handoff_step=self.handoff_step,
            divergence_patience=self.divergence_patience,
            divergence_tolerance=self.divergence_tolerance,
            attention_resolutions=tuple(self.attention_resolutions),
        )

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready snapshot (tuples become lists)."""
        out: Dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "gerund_overrides":
                v = dict(v)
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def output_relevant(self) -> Dict[str, Any]:
        return {k: v for k, v in self.to_dict().items() if k not in NON_OUTPUT_KEYS}

    def with_overrides(self, **values: Any) -> "PipelineConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update({k: v for k, v in values.items() if v is not None})
        return _build(data)


def _build(values: Mapping[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def parse_value(key: str, raw: str) -> Any:
    if key not in DEFAULT_CONFIG:
        raise ConfigError(f"unknown config key: {key!r}")
    parser = DEFAULT_CONFIG[key][0]
    try:
        return parser(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e


def parse_assignments(lines: Iterable[str], origin: str = "<set>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        values[key.strip()] = parse_value(key.strip(), value)
    return values


def load_config_file(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_assignments(f, origin=path)


def from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    """Rebuild a config from a manifest snapshot."""
    unknown = set(data) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    values = {k: default for k, (_, default) in DEFAULT_CONFIG.items()}
    for k, v in data.items():
        if k == "gerund_overrides":
            v = tuple(sorted(dict(v).items()))
        elif isinstance(v, list):
            v = tuple(v)
        values[k] = v
    return _build(values)


def load_config(
    path: Optional[str] = None,
    flags: Optional[Mapping[str, Any]] = None,
    assignments: Iterable[str] = (),
) -> PipelineConfig:
    """settings defaults < config file < CLI flags < --set key=value."""
    values = {k: default for k, (_, default) in DEFAULT_CONFIG.items()}
    if path:
        values.update(load_config_file(path))
    for k, v in (flags or {}).items():
        if v is None:
            continue
        if k not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown config key: {k!r}")
        values[k] = v
    values.update(parse_assignments(assignments))
    cfg = _build(values)
    logger.debug("Config: %s", cfg.to_dict())
    return cfg
