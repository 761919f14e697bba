import os
import json
import hashlib
import logging
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from jsonschema import Draft202012Validator
from jsonschema.exceptions import ValidationError
from PIL import Image

from source import settings
from source.attention_engine import AttentionMapSet
from source.errors import ManifestError, RunNotFound

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "properties": {
        "run_id": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "config": {"type": "object"},
        "prompt_source": {
            "type": "object",
            "properties": {
                "text": {"type": "string"},
                "triplet": {"type": "string"},
                "full_prompt": {"type": "string"},
                "intransitive_prompt": {"type": "string"},
            },
            "required": ["text", "triplet", "full_prompt", "intransitive_prompt"],
        },
        "modules": {"enum": sorted(settings.MODULE_SETS)},
        "seeds": {
            "type": "object",
            "properties": {
                "base_seed": {"type": "integer"},
                "candidate_seeds": {"type": "array", "items": {"type": "integer"}},
                "chosen_seed": {"type": ["integer", "null"]},
            },
            "required": ["base_seed", "candidate_seeds", "chosen_seed"],
        },
        "results": {"type": "object"},
        "artifacts": {"type": "object", "additionalProperties": {"type": "string"}},
        "timestamps": {"type": "object"},
        "manifest_hash": {"type": "string"},
    },
    "required": ["run_id", "config", "prompt_source", "modules", "seeds", "artifacts", "timestamps"],
}

_validator = Draft202012Validator(MANIFEST_SCHEMA)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def compute_run_id(config: Dict[str, Any], prompt: str, seeds: Sequence[int], modules: str) -> str:
    """First 16 hex digits of SHA-256 over the run's inputs."""
    payload = canonical_json({"config": config, "prompt": prompt, "seeds": list(seeds), "modules": modules})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def manifest_hash(manifest: Dict[str, Any]) -> str:
    """Content hash of a manifest; timestamps and the hash field itself are left out."""
    body = {k: v for k, v in manifest.items() if k not in ("timestamps", "manifest_hash")}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def validate_manifest(manifest: Dict[str, Any]) -> None:
    try:
        _validator.validate(manifest)
    except ValidationError as e:
        raise ManifestError(f"invalid run manifest: {e.message}") from e


def run_dir(runs_root: str, run_id: str, create: bool = False) -> str:
    path = os.path.join(runs_root, run_id)
    if create:
        os.makedirs(os.path.join(path, settings.candidates_subdir), exist_ok=True)
    return path


def find_run(runs_root: str, run_id: str) -> str:
    path = run_dir(runs_root, run_id)
    if not os.path.isfile(os.path.join(path, settings.manifest_name)):
        raise RunNotFound(f"no run {run_id!r} under {runs_root}")
    return path


def list_runs(runs_root: str) -> List[str]:
    if not os.path.isdir(runs_root):
        return []
    return sorted(
        name for name in os.listdir(runs_root)
        if os.path.isfile(os.path.join(runs_root, name, settings.manifest_name))
    )


def write_json(path: str, data: Any) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)


def write_manifest(path: str, manifest: Dict[str, Any]) -> Dict[str, Any]:
    manifest = dict(manifest)
    manifest["manifest_hash"] = manifest_hash(manifest)
    validate_manifest(manifest)
    write_json(path, manifest)
    return manifest


def read_manifest(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise RunNotFound(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ManifestError(f"manifest is not valid JSON: {path}: {e}") from e
    validate_manifest(manifest)
    return manifest


# -----------------------------
# Images
# -----------------------------
def to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(image: np.ndarray, path: str) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask_png(mask: np.ndarray, path: str) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def save_heatmap_png(values: np.ndarray, path: str) -> None:
    """8-bit grayscale, scaled by the map's maximum."""
    v = np.asarray(values, dtype=np.float64)
    peak = float(v.max()) if v.size else 0.0
    scaled = v / peak if peak > 0 else np.zeros_like(v)
    Image.fromarray((scaled * 255.0 + 0.5).astype(np.uint8)).save(path, format="PNG")


# -----------------------------
# Attention archives
# -----------------------------
def _head_mean(a) -> np.ndarray:
    arr = a.detach().cpu().numpy() if hasattr(a, "detach") else np.asarray(a)
    while arr.ndim > 2:
        arr = arr.mean(axis=0)
    return arr.astype(np.float32)


def save_attention(path: str, trace: Iterable[AttentionMapSet]) -> int:
    """Cross maps per step and layer (heads averaged) under keys step{t}__{layer}."""
    arrays: Dict[str, np.ndarray] = {}
    for maps in trace:
        for layer, a in maps.cross.items():
            arrays[f"step{maps.step}__{layer}"] = _head_mean(a)
    np.savez_compressed(path, **arrays)
    return len(arrays)


def load_attention(path: str) -> Dict[Tuple[int, str], np.ndarray]:
    out: Dict[Tuple[int, str], np.ndarray] = {}
    with np.load(path) as data:
        for key in data.files:
            step, layer = key.split("__", 1)
            out[(int(step[len("step"):]), layer)] = data[key]
    return out


def write_table(df: pd.DataFrame, path: str) -> None:
    df.to_csv(path, sep="\t", index=False)
