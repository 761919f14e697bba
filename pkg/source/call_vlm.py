# -*- coding: utf-8 -*-
"""
VLM transport for the reasoning agents:
- Requests carry an instruction, ordered PNG attachments and exactly three
  few-shot exemplars
- Replies are cached on disk by request content hash (atomic write-then-rename)
- Network calls are serialized through a rate limiter and retried
- A mock client maps request hashes (or a responder function) to canned replies

Requirements:
  pip install openai jsonschema tiktoken

Env:
  export OPENAI_API_KEY=sk-...
"""

import os
import io
import json
import time
import base64
import hashlib
import logging
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import tiktoken
from jsonschema import Draft202012Validator
from jsonschema.exceptions import ValidationError
from PIL import Image

from source import settings
from source.errors import ConfigError, PreconditionViolation, VLMUnavailable

logger = logging.getLogger(__name__)

NUM_EXEMPLARS = 3

# ------------------------ Cache entry schema ------------------------ #
CACHE_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "request_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "model": {"type": "string"},
        "text": {"type": "string"},
    },
    "required": ["request_hash", "model", "text"],
}


def count_tokens(text: str, model: str = settings.VLM_MODEL) -> int:
    try:
        enc = tiktoken.encoding_for_model(model)
    except KeyError:
        enc = tiktoken.get_encoding("cl100k_base")
    return len(enc.encode(text))


def image_to_png(image: np.ndarray) -> bytes:
    """(h, w, 3) float image in [0, 1] to PNG bytes."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    buf = io.BytesIO()
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


# ------------------------ Request / response ------------------------ #
@dataclass(frozen=True)
class VLMRequest:
    instruction: str
    images: Tuple[bytes, ...] = ()  # PNG bytes, in the order the instruction refers to them
    exemplars: Tuple[str, ...] = ()
    max_images: Optional[int] = None
    meta: Dict[str, Any] = field(default_factory=dict, compare=False)  # not hashed

    def __post_init__(self):
        if len(self.exemplars) != NUM_EXEMPLARS:
            raise PreconditionViolation(f"a request carries exactly {NUM_EXEMPLARS} exemplars, got {len(self.exemplars)}")
        if self.max_images is not None and len(self.images) > self.max_images:
            raise PreconditionViolation(f"{len(self.images)} images exceed the limit of {self.max_images}")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for part in (self.instruction, *self.exemplars):
            h.update(part.encode("utf-8"))
            h.update(b"\x00")
        for img in self.images:
            h.update(hashlib.sha256(img).digest())
        return h.hexdigest()


@dataclass(frozen=True)
class VLMResponse:
    text: str
    request_hash: str
    cached: bool = False


# ------------------------ Clients ------------------------ #
class VLMClient:
    """
    Base client: cache lookup, rate limit, retries. Subclasses implement
    `_complete(request) -> str`.
    """

    name = "base"

    def __init__(
        self,
        cache_dir: Optional[str] = None,
        min_interval: float = 0.0,
        max_retries: int = 0,
    ) -> None:
        self.cache_dir = cache_dir
        self.min_interval = float(min_interval)
        self.max_retries = int(max_retries)
        self.calls = 0
        self._lock = threading.Lock()
        self._last_call = 0.0
        self._validator = Draft202012Validator(CACHE_SCHEMA)

    # ------------------------- Public API ------------------------- #
    def complete(self, request: VLMRequest) -> VLMResponse:
        key = request.content_hash()
        hit = self._cache_get(key)
        if hit is not None:
            logger.info("VLM cache hit %s", key[:12])
            return VLMResponse(text=hit, request_hash=key, cached=True)

        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._lock:
                    wait = self._last_call + self.min_interval - time.monotonic()
                    if wait > 0:
                        time.sleep(wait)
                    self._last_call = time.monotonic()
                    self.calls += 1
                text = self._complete(request)
                break
            except VLMUnavailable:
                raise
            except Exception as e:
                last_error = e
                logger.warning("VLM call failed (attempt %d/%d): %s", attempt + 1, self.max_retries + 1, e)
        else:
            raise VLMUnavailable(f"{self.name}: {last_error}") from last_error

        self._cache_put(key, text)
        return VLMResponse(text=text, request_hash=key, cached=False)

    def _complete(self, request: VLMRequest) -> str:
        raise NotImplementedError

    # ------------------------- Cache ------------------------- #
    def _cache_file(self, key: str) -> Optional[str]:
        if not self.cache_dir:
            return None
        return os.path.join(self.cache_dir, key[:2], f"{key}.json")

    def _cache_get(self, key: str) -> Optional[str]:
        path = self._cache_file(key)
        if not path or not os.path.isfile(path):
            return None
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            self._validator.validate(data)
        except (OSError, json.JSONDecodeError, ValidationError) as e:
            logger.warning("Ignoring unreadable cache entry %s: %s", path, e)
            return None
        if data["request_hash"] != key:
            return None
        return data["text"]

    def _cache_put(self, key: str, text: str) -> None:
        path = self._cache_file(key)
        if not path:
            return
        os.makedirs(os.path.dirname(path), exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump({"request_hash": key, "model": self.name, "text": text}, f, ensure_ascii=False)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)


class MockVLMClient(VLMClient):
    """
    Offline client. `replies` maps request hashes to canned text; any other
    request goes to `responder`, or fails with VLMUnavailable.
    """

    name = "mock"

    def __init__(
        self,
        replies: Optional[Dict[str, str]] = None,
        responder: Optional[Callable[[VLMRequest], str]] = None,
        cache_dir: Optional[str] = None,
    ) -> None:
        super().__init__(cache_dir=cache_dir)
        self.replies = dict(replies or {})
        self.responder = responder
        self.requests: List[VLMRequest] = []

    def _complete(self, request: VLMRequest) -> str:
        self.requests.append(request)
        key = request.content_hash()
        if key in self.replies:
            return self.replies[key]
        if self.responder is not None:
            return self.responder(request)
        raise VLMUnavailable(f"mock VLM has no reply for request {key[:12]}")


class OpenAIVLMClient(VLMClient):
    """Chat-completions VLM with base64 image attachments."""

    name = "remote"

    DEFAULT_SYSTEM_PROMPT = (
        "You are a careful visual reasoning assistant. Look at the attached images, "
        "follow the protocol and answer in the requested format."
    )

    def __init__(
        self,
        model: str = settings.VLM_MODEL,
        api_key: Optional[str] = None,
        api_key_env: str = settings.VLM_API_KEY_ENV,
        system_prompt: Optional[str] = None,
        temperature: float = 0.0,
        cache_dir: Optional[str] = settings.vlm_cache_path,
        min_interval: float = settings.VLM_MIN_INTERVAL,
        max_retries: int = settings.VLM_MAX_RETRIES,
    ) -> None:
        super().__init__(cache_dir=cache_dir, min_interval=min_interval, max_retries=max_retries)
        key = api_key or os.getenv(api_key_env)
        if not key:
            raise VLMUnavailable(f"no API key: set {api_key_env}")
        from openai import OpenAI

        self.model = model
        self.name = f"remote:{model}"
        self.client = OpenAI(api_key=key)
        self.system_prompt = system_prompt or self.DEFAULT_SYSTEM_PROMPT
        self.temperature = temperature

    def _complete(self, request: VLMRequest) -> str:
        exemplar_block = "\n\n".join(f"EXAMPLE {i + 1}:\n{ex}" for i, ex in enumerate(request.exemplars))
        content: List[Dict[str, Any]] = [
            {"type": "text", "text": f"{exemplar_block}\n\n{request.instruction}"}
        ]
        for img in request.images:
            b64 = base64.b64encode(img).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
        logger.info(
            "VLM request: %d images, %d instruction tokens",
            len(request.images), count_tokens(content[0]["text"], self.model),
        )

        resp = self.client.chat.completions.create(
            model=self.model,
            messages=[
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": content},
            ],
            temperature=self.temperature,
        )
        return resp.choices[0].message.content or ""


def build_vlm_client(name: str, responder: Optional[Callable[[VLMRequest], str]] = None, **kwargs) -> VLMClient:
    if name == "mock":
        return MockVLMClient(responder=responder)
    if name == "remote":
        return OpenAIVLMClient(**kwargs)
    raise ConfigError(f"unknown VLM provider: {name!r} (expected mock | remote)")
