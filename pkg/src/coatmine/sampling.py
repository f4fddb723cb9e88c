"""Sampler gateway: K completions per dialogue prefix from a pluggable backend.

Backends
--------
``simulated``  seeded stand-in policy (:mod:`coatmine.simulated`)
``remote``     any HTTP chat-completions endpoint (wire format in docs/wire-protocol.md)
``replay``     serves recorded cache entries only; never touches the network

Every completed request is appended to a JSONL cache keyed by a digest of the
rendered turns, temperature, model identifier, sample count and node salt.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import random
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import httpx

from .prompts import DialogueTurn, Stage, StepContext
from .simulated import SimulatedPolicyProfile, simulate

logger = logging.getLogger(__name__)

BACKENDS = ("remote", "simulated", "replay")


class SamplingError(RuntimeError):
    """Raised once retries are exhausted; the tree builder marks the node failed."""


class CacheMissError(LookupError):
    """Replay backend asked for a prefix that was never recorded."""


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 3
    temperature: float = 1.0
    max_retries: int = 3
    max_in_flight: int = 8
    backend: str = "simulated"
    cache: Optional[str] = None
    model: str = "seed-policy"
    endpoint: Optional[str] = None
    api_key_env: str = "COATMINE_API_KEY"
    image_transport: str = "url"
    timeout: float = 120.0
    retry_backoff: float = 0.5

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.backend == "replay" and not self.cache:
            raise ValueError("replay backend needs a cache file")
        if self.backend == "remote" and not self.endpoint:
            raise ValueError("remote backend needs an endpoint URL")
        if self.image_transport not in ("url", "base64"):
            raise ValueError("image_transport must be 'url' or 'base64'")
        if self.max_in_flight < 1 or self.max_retries < 0:
            raise ValueError("max_in_flight must be >= 1 and max_retries >= 0")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SamplerConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SampleRequest:
    turns: tuple[DialogueTurn, ...]
    n: int
    stage: Stage
    ctx: Optional[StepContext]
    key: str


def cache_key(turns: Sequence[DialogueTurn], temperature: float, model: str, n: int, salt: str = "") -> str:
    payload = {
        "turns": [t.to_dict() for t in turns],
        "temperature": temperature,
        "model": model,
        "n": n,
        "salt": salt,
    }
    blob = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class SampleCache:
    """Append-only JSONL map from request key to samples; one writer at a time."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._entries: dict[str, list[str]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._entries[rec["key"]] = rec["samples"]

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def get(self, key: str) -> Optional[list[str]]:
        hit = self._entries.get(key)
        return list(hit) if hit is not None else None

    def put(self, key: str, samples: list[str]) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = list(samples)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "samples": samples}, ensure_ascii=False) + "\n")


class Backend(Protocol):
    model_id: str

    def generate(self, request: SampleRequest) -> list[str]: ...


class SimulatedBackend:
    def __init__(self, profile: SimulatedPolicyProfile, model_id: str = "seed-policy"):
        self.profile = profile
        self.model_id = model_id

    def generate(self, request: SampleRequest) -> list[str]:
        if request.ctx is None or request.ctx.golden is None:
            raise SamplingError("simulated backend needs the golden action in the step context")
        seed = int.from_bytes(hashlib.sha256(f"{self.profile.seed}:{request.key}".encode()).digest()[:8], "big")
        rng = random.Random(seed)
        return [simulate(request.stage, request.ctx.golden, self.profile, rng).text for _ in range(request.n)]


class ReplayBackend:
    def __init__(self, model_id: str = "seed-policy"):
        self.model_id = model_id

    def generate(self, request: SampleRequest) -> list[str]:
        raise CacheMissError(f"no recorded samples for request {request.key[:16]}")


def _image_part(ref: str, transport: str) -> dict:
    if transport == "base64" and not ref.startswith(("http://", "https://", "data:")):
        mime = mimetypes.guess_type(ref)[0] or "image/png"
        data = base64.b64encode(Path(ref).read_bytes()).decode("ascii")
        ref = f"data:{mime};base64,{data}"
    return {"type": "image_url", "image_url": {"url": ref}}


def to_chat_messages(turns: Sequence[DialogueTurn], transport: str = "url") -> list[dict]:
    messages = []
    for t in turns:
        if t.attachments:
            content = [_image_part(t.attachments, transport), {"type": "text", "text": t.content}]
        else:
            content = t.content
        messages.append({"role": t.role, "content": content})
    return messages


class RemoteBackend:
    """OpenAI-style ``/chat/completions`` client with at most ``max_in_flight`` open requests."""

    def __init__(self, endpoint: str, model_id: str, *, api_key: Optional[str] = None,
                 temperature: float = 1.0, max_in_flight: int = 8, image_transport: str = "url",
                 timeout: float = 120.0, client: Optional[httpx.Client] = None):
        self.endpoint = endpoint
        self.model_id = model_id
        self.temperature = temperature
        self.image_transport = image_transport
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _post(self, messages: list[dict], n: int) -> list[str]:
        body = {"model": self.model_id, "messages": messages, "temperature": self.temperature, "n": n}
        with self._slots:
            resp = self._client.post(self.endpoint, json=body, headers=self._headers)
        resp.raise_for_status()
        choices = resp.json().get("choices") or []
        return [c["message"]["content"] for c in choices if c.get("message", {}).get("content") is not None]

    def generate(self, request: SampleRequest) -> list[str]:
        messages = to_chat_messages(request.turns, self.image_transport)
        texts = self._post(messages, request.n)[: request.n]
        # endpoints that ignore ``n`` answer with one choice; top up one request at a time
        while len(texts) < request.n:
            more = self._post(messages, 1)
            if not more:
                raise SamplingError("endpoint returned no choices")
            texts.extend(more[: request.n - len(texts)])
        return texts

    def close(self) -> None:
        self._client.close()


class SamplerGateway:
    def __init__(self, backend: Backend, config: SamplerConfig = SamplerConfig(),
                 cache: Optional[SampleCache] = None, sleep: Callable[[float], None] = time.sleep):
        self.backend = backend
        self.config = config
        self.cache = cache if cache is not None else SampleCache()
        self.replay_only = isinstance(backend, ReplayBackend)
        self._sleep = sleep
        self._lock = threading.Lock()
        self.stats = {"requests": 0, "cache_hits": 0, "backend_calls": 0, "failures": 0}

    @property
    def model_id(self) -> str:
        return self.backend.model_id

    def set_model(self, model_id: str) -> None:
        self.backend.model_id = model_id

    def _count(self, key: str) -> None:
        with self._lock:
            self.stats[key] += 1

    def sample(self, turns: Sequence[DialogueTurn], K: int, *, stage: Stage,
               ctx: Optional[StepContext] = None, salt: str = "") -> list[str]:
        """Return K completions for ``turns``, from the cache when recorded."""
        turns = tuple(turns)
        key = cache_key(turns, self.config.temperature, self.model_id, K, salt)
        self._count("requests")
        hit = self.cache.get(key)
        if hit is not None:
            self._count("cache_hits")
            return hit
        if self.replay_only:
            raise CacheMissError(f"replay cache has no entry for {stage.value} request {key[:16]}")
        request = SampleRequest(turns, K, Stage(stage), ctx, key)
        last: Optional[Exception] = None
        for attempt in range(self.config.max_retries + 1):
            try:
                self._count("backend_calls")
                texts = self.backend.generate(request)
                if len(texts) != K:
                    raise SamplingError(f"backend returned {len(texts)} samples, expected {K}")
                self.cache.put(key, texts)
                return list(texts)
            except CacheMissError:
                raise
            except (SamplingError, httpx.HTTPError, OSError, KeyError, ValueError) as e:
                last = e
                logger.debug("sample attempt %d failed: %s", attempt + 1, e)
                if attempt < self.config.max_retries:
                    self._sleep(self.config.retry_backoff * (2 ** attempt) * (1 + random.random()))
        self._count("failures")
        raise SamplingError(f"{stage.value} sampling failed after {self.config.max_retries + 1} attempts: {last}")


def make_gateway(config: SamplerConfig, profile: Optional[SimulatedPolicyProfile] = None,
                 cache_path=None) -> SamplerGateway:
    cache = SampleCache(cache_path if cache_path is not None else config.cache)
    if config.backend == "simulated":
        backend: Backend = SimulatedBackend(profile or SimulatedPolicyProfile(), config.model)
    elif config.backend == "replay":
        backend = ReplayBackend(config.model)
    else:
        backend = RemoteBackend(
            config.endpoint, config.model,
            api_key=os.environ.get(config.api_key_env),
            temperature=config.temperature,
            max_in_flight=config.max_in_flight,
            image_transport=config.image_transport,
            timeout=config.timeout,
        )
    return SamplerGateway(backend, config, cache)
