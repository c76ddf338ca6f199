import asyncio
import hashlib
import json
import os
import time
from collections import Counter
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Union

import httpx
import numpy as np

from app.exceptions import (
    BadRequest,
    DimensionMismatch,
    RateLimited,
    TransportError,
    UnscriptedPrompt,
)
from app.models.gateway import ChatMessage, ChatReply, ChatRequest, GatewayConfig
from app.utils.jsonl import dumps
from app.utils.logger import get_logger

logger = get_logger(__name__)

ScriptedReply = Union[str, ChatReply]
Responder = Callable[[ChatRequest], Optional[ScriptedReply]]


def fingerprint(messages: Sequence[ChatMessage], model: str) -> str:
    """Stable hash of a role-tagged message list and model id.

    Whitespace inside message content is collapsed first, so fixtures that
    differ only in incidental spacing share a fingerprint.
    """
    canonical = {
        "model": model,
        "messages": [
            {
                "role": m.role,
                "content": " ".join(m.content.split()),
                "tool_calls": m.tool_calls or [],
            }
            for m in messages
        ],
    }
    text = json.dumps(canonical, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:24]


class LLMGateway:
    """Shared chat/embedding access with bounded concurrency and an optional audit log"""

    def __init__(self, config: GatewayConfig, audit_path: Optional[Path] = None):
        self.config = config
        self.audit_path = Path(audit_path) if audit_path else None
        self._semaphore = asyncio.Semaphore(config.concurrency_limit)
        self._audit_lock = asyncio.Lock()
        self.calls: Counter = Counter()
        self.retries = 0
        self.in_flight = 0
        self.peak_in_flight = 0

    @property
    def model(self) -> str:
        return self.config.model

    def request(self, messages: List[ChatMessage], purpose: str, **kwargs: Any) -> ChatRequest:
        """Build a ChatRequest with this gateway's model and temperature"""
        kwargs.setdefault("temperature", self.config.temperature)
        return ChatRequest(model=self.config.model, messages=messages, purpose=purpose, **kwargs)

    async def chat(self, req: ChatRequest) -> ChatReply:
        started = time.perf_counter()
        status = "ok"
        reply: Optional[ChatReply] = None
        attempts = 0
        try:
            reply, attempts = await self._chat(req)
            return reply
        except Exception as exc:
            status = type(exc).__name__
            attempts = getattr(exc, "retries", 0)
            raise
        finally:
            self.calls[req.purpose] += 1
            await self._audit({
                "kind": "chat",
                "purpose": req.purpose,
                "model": req.model,
                "fingerprint": fingerprint(req.messages, req.model),
                "status": status,
                "retries": attempts,
                "latency_ms": round((time.perf_counter() - started) * 1000, 3),
                "request": [m.to_wire() for m in req.messages],
                "reply": reply.model_dump() if reply else None,
            })

    async def embed(self, texts: List[str]) -> List[List[float]]:
        if not texts:
            raise ValueError("embed() needs at least one text")
        started = time.perf_counter()
        status = "ok"
        try:
            vectors = await self._embed(texts)
            dims = {len(v) for v in vectors}
            if len(vectors) != len(texts) or len(dims) != 1:
                raise DimensionMismatch(
                    f"expected {len(texts)} vectors of one dimension, got {len(vectors)} with dims {sorted(dims)}"
                )
            return vectors
        except Exception as exc:
            status = type(exc).__name__
            raise
        finally:
            self.calls["embed"] += 1
            await self._audit({
                "kind": "embed",
                "purpose": "embed",
                "model": self.config.model,
                "status": status,
                "count": len(texts),
                "latency_ms": round((time.perf_counter() - started) * 1000, 3),
            })

    async def aclose(self) -> None:
        pass

    async def __aenter__(self) -> "LLMGateway":
        return self

    async def __aexit__(self, *exc_info: Any) -> None:
        await self.aclose()

    async def _chat(self, req: ChatRequest):
        raise NotImplementedError

    async def _embed(self, texts: List[str]) -> List[List[float]]:
        raise NotImplementedError

    async def _audit(self, record: Dict[str, Any]) -> None:
        if not self.audit_path:
            return
        record = {"timestamp": datetime.utcnow().isoformat(), **record}
        async with self._audit_lock:
            self.audit_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.audit_path, "a", encoding="utf-8") as f:
                f.write(dumps(record) + "\n")

    def _enter(self) -> None:
        self.in_flight += 1
        self.peak_in_flight = max(self.peak_in_flight, self.in_flight)

    def _leave(self) -> None:
        self.in_flight -= 1


class HttpGateway(LLMGateway):
    """OpenAI-compatible `/chat/completions` and `/embeddings` over httpx"""

    def __init__(
        self,
        config: GatewayConfig,
        audit_path: Optional[Path] = None,
        transport: Optional[httpx.AsyncBaseTransport] = None,
    ):
        super().__init__(config, audit_path)
        self._transport = transport
        self._client: Optional[httpx.AsyncClient] = None

    def _get_client(self) -> httpx.AsyncClient:
        if self._client is None:
            headers = {"Content-Type": "application/json"}
            api_key = os.getenv(self.config.api_key_env, "").strip()
            if api_key:
                headers["Authorization"] = f"Bearer {api_key}"
            else:
                logger.warning("Environment variable %s is empty; sending requests without a key", self.config.api_key_env)
            self._client = httpx.AsyncClient(
                base_url=self.config.base_url,
                headers=headers,
                timeout=self.config.request_timeout,
                transport=self._transport,
            )
        return self._client

    async def aclose(self) -> None:
        if self._client is not None:
            await self._client.aclose()
            self._client = None

    async def _post(self, path: str, body: Dict[str, Any]):
        """POST with retries on transport errors, 429 and 5xx; returns (json, retries)"""
        client = self._get_client()
        attempt = 0
        while True:
            async with self._semaphore:
                self._enter()
                try:
                    response = await client.post(path, json=body)
                except httpx.TransportError as exc:
                    if attempt >= self.config.max_retries:
                        raise TransportError(f"{path}: {exc!r}", retries=attempt) from exc
                    problem = repr(exc)
                else:
                    status = response.status_code
                    if status < 400:
                        try:
                            data = response.json()
                        except ValueError as exc:
                            raise TransportError(f"{path}: HTTP {status} body is not JSON: {response.text[:200]!r}", retries=attempt) from exc
                        if not isinstance(data, dict):
                            raise TransportError(f"{path}: HTTP {status} body is not a JSON object", retries=attempt)
                        return data, attempt
                    if status == 429:
                        if attempt >= self.config.max_retries:
                            raise RateLimited(f"{path}: rate limited after {attempt} retries", retries=attempt)
                        problem = "HTTP 429"
                    elif status >= 500:
                        if attempt >= self.config.max_retries:
                            raise TransportError(f"{path}: HTTP {status} after {attempt} retries", retries=attempt)
                        problem = f"HTTP {status}"
                    else:
                        raise BadRequest(f"{path}: HTTP {status}: {response.text[:500]}", status_code=status)
                finally:
                    self._leave()
            delay = self.config.backoff_base * (2 ** attempt)
            attempt += 1
            self.retries += 1
            logger.warning("%s failed (%s); retry %d/%d in %.2fs", path, problem, attempt, self.config.max_retries, delay)
            await asyncio.sleep(delay)

    async def _chat(self, req: ChatRequest):
        data, retries = await self._post("/chat/completions", req.to_wire())
        choices = data.get("choices") or []
        if not choices:
            raise TransportError("/chat/completions returned no choices", retries=retries)
        message = choices[0].get("message") if isinstance(choices[0], dict) else None
        if not isinstance(message, dict):
            raise TransportError("/chat/completions returned a choice without a message object", retries=retries)
        reply = ChatReply(
            content=message.get("content") or "",
            tool_calls=message.get("tool_calls") or [],
            reasoning=message.get("reasoning_content") or "",
            usage=data.get("usage") or {},
        )
        return reply, retries

    async def _embed(self, texts: List[str]) -> List[List[float]]:
        data, retries = await self._post("/embeddings", {"model": self.config.model, "input": texts})
        try:
            items = sorted(data.get("data") or [], key=lambda item: item.get("index", 0))
            return [list(map(float, item["embedding"])) for item in items]
        except (AttributeError, KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"/embeddings returned a malformed item: {exc!r}", retries=retries) from exc


class MockGateway(LLMGateway):
    """Deterministic offline backend.

    chat() answers from a fingerprint-keyed transcript, then from the
    optional responder; anything else raises UnscriptedPrompt.
    embed() returns unit-norm vectors seeded by (seed, text).
    """

    def __init__(
        self,
        transcript: Optional[Mapping[str, ScriptedReply]] = None,
        seed: int = 0,
        responder: Optional[Responder] = None,
        config: Optional[GatewayConfig] = None,
        audit_path: Optional[Path] = None,
    ):
        config = config or GatewayConfig(backend="mock", model="mock", mock_seed=seed)
        super().__init__(config, audit_path)
        self.transcript = dict(transcript or {})
        self.seed = seed
        self.responder = responder
        self.dimension = config.mock_dimension

    async def _chat(self, req: ChatRequest):
        async with self._semaphore:
            self._enter()
            try:
                key = fingerprint(req.messages, req.model)
                scripted = self.transcript.get(key)
                if scripted is None and self.responder is not None:
                    scripted = self.responder(req)
                if scripted is None:
                    raise UnscriptedPrompt(key, req.purpose)
                if isinstance(scripted, str):
                    scripted = ChatReply(content=scripted)
                return scripted.model_copy(deep=True), 0
            finally:
                self._leave()

    def vector(self, text: str) -> List[float]:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        v = rng.standard_normal(self.dimension)
        v /= np.linalg.norm(v)
        return v.tolist()

    async def _embed(self, texts: List[str]) -> List[List[float]]:
        async with self._semaphore:
            return [self.vector(t) for t in texts]


def mock_backend(
    transcript: Optional[Mapping[str, ScriptedReply]] = None,
    seed: int = 0,
    responder: Optional[Responder] = None,
    **kwargs: Any,
) -> MockGateway:
    return MockGateway(transcript=transcript, seed=seed, responder=responder, **kwargs)


def build_gateway(config: GatewayConfig, audit_path: Optional[Path] = None) -> LLMGateway:
    """Construct the configured backend; mock backends answer with the offline responder"""
    if config.backend == "mock":
        from app.services.mock_backend import OfflineResponder

        return MockGateway(
            seed=config.mock_seed,
            responder=OfflineResponder(seed=config.mock_seed),
            config=config,
            audit_path=audit_path,
        )
    return HttpGateway(config, audit_path=audit_path)
