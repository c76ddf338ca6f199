import asyncio
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict

from app.exceptions import MissingField
from app.models.function_spec import FunctionSpec, ParameterDef
from app.services.gateway import LLMGateway
from app.utils.jsonl import sha256_text
from app.utils.logger import get_logger

logger = get_logger(__name__)

DESC_TAG = "DESC"
TYPE_TAG = "TYPE"


class ParameterKey(BaseModel):
    model_config = ConfigDict(frozen=True)

    spec_id: str
    direction: Literal["input", "output"]
    param_name: str


class ParameterEmbedding(BaseModel):
    key: ParameterKey
    text: str
    vector: List[float]


EmbeddingMap = Dict[ParameterKey, ParameterEmbedding]


def render_embedding_text(param: ParameterDef) -> str:
    """`DESC <description> TYPE <type>` with single-space separators"""
    if not param.description or not param.value_type:
        raise MissingField(f"parameter {param.name!r} lacks a description or type; run completion first")
    return f"{DESC_TAG} {param.description} {TYPE_TAG} {param.value_type}"


class EmbeddingCache:
    """Text-keyed vector cache persisted as a content-addressed JSONL sidecar"""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path else None
        self._vectors: Dict[str, List[float]] = {}
        self._texts: Dict[str, str] = {}
        self._lock = asyncio.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    # a run interrupted mid-write leaves at most one torn line
                    logger.warning("Ignoring unreadable cache line in %s", self.path)
                    continue
                self._vectors[record["text_hash"]] = record["vector"]
                self._texts[record["text_hash"]] = record["text"]

    def __len__(self) -> int:
        return len(self._vectors)

    def get(self, text: str) -> Optional[List[float]]:
        return self._vectors.get(sha256_text(text))

    async def put_many(self, texts: Sequence[str], vectors: Sequence[List[float]]) -> None:
        async with self._lock:
            records = []
            for text, vector in zip(texts, vectors):
                text_hash = sha256_text(text)
                if text_hash in self._vectors:
                    continue
                self._vectors[text_hash] = vector
                self._texts[text_hash] = text
                records.append({"text_hash": text_hash, "text": text, "vector": vector})
            if self.path and records:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    for record in records:
                        f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")

    def items(self):
        for text_hash, vector in self._vectors.items():
            yield self._texts[text_hash], vector


async def embed_parameters(
    corpus: Sequence[FunctionSpec],
    gw: LLMGateway,
    cache: Optional[EmbeddingCache] = None,
    batch_size: int = 64,
) -> EmbeddingMap:
    """Embed every input and output parameter of the corpus, one vector per rendered text"""
    cache = cache if cache is not None else EmbeddingCache()
    texts_by_key: Dict[ParameterKey, str] = {}
    for spec in corpus:
        for direction, params in (("input", spec.inputs), ("output", spec.outputs)):
            for param in params:
                key = ParameterKey(spec_id=spec.id, direction=direction, param_name=param.name)
                texts_by_key[key] = render_embedding_text(param)

    pending = sorted({t for t in texts_by_key.values() if cache.get(t) is None})
    batches = [pending[i:i + batch_size] for i in range(0, len(pending), batch_size)]
    if batches:
        logger.info("Embedding %d new texts in %d batches (%d cached)", len(pending), len(batches), len(cache))

    async def run_batch(batch: List[str]) -> None:
        vectors = await gw.embed(batch)
        await cache.put_many(batch, vectors)

    # let every batch finish so completed ones reach the cache before an error propagates
    results = await asyncio.gather(*(run_batch(b) for b in batches), return_exceptions=True)
    errors = [r for r in results if isinstance(r, BaseException)]
    if errors:
        raise errors[0]

    return {
        key: ParameterEmbedding(key=key, text=text, vector=cache.get(text))
        for key, text in texts_by_key.items()
    }


def embeddings_from_cache(corpus: Sequence[FunctionSpec], cache: EmbeddingCache) -> EmbeddingMap:
    """Map parameters to already-stored vectors; uncached parameters are left out"""
    result: EmbeddingMap = {}
    for spec in corpus:
        for direction, params in (("input", spec.inputs), ("output", spec.outputs)):
            for param in params:
                text = render_embedding_text(param)
                vector = cache.get(text)
                if vector is None:
                    continue
                key = ParameterKey(spec_id=spec.id, direction=direction, param_name=param.name)
                result[key] = ParameterEmbedding(key=key, text=text, vector=vector)
    return result


def embedding_records(emb: EmbeddingMap) -> List[Dict]:
    """One {text_hash, text, vector} record per distinct text, ordered by hash"""
    records = {sha256_text(e.text): {"text_hash": sha256_text(e.text), "text": e.text, "vector": e.vector} for e in emb.values()}
    return [records[h] for h in sorted(records)]
