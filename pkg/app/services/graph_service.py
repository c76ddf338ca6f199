import asyncio
import random
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.preprocessing import normalize

from app.exceptions import JudgeFormatError, MissingEmbedding, NoEdges
from app.models.function_spec import FunctionSpec
from app.models.graph import (
    ChainSampling,
    Edge,
    FunctionChain,
    FunctionGraph,
    GraphConfig,
    ValidatorResult,
    ValidatorScores,
)
from app.services import prompts
from app.services.embedding_service import EmbeddingMap, ParameterKey
from app.services.gateway import LLMGateway
from app.services.strict_reply import ask_strict, load_json_object
from app.utils.jsonl import sha256_text
from app.utils.logger import get_logger

logger = get_logger(__name__)

NO_CANDIDATE = float("-inf")
VALIDATOR_FIELDS = ("Field transitivity", "Potential user intent path coherence")


def _matrix(spec: FunctionSpec, direction: str, emb: EmbeddingMap) -> Tuple[List[str], np.ndarray]:
    params = spec.outputs if direction == "output" else spec.inputs
    names = sorted(p.name for p in params)
    rows = []
    for name in names:
        entry = emb.get(ParameterKey(spec_id=spec.id, direction=direction, param_name=name))
        if entry is None:
            raise MissingEmbedding(f"{spec.name}.{direction}.{name} has no embedding")
        rows.append(entry.vector)
    return names, np.asarray(rows, dtype=np.float64)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine of rows; any pair touching a zero vector scores -inf"""
    zero_a = ~np.any(a, axis=1)
    zero_b = ~np.any(b, axis=1)
    sims = normalize(a) @ normalize(b).T
    sims[zero_a, :] = NO_CANDIDATE
    sims[:, zero_b] = NO_CANDIDATE
    return sims


def edge_score(src: FunctionSpec, dst: FunctionSpec, emb: EmbeddingMap) -> Tuple[float, Optional[Tuple[str, str]]]:
    """Max cosine over (output of src, input of dst) pairs.

    Ties go to the lexicographically smallest (output name, input name).
    Returns (NO_CANDIDATE, None) when no pair exists.
    """
    if src.id == dst.id:
        raise ValueError("edge_score needs two distinct specs")
    if not src.outputs or not dst.inputs:
        return NO_CANDIDATE, None
    out_names, outs = _matrix(src, "output", emb)
    in_names, ins = _matrix(dst, "input", emb)
    sims = cosine_matrix(outs, ins)
    flat = int(np.argmax(sims))
    i, j = divmod(flat, sims.shape[1])
    score = float(sims[i, j])
    if score == NO_CANDIDATE:
        return NO_CANDIDATE, None
    return score, (out_names[i], in_names[j])


def parse_validator_reply(reply: str) -> ValidatorScores:
    obj = load_json_object(reply, JudgeFormatError)
    if set(obj) != set(VALIDATOR_FIELDS):
        raise JudgeFormatError(f"validator reply must have exactly {VALIDATOR_FIELDS}, got {sorted(obj)}")
    values = []
    for field in VALIDATOR_FIELDS:
        value = obj[field]
        if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value <= 9:
            raise JudgeFormatError(f"{field!r} must be an integer 0-9, got {value!r}")
        values.append(value)
    return ValidatorScores(field_transitivity=values[0], intent_coherence=values[1])


async def validate_edge(
    gw: LLMGateway,
    src: FunctionSpec,
    dst: FunctionSpec,
    min_validator_score: int = 6,
    attempts: int = 2,
) -> ValidatorResult:
    """Ask the validator model; a malformed reply rejects the candidate"""
    try:
        scores, raw = await ask_strict(
            gw, prompts.edge_validation(src, dst), "validate_edge", parse_validator_reply, JudgeFormatError, attempts
        )
    except JudgeFormatError as exc:
        logger.info("Rejecting %s -> %s: %s", src.name, dst.name, exc)
        return ValidatorResult(accepted=False, raw_reply=getattr(exc, "raw_reply", ""))
    accepted = min(scores.field_transitivity, scores.intent_coherence) >= min_validator_score
    return ValidatorResult(scores=scores, accepted=accepted, raw_reply=raw)


def _pair_rng(seed: int, src_id: str) -> random.Random:
    """Per-source RNG so injection draws do not depend on which sources were already built"""
    return random.Random(int(sha256_text(f"{seed}:{src_id}")[:16], 16))


async def build_graph(
    corpus: Sequence[FunctionSpec],
    emb: EmbeddingMap,
    gw: LLMGateway,
    cfg: GraphConfig,
    attempts: int = 2,
    done: Optional[Dict[str, List[Edge]]] = None,
    on_source: Optional[Callable[[str, List[Edge]], None]] = None,
) -> FunctionGraph:
    """Score every ordered pair, validate threshold candidates, inject random edges.

    `done` holds adjacency already built for some sources (resume); `on_source`
    is called after each source node so callers can persist partial progress.
    """
    specs = sorted(corpus, key=lambda s: s.id)
    adjacency: Dict[str, List[Edge]] = {}
    done = done or {}

    for src in specs:
        if src.id in done:
            adjacency[src.id] = done[src.id]
            continue
        rng = _pair_rng(cfg.rng_seed, src.id)
        edges: Dict[str, Edge] = {}
        candidates: List[Tuple[FunctionSpec, float, Tuple[str, str]]] = []
        for dst in specs:
            if dst.id == src.id:
                continue
            inject = rng.random() < cfg.random_edge_rate
            score, pair = edge_score(src, dst, emb)
            if inject:
                edges[dst.id] = Edge(
                    src=src.id,
                    dst=dst.id,
                    score=None if score == NO_CANDIDATE else score,
                    best_pair=pair,
                    injected=True,
                )
            elif score > cfg.tau:
                candidates.append((dst, score, pair))

        results = await asyncio.gather(*(
            validate_edge(gw, src, dst, cfg.min_validator_score, attempts) for dst, _, _ in candidates
        ))
        for (dst, score, pair), verdict in zip(candidates, results):
            if verdict.accepted:
                edges[dst.id] = Edge(src=src.id, dst=dst.id, score=score, best_pair=pair, validator_scores=verdict.scores)

        adjacency[src.id] = [edges[k] for k in sorted(edges)]
        if on_source is not None:
            on_source(src.id, adjacency[src.id])

    graph = FunctionGraph(nodes=[s.id for s in specs], edges=adjacency, config=cfg)
    logger.info("Built graph with %d nodes and %d edges", len(graph.nodes), graph.edge_count)
    return graph


def sample_chains(
    graph: FunctionGraph,
    cfg: GraphConfig,
    count: int,
    names: Optional[Dict[str, str]] = None,
) -> ChainSampling:
    """Budget-limited uniform random walks.

    Each chain draws L from [walk_len_min, walk_len_max]; a walk that dead-ends
    before walk_len_min edges is discarded and restarted up to
    max_start_attempts times. Visit budgets are global over the run and only
    charged for emitted chains.
    """
    if graph.edge_count == 0:
        raise NoEdges("graph has no edges to walk")
    names = names or {}
    rng = random.Random(cfg.rng_seed)
    budget = {node: cfg.node_visit_budget for node in sorted(graph.nodes)}
    adjacency = {node: sorted(graph.out_edges(node), key=lambda e: e.dst) for node in budget}
    result = ChainSampling(requested=count)

    def available(node: str, used: Dict[str, int]) -> bool:
        return budget[node] - used.get(node, 0) > 0

    def walk(length: int) -> Optional[List[str]]:
        starts = [
            n for n in budget
            if budget[n] > 0 and any(available(e.dst, {}) for e in adjacency[n])
        ]
        if not starts:
            return None
        current = rng.choice(starts)
        used = {current: 1}
        steps = [current]
        while len(steps) - 1 < length:
            moves = [e.dst for e in adjacency[current] if available(e.dst, used)]
            if not moves:
                break
            current = rng.choice(moves)
            used[current] = used.get(current, 0) + 1
            steps.append(current)
        return steps

    while len(result.chains) < count:
        length = rng.randint(cfg.walk_len_min, cfg.walk_len_max)
        chain_steps: Optional[List[str]] = None
        for _ in range(cfg.max_start_attempts):
            steps = walk(length)
            if steps is None:
                break
            if len(steps) - 1 >= cfg.walk_len_min:
                chain_steps = steps
                break
        if chain_steps is None:
            result.exhausted = True
            logger.warning("Chain sampling stopped early: %d of %d chains", len(result.chains), count)
            break
        for node in chain_steps:
            budget[node] -= 1
        result.chains.append(FunctionChain(
            id=f"chain-{len(result.chains):05d}",
            steps=chain_steps,
            names=[names.get(n, n) for n in chain_steps],
        ))
    return result


def check_chain(graph: FunctionGraph, chain: FunctionChain) -> bool:
    """Every consecutive pair of the chain is an edge of the graph"""
    return all(graph.has_edge(a, b) for a, b in zip(chain.steps, chain.steps[1:]))


def visit_counts(chains: Sequence[FunctionChain]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for chain in chains:
        for node in chain.steps:
            counts[node] = counts.get(node, 0) + 1
    return counts
