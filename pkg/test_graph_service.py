import json
import math
import random
import time

import pytest

from conftest import scripted_gateway
from app.exceptions import JudgeFormatError, NoEdges
from app.models.function_spec import FunctionSpec, ParameterDef, Provenance
from app.models.graph import Edge, FunctionGraph, GraphConfig
from app.services.embedding_service import ParameterEmbedding, ParameterKey, embed_parameters
from app.services.gateway import mock_backend
from app.services.graph_service import (
    NO_CANDIDATE,
    build_graph,
    check_chain,
    edge_score,
    parse_validator_reply,
    sample_chains,
    validate_edge,
    visit_counts,
)
from app.services.spec_service import with_id

ACCEPT = json.dumps({"Field transitivity": 9, "Potential user intent path coherence": 9})


def _param(name):
    return ParameterDef(name=name, description=f"about {name}", value_type="string")


def _make_spec(index, n_in, n_out):
    spec = FunctionSpec(
        id="",
        name=f"fn_{index:03d}",
        description=f"function {index}",
        inputs=[_param(f"in{k}") for k in range(n_in)],
        outputs=[_param(f"out{k}") for k in range(n_out)],
        provenance=Provenance(source="synthetic"),
    )
    return with_id(spec)


def _random_corpus(n, seed=0, dim=4):
    rng = random.Random(seed)
    specs, emb = [], {}
    for i in range(n):
        spec = _make_spec(i, rng.randint(1, 3), rng.randint(0, 3))
        specs.append(spec)
        for direction, params in (("input", spec.inputs), ("output", spec.outputs)):
            for p in params:
                key = ParameterKey(spec_id=spec.id, direction=direction, param_name=p.name)
                emb[key] = ParameterEmbedding(key=key, text=f"{spec.id}/{direction}/{p.name}", vector=[rng.gauss(0, 1) for _ in range(dim)])
    return specs, emb


def _cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def _brute_force_edges(specs, emb, tau):
    edges = set()
    for src in specs:
        for dst in specs:
            if src.id == dst.id:
                continue
            best = NO_CANDIDATE
            for o in src.outputs:
                for i in dst.inputs:
                    u = emb[ParameterKey(spec_id=src.id, direction="output", param_name=o.name)].vector
                    v = emb[ParameterKey(spec_id=dst.id, direction="input", param_name=i.name)].vector
                    best = max(best, _cos(u, v))
            if best > tau:
                edges.add((src.id, dst.id))
    return edges


@pytest.mark.asyncio
async def test_edges_match_brute_force():
    specs, emb = _random_corpus(50)
    gw = scripted_gateway(default={"validate_edge": ACCEPT})
    started = time.perf_counter()
    graph = await build_graph(specs, emb, gw, GraphConfig(tau=0.70, random_edge_rate=0.0))
    elapsed = time.perf_counter() - started

    built = {(e.src, e.dst) for e in graph.iter_edges()}
    expected = _brute_force_edges(specs, emb, 0.70)
    assert built == expected
    assert expected
    assert gw.calls["validate_edge"] == len(expected)
    assert elapsed < 5


def test_edge_score_reports_best_pair():
    specs, emb = _random_corpus(2, seed=4)
    src, dst = specs
    score, pair = edge_score(src, dst, emb)
    if src.outputs:
        assert pair[0] in {p.name for p in src.outputs}
        assert pair[1] in {p.name for p in dst.inputs}
        assert -1.0 <= score <= 1.0


def test_edge_score_without_outputs():
    src = _make_spec(1, 1, 0)
    dst = _make_spec(2, 1, 1)
    assert edge_score(src, dst, {}) == (NO_CANDIDATE, None)


@pytest.mark.asyncio
async def test_identical_texts_survive_high_threshold():
    # a -> b -> c link through identical output/input texts
    def spec(name, inputs, outputs):
        return with_id(FunctionSpec(
            id="", name=name, provenance=Provenance(source="t"),
            inputs=[ParameterDef(name=k, description=d, value_type="string") for k, d in inputs],
            outputs=[ParameterDef(name=k, description=d, value_type="string") for k, d in outputs],
        ))

    a = spec("a", [("q", "Search query")], [("user_id", "Identifier of the user")])
    b = spec("b", [("uid", "Identifier of the user")], [("order_id", "Identifier of the order")])
    c = spec("c", [("oid", "Identifier of the order")], [("status", "Delivery status")])
    emb = await embed_parameters([a, b, c], mock_backend(seed=1))
    gw = scripted_gateway(default={"validate_edge": ACCEPT})
    graph = await build_graph([a, b, c], emb, gw, GraphConfig(tau=0.99))
    assert {(e.src, e.dst) for e in graph.iter_edges()} == {(a.id, b.id), (b.id, c.id)}
    edge = graph.out_edges(a.id)[0]
    assert edge.best_pair == ("user_id", "uid")
    assert edge.score == pytest.approx(1.0)
    assert edge.validator_scores.field_transitivity == 9


@pytest.mark.asyncio
async def test_full_injection_rate_connects_every_pair():
    specs, emb = _random_corpus(8, seed=2)
    gw = scripted_gateway()
    graph = await build_graph(specs, emb, gw, GraphConfig(random_edge_rate=1.0))
    assert graph.edge_count == 8 * 7
    assert all(e.injected for e in graph.iter_edges())
    assert sum(gw.calls.values()) == 0


@pytest.mark.asyncio
async def test_validator_rejections():
    specs, emb = _random_corpus(30, seed=5)
    low = json.dumps({"Field transitivity": 9, "Potential user intent path coherence": 5})
    graph = await build_graph(specs, emb, scripted_gateway(default={"validate_edge": low}), GraphConfig())
    assert graph.edge_count == 0

    garbled = await build_graph(specs, emb, scripted_gateway(default={"validate_edge": "seven"}), GraphConfig())
    assert garbled.edge_count == 0


@pytest.mark.asyncio
async def test_validate_edge_threshold_is_min_of_scores():
    src, dst = _make_spec(1, 1, 1), _make_spec(2, 1, 1)
    ok = json.dumps({"Field transitivity": 6, "Potential user intent path coherence": 8})
    result = await validate_edge(scripted_gateway({"validate_edge": [ok]}), src, dst)
    assert result.accepted
    result = await validate_edge(scripted_gateway({"validate_edge": [ok]}), src, dst, min_validator_score=7)
    assert not result.accepted


@pytest.mark.parametrize("reply", [
    '{"Field transitivity": 7}',
    '{"Field transitivity": 7, "Potential user intent path coherence": 7, "extra": 1}',
    '{"Field transitivity": 10, "Potential user intent path coherence": 7}',
    '{"Field transitivity": "7", "Potential user intent path coherence": 7}',
    '{"Field transitivity": true, "Potential user intent path coherence": 7}',
    "7, 7",
])
def test_validator_reply_strict(reply):
    with pytest.raises(JudgeFormatError):
        parse_validator_reply(reply)


def test_validator_reply_fenced():
    scores = parse_validator_reply('```json\n{"Field transitivity": 3, "Potential user intent path coherence": 8}\n```')
    assert (scores.field_transitivity, scores.intent_coherence) == (3, 8)


@pytest.mark.asyncio
async def test_resumed_build_matches_full_build():
    specs, emb = _random_corpus(20, seed=9)
    cfg = GraphConfig(random_edge_rate=0.1, rng_seed=3)
    saved = {}
    full = await build_graph(specs, emb, scripted_gateway(default={"validate_edge": ACCEPT}), cfg, on_source=saved.__setitem__)
    done = dict(list(sorted(saved.items()))[:10])
    gw = scripted_gateway(default={"validate_edge": ACCEPT})
    resumed = await build_graph(specs, emb, gw, cfg, done=done)
    assert resumed.edges == full.edges
    assert set(saved) == {s.id for s in specs}


def _synthetic_graph(n, out_degree, cfg, seed=0):
    rng = random.Random(seed)
    nodes = [f"n{i:03d}" for i in range(n)]
    edges = {}
    for node in nodes:
        targets = rng.sample([m for m in nodes if m != node], out_degree)
        edges[node] = [Edge(src=node, dst=t) for t in sorted(targets)]
    return FunctionGraph(nodes=nodes, edges=edges, config=cfg)


def test_chain_validity_on_large_graph():
    cfg = GraphConfig(walk_len_min=5, walk_len_max=20, node_visit_budget=200, rng_seed=1)
    graph = _synthetic_graph(200, 5, cfg)
    started = time.perf_counter()
    sampling = sample_chains(graph, cfg, 1000)
    elapsed = time.perf_counter() - started

    assert len(sampling.chains) == 1000
    assert not sampling.exhausted
    for chain in sampling.chains:
        assert check_chain(graph, chain)
        assert 5 <= chain.length <= 20
    assert max(visit_counts(sampling.chains).values()) <= 200
    assert elapsed < 10


def test_sampling_is_seeded():
    cfg = GraphConfig(walk_len_min=2, walk_len_max=6, node_visit_budget=10, rng_seed=4)
    graph = _synthetic_graph(30, 3, cfg)
    first = sample_chains(graph, cfg, 20)
    again = sample_chains(graph, cfg, 20)
    assert [c.steps for c in first.chains] == [c.steps for c in again.chains]
    other = sample_chains(graph, cfg.model_copy(update={"rng_seed": 5}), 20)
    assert [c.steps for c in other.chains] != [c.steps for c in first.chains]


def test_cycle_walk():
    nodes = [f"c{i}" for i in range(6)]
    edges = {n: [Edge(src=n, dst=nodes[(i + 1) % 6])] for i, n in enumerate(nodes)}
    cfg = GraphConfig(walk_len_min=5, walk_len_max=5, node_visit_budget=10)
    graph = FunctionGraph(nodes=nodes, edges=edges, config=cfg)
    sampling = sample_chains(graph, cfg, 3, names={"c0": "first"})
    for chain in sampling.chains:
        assert len(chain.steps) == 6
        assert check_chain(graph, chain)
        assert sorted(chain.steps) == nodes
    assert sampling.chains[0].id == "chain-00000"
    assert "first" in sampling.chains[0].names


def test_star_center_budget():
    leaves = [f"leaf{i}" for i in range(5)]
    edges = {"hub": [Edge(src="hub", dst=leaf) for leaf in leaves]}
    cfg = GraphConfig(walk_len_min=1, walk_len_max=1, node_visit_budget=3)
    graph = FunctionGraph(nodes=["hub", *leaves], edges=edges, config=cfg)
    sampling = sample_chains(graph, cfg, 10)
    assert len(sampling.chains) == 3
    assert sampling.exhausted
    assert visit_counts(sampling.chains)["hub"] == 3
    assert all(chain.steps[0] == "hub" for chain in sampling.chains)


def test_empty_graph_raises():
    cfg = GraphConfig()
    graph = FunctionGraph(nodes=["a", "b"], edges={}, config=cfg)
    with pytest.raises(NoEdges):
        sample_chains(graph, cfg, 1)


def test_short_dead_end_walks_are_discarded():
    # a -> b is the only edge; walks can never reach 2 edges
    cfg = GraphConfig(walk_len_min=2, walk_len_max=3)
    graph = FunctionGraph(nodes=["a", "b"], edges={"a": [Edge(src="a", dst="b")]}, config=cfg)
    sampling = sample_chains(graph, cfg, 2)
    assert sampling.chains == []
    assert sampling.exhausted


def test_self_loop_rejected():
    with pytest.raises(ValueError):
        Edge(src="a", dst="a")
