import asyncio
import json
import time
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

from app.config import PipelineConfig, settings
from app.exceptions import (
    ConfigHashMismatch,
    GatewayError,
    IntentFormatError,
    StageInputMissing,
)
from app.models.function_spec import FunctionSpec
from app.models.gateway import GatewayConfig
from app.models.graph import Edge, FunctionChain, FunctionGraph, GraphConfig
from app.models.pipeline import StageManifest, StatsReport
from app.models.quality import AnnotatedTrajectory, Verdict
from app.models.sample import ManifestRow, TrainingSample
from app.models.trajectory import Message, Role, ToolCall, Trajectory, UserIntent
from app.services import analytics_service, graph_service, sampler_service, spec_service, synthesis_service
from app.services.embedding_service import (
    EmbeddingCache,
    embed_parameters,
    embedding_records,
    embeddings_from_cache,
)
from app.services.gateway import LLMGateway, build_gateway
from app.services.quality_service import apply_quality
from app.utils.jsonl import append_jsonl, dumps, file_hash, read_jsonl, sha256_text, write_json, write_jsonl
from app.utils.logger import get_logger

logger = get_logger(__name__)

STAGES = ("normalize", "embed", "graph", "chains", "intents", "simulate", "filter", "split", "stats")

# primary artifact per stage; its hash is the next stage's input hash
PRIMARY_OUTPUT = {
    "normalize": "functions",
    "embed": "embeddings",
    "graph": "graph",
    "chains": "chains",
    "intents": "intents",
    "simulate": "trajectories",
    "filter": "annotated",
    "split": "samples",
    "stats": "stats",
}

REQUIRED_INPUTS = {
    "normalize": (),
    "embed": ("functions",),
    "graph": ("functions", "embeddings"),
    "chains": ("functions", "graph", "graph_meta"),
    "intents": ("functions", "chains"),
    "simulate": ("functions", "chains", "intents"),
    "filter": ("trajectories",),
    "split": ("trajectories", "annotated"),
    "stats": ("intents", "trajectories", "samples"),
}

# stages whose items are checkpointed one by one and skipped on resume
ITEMIZED = ("graph", "intents", "simulate")


def stage_config(cfg: PipelineConfig, stage: str) -> Dict[str, Any]:
    """The part of the config that can change a stage's output"""
    gw = cfg.gateways

    def endpoint(c: GatewayConfig) -> Dict[str, Any]:
        return c.model_dump(include={"backend", "model", "base_url", "temperature", "mock_seed", "mock_dimension"})

    subsets = {
        "normalize": lambda: {
            "inputs": [i.model_dump() for i in cfg.inputs],
            "completion": endpoint(gw.completion),
            "format_attempts": cfg.format_attempts,
        },
        "embed": lambda: {"embedder": endpoint(gw.embedder)},
        "graph": lambda: {
            "graph": cfg.seeded_graph().model_dump(),
            "validator": endpoint(gw.validator),
            "format_attempts": cfg.format_attempts,
        },
        "chains": lambda: {"graph": cfg.seeded_graph().model_dump(), "count": cfg.chains.count},
        "intents": lambda: {"intent": endpoint(gw.intent), "format_attempts": cfg.format_attempts},
        "simulate": lambda: {
            "user": endpoint(gw.user),
            "assistant": endpoint(gw.assistant),
            "tool": endpoint(gw.tool),
            "simulation": cfg.simulation.model_dump(),
            "native_tools": cfg.native_tools,
            "rng_seed": cfg.rng_seed,
            "format_attempts": cfg.format_attempts,
        },
        "filter": lambda: {"judge": endpoint(gw.judge), "format_attempts": cfg.format_attempts},
        "split": lambda: {},
        "stats": lambda: {"domain": endpoint(gw.domain), "format_attempts": cfg.format_attempts},
    }
    return subsets[stage]()


def config_hash(cfg: PipelineConfig, stage: str) -> str:
    return sha256_text(dumps(stage_config(cfg, stage)))


def trajectory_seed(rng_seed: int, trajectory_id: str) -> int:
    return int(sha256_text(f"{rng_seed}:{trajectory_id}")[:8], 16)


def load_sample(record: Dict[str, Any]) -> TrainingSample:
    """Inverse of the samples.jsonl record layout"""
    context = []
    for m in record["messages"]:
        if m["role"] == "assistant":
            context.append(Message(
                role=Role.ASSISTANT,
                think=m.get("think", ""),
                content=m.get("content", ""),
                tool_calls=[ToolCall(**c) for c in m.get("tool_calls") or []],
            ))
        elif m["role"] == "tool":
            context.append(Message(role=Role.TOOL, name=m.get("name"), tool_result=m.get("content", "")))
        else:
            context.append(Message(role=Role.USER, content=m.get("content", "")))
    return TrainingSample(
        sample_id=record["sample_id"],
        source_trajectory=record["source_trajectory"],
        source=record.get("source", "synthesized"),
        anchor_index=record["anchor_index"],
        context=context,
        tools=record.get("tools") or [],
        loss=record.get("loss", "anchor_only"),
    )


class PipelineService:
    """Runs pipeline stages against one work directory"""

    def __init__(self, cfg: PipelineConfig, resume: bool = False, limit: Optional[int] = None):
        self.cfg = cfg
        self.resume = resume
        self.limit = limit
        self.work_dir = Path(cfg.work_dir)
        self._gateways: List[LLMGateway] = []

    # paths

    def path(self, name: str) -> Path:
        return self.cfg.work_path(name)

    def manifest_path(self, stage: str) -> Path:
        return self.work_dir / "manifests" / f"{stage}.manifest.json"

    def partial_path(self, stage: str) -> Path:
        return self.work_dir / "partial" / f"{stage}.jsonl"

    def audit_path(self) -> Optional[Path]:
        if settings.TOOLFORGE_AUDIT_LOG:
            return Path(settings.TOOLFORGE_AUDIT_LOG)
        return self.work_dir / "audit.jsonl" if self.cfg.audit_log else None

    def read_manifest(self, stage: str) -> Optional[StageManifest]:
        path = self.manifest_path(stage)
        if not path.exists():
            return None
        return StageManifest.model_validate_json(path.read_text(encoding="utf-8"))

    # helpers

    def gateway(self, config: GatewayConfig) -> LLMGateway:
        gw = build_gateway(config, self.audit_path())
        self._gateways.append(gw)
        return gw

    async def _close_gateways(self) -> None:
        while self._gateways:
            await self._gateways.pop().aclose()

    def _check_inputs(self, stage: str) -> None:
        if stage == "normalize":
            if not self.cfg.inputs:
                raise StageInputMissing("normalize needs at least one input file")
            missing = [i.path for i in self.cfg.inputs if not Path(i.path).exists()]
        else:
            missing = [str(self.path(n)) for n in REQUIRED_INPUTS[stage] if not self.path(n).exists()]
        if missing:
            raise StageInputMissing(f"{stage}: missing inputs {missing}")

    def _input_hash(self, stage: str) -> str:
        if stage == "normalize":
            return sha256_text("".join(file_hash(i.path) for i in self.cfg.inputs))
        previous = STAGES[STAGES.index(stage) - 1]
        return file_hash(self.path(PRIMARY_OUTPUT[previous]))

    def _reusable(self, stage: str, key: str, previous: Optional[StageManifest], input_hash: str) -> Dict[str, Dict[str, Any]]:
        """Items finished by an earlier run of this stage, keyed by item id"""
        if not self.resume or previous is None:
            return {}
        if previous.input_hash != input_hash:
            logger.warning("%s: upstream output changed since the last run, recomputing every item", stage)
            return {}
        done: Dict[str, Dict[str, Any]] = {}
        primary = self.path(PRIMARY_OUTPUT[stage])
        if previous.complete and primary.exists():
            for record in read_jsonl(primary):
                done[record[key]] = record
        partial = self.partial_path(stage)
        if partial.exists():
            with open(partial, "r", encoding="utf-8") as f:
                for line in f:
                    try:
                        record = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("Ignoring torn checkpoint line in %s", partial)
                        continue
                    done[record[key]] = record
        return done

    def _corpus(self) -> List[FunctionSpec]:
        return [FunctionSpec.model_validate(r) for r in read_jsonl(self.path("functions"))]

    def _chains(self) -> List[FunctionChain]:
        return [FunctionChain.model_validate(r) for r in read_jsonl(self.path("chains"))]

    def _intents(self) -> List[UserIntent]:
        return [UserIntent.model_validate(r) for r in read_jsonl(self.path("intents"))]

    def _trajectories(self) -> List[Trajectory]:
        return [Trajectory.model_validate(r) for r in read_jsonl(self.path("trajectories"))]

    def _capped(self, items: Sequence[Any]) -> Sequence[Any]:
        return items[: self.limit] if self.limit is not None else items

    # orchestration

    async def run_stage(self, stage: str) -> StageManifest:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
        self._check_inputs(stage)
        started = time.perf_counter()
        current_hash = config_hash(self.cfg, stage)
        previous = self.read_manifest(stage)
        if self.resume and previous is not None and previous.config_hash != current_hash:
            raise ConfigHashMismatch(
                f"{stage}: config hash {current_hash[:12]} differs from the recorded {previous.config_hash[:12]}"
            )
        input_hash = self._input_hash(stage)

        if (
            self.resume and previous is not None and previous.complete and stage not in ITEMIZED
            and previous.input_hash == input_hash and all(Path(p).exists() for p in previous.outputs)
        ):
            logger.info("Stage %s already complete, skipping", stage)
            return previous

        if not self.resume and self.partial_path(stage).exists():
            self.partial_path(stage).unlink()

        manifest = StageManifest(stage=stage, config_hash=current_hash, seed=self.cfg.rng_seed, input_hash=input_hash)
        # in-progress marker so a crashed run still records which config it used
        write_json(self.manifest_path(stage), manifest)
        logger.info("Stage %s started", stage)
        try:
            await getattr(self, f"_stage_{stage}")(manifest, previous)
        finally:
            await self._close_gateways()

        manifest.output_hash = file_hash(self.path(PRIMARY_OUTPUT[stage]))
        manifest.complete = True
        manifest.duration_seconds = round(time.perf_counter() - started, 3)
        write_json(self.manifest_path(stage), manifest)
        if self.partial_path(stage).exists():
            self.partial_path(stage).unlink()
        logger.info("Stage %s finished in %.1fs: %s", stage, manifest.duration_seconds, manifest.item_counts)
        return manifest

    async def run_all(self, stages: Iterable[str] = STAGES) -> List[StageManifest]:
        return [await self.run_stage(stage) for stage in stages]

    def _record_calls(self, manifest: StageManifest, **gateways: LLMGateway) -> None:
        manifest.extra["calls"] = {role: dict(gw.calls) for role, gw in gateways.items()}
        manifest.extra["retries"] = {role: gw.retries for role, gw in gateways.items()}

    # stages

    async def _stage_normalize(self, manifest: StageManifest, previous: Optional[StageManifest]) -> None:
        raw: List[FunctionSpec] = []
        rejected = 0
        for item in self.cfg.inputs:
            specs, bad = spec_service.load_raw_records(Path(item.path), item.source)
            raw.extend(specs)
            rejected += bad
        unique = spec_service.dedupe(raw)
        gw = self.gateway(self.cfg.gateways.completion)
        kept, dropped = await spec_service.complete_corpus(unique, gw, self.cfg.format_attempts)
        kept.sort(key=lambda s: s.id)
        out = self.path("functions")
        write_jsonl(out, kept)
        manifest.outputs = [str(out)]
        manifest.completed_ids = [s.id for s in kept]
        manifest.item_counts = {
            "raw": len(raw) + rejected,
            "rejected": rejected,
            "duplicates": len(raw) - len(unique),
            "completion_failed": len(dropped),
            "kept": len(kept),
        }
        self._record_calls(manifest, completion=gw)

    async def _stage_embed(self, manifest: StageManifest, previous: Optional[StageManifest]) -> None:
        corpus = self._corpus()
        gw = self.gateway(self.cfg.gateways.embedder)
        cache = EmbeddingCache(self.path("embedding_cache"))
        cached = len(cache)
        emb = await embed_parameters(corpus, gw, cache, self.cfg.embedding_batch_size)
        records = embedding_records(emb)
        out = self.path("embeddings")
        write_jsonl(out, records)
        manifest.outputs = [str(out), str(self.path("embedding_cache"))]
        manifest.item_counts = {"parameters": len(emb), "texts": len(records), "cached_before": cached}
        self._record_calls(manifest, embedder=gw)

    async def _stage_graph(self, manifest: StageManifest, previous: Optional[StageManifest]) -> None:
        corpus = self._corpus()
        emb = embeddings_from_cache(corpus, EmbeddingCache(self.path("embeddings")))
        graph_cfg = self.cfg.seeded_graph()
        reused = self._reusable("graph", "src", previous, manifest.input_hash)
        done = {src: [Edge.model_validate(e) for e in r["edges"]] for src, r in reused.items()}
        partial = self.partial_path("graph")

        def checkpoint(src: str, edges: List[Edge]) -> None:
            append_jsonl(partial, [{"src": src, "edges": [e.model_dump(mode="json") for e in edges]}])

        gw = self.gateway(self.cfg.gateways.validator)
        graph = await graph_service.build_graph(corpus, emb, gw, graph_cfg, self.cfg.format_attempts, done, checkpoint)
        out = self.path("graph")
        write_jsonl(out, ({"src": src, "edges": [e.model_dump(mode="json") for e in graph.edges.get(src, [])]} for src in sorted(graph.nodes)))
        write_json(self.path("graph_meta"), {
            "nodes": graph.nodes,
            "config": graph.config.model_dump(),
            "edge_count": graph.edge_count,
            "injected": sum(1 for e in graph.iter_edges() if e.injected),
        })
        manifest.outputs = [str(out), str(self.path("graph_meta"))]
        manifest.completed_ids = sorted(graph.nodes)
        manifest.item_counts = {
            "nodes": len(graph.nodes),
            "edges": graph.edge_count,
            "injected": sum(1 for e in graph.iter_edges() if e.injected),
            "reused": len([n for n in graph.nodes if n in done]),
            "new": len([n for n in graph.nodes if n not in done]),
        }
        self._record_calls(manifest, validator=gw)

    def load_graph(self) -> FunctionGraph:
        meta = json.loads(self.path("graph_meta").read_text(encoding="utf-8"))
        edges = {r["src"]: [Edge.model_validate(e) for e in r["edges"]] for r in read_jsonl(self.path("graph"))}
        return FunctionGraph(nodes=meta["nodes"], edges=edges, config=GraphConfig.model_validate(meta["config"]))

    async def _stage_chains(self, manifest: StageManifest, previous: Optional[StageManifest]) -> None:
        graph = self.load_graph()
        names = {s.id: s.name for s in self._corpus()}
        count = min(self.cfg.chains.count, self.limit) if self.limit is not None else self.cfg.chains.count
        sampling = graph_service.sample_chains(graph, self.cfg.seeded_graph(), count, names)
        out = self.path("chains")
        write_jsonl(out, sampling.chains)
        manifest.outputs = [str(out)]
        manifest.completed_ids = [c.id for c in sampling.chains]
        manifest.item_counts = {"requested": count, "chains": len(sampling.chains)}
        manifest.extra["exhausted"] = sampling.exhausted

    async def _stage_intents(self, manifest: StageManifest, previous: Optional[StageManifest]) -> None:
        corpus = {s.id: s for s in self._corpus()}
        chains = self._capped(self._chains())
        reused = self._reusable("intents", "chain_ref", previous, manifest.input_hash)
        partial = self.partial_path("intents")
        gw = self.gateway(self.cfg.gateways.intent)
        results: Dict[str, UserIntent] = {k: UserIntent.model_validate(v) for k, v in reused.items()}
        skipped = gateway_failed = 0

        async def one(chain: FunctionChain) -> None:
            nonlocal skipped, gateway_failed
            try:
                intent = await synthesis_service.synthesize_intent(gw, chain, corpus, self.cfg.format_attempts)
            except IntentFormatError as exc:
                skipped += 1
                logger.warning("Skipping %s: %s", chain.id, exc)
                return
            except GatewayError as exc:
                gateway_failed += 1
                logger.warning("Skipping %s, intent endpoint failed: %s", chain.id, exc)
                return
            results[chain.id] = intent
            append_jsonl(partial, [intent])

        pending = [c for c in chains if c.id not in results]
        await asyncio.gather(*(one(c) for c in pending))
        wanted = {c.id for c in chains}
        intents = [results[k] for k in sorted(results) if k in wanted]
        out = self.path("intents")
        write_jsonl(out, intents)
        manifest.outputs = [str(out)]
        manifest.completed_ids = [i.chain_ref for i in intents]
        manifest.item_counts = {
            "chains": len(chains),
            "intents": len(intents),
            "skipped": skipped,
            "gateway_failed": gateway_failed,
            "reused": len(chains) - len(pending),
            "new": len(pending) - skipped - gateway_failed,
        }
        self._record_calls(manifest, intent=gw)

    async def _stage_simulate(self, manifest: StageManifest, previous: Optional[StageManifest]) -> None:
        corpus = {s.id: s for s in self._corpus()}
        chains = {c.id: c for c in self._chains()}
        intents = self._capped(sorted(self._intents(), key=lambda i: i.chain_ref))
        # ids and seeds are fixed before launch so results never depend on completion order
        plan = [(f"traj-{n:05d}", intent) for n, intent in enumerate(intents)]
        reused = self._reusable("simulate", "id", previous, manifest.input_hash)
        results: Dict[str, Trajectory] = {k: Trajectory.model_validate(v) for k, v in reused.items()}
        partial = self.partial_path("simulate")
        gw_user = self.gateway(self.cfg.gateways.user)
        gw_assistant = self.gateway(self.cfg.gateways.assistant)
        gw_tool = self.gateway(self.cfg.gateways.tool)

        async def one(trajectory_id: str, intent: UserIntent) -> None:
            chain = chains.get(intent.chain_ref)
            if chain is None:
                logger.warning("%s: chain %s not found, skipping", trajectory_id, intent.chain_ref)
                return
            tools = [corpus[step] for step in dict.fromkeys(chain.steps)]
            trajectory = await synthesis_service.run_simulation(
                gw_user,
                gw_assistant,
                gw_tool,
                intent,
                tools,
                self.cfg.simulation,
                seed=trajectory_seed(self.cfg.rng_seed, trajectory_id),
                trajectory_id=trajectory_id,
                native_tools=self.cfg.native_tools,
                attempts=self.cfg.format_attempts,
            )
            results[trajectory_id] = trajectory
            append_jsonl(partial, [trajectory])

        pending = [(tid, intent) for tid, intent in plan if tid not in results]
        await asyncio.gather(*(one(tid, intent) for tid, intent in pending))
        wanted = [tid for tid, _ in plan if tid in results]
        trajectories = [results[tid] for tid in wanted]
        out = self.path("trajectories")
        write_jsonl(out, trajectories)
        manifest.outputs = [str(out)]
        manifest.completed_ids = wanted
        outcomes: Dict[str, int] = {}
        for t in trajectories:
            outcomes[t.outcome.value] = outcomes.get(t.outcome.value, 0) + 1
        manifest.item_counts = {"trajectories": len(trajectories), "reused": len(plan) - len(pending), "new": len(pending), **outcomes}
        self._record_calls(manifest, user=gw_user, assistant=gw_assistant, tool=gw_tool)

    async def _stage_filter(self, manifest: StageManifest, previous: Optional[StageManifest]) -> None:
        pool = self._trajectories()
        gw = self.gateway(self.cfg.gateways.judge)
        annotated, report, verdicts = await apply_quality(pool, gw, self.cfg.format_attempts)
        verdicts.sort(key=lambda v: (v.trajectory_id, -1 if v.turn_index is None else v.turn_index))
        write_jsonl(self.path("verdicts"), verdicts)
        out = self.path("annotated")
        write_jsonl(out, (
            {"trajectory_id": a.trajectory.id, "traj_verdict": a.traj_verdict.model_dump(mode="json"), "turn_mask": a.turn_mask}
            for a in sorted(annotated, key=lambda a: a.trajectory.id)
        ))
        write_json(self.path("filter_report"), report)
        manifest.outputs = [str(out), str(self.path("verdicts")), str(self.path("filter_report"))]
        manifest.completed_ids = sorted(a.trajectory.id for a in annotated)
        manifest.item_counts = report.model_dump()
        self._record_calls(manifest, judge=gw)

    def load_annotated(self) -> List[AnnotatedTrajectory]:
        by_id = {t.id: t for t in self._trajectories()}
        annotated = []
        for record in read_jsonl(self.path("annotated")):
            annotated.append(AnnotatedTrajectory(
                trajectory=by_id[record["trajectory_id"]],
                traj_verdict=Verdict.model_validate(record["traj_verdict"]),
                turn_mask=record["turn_mask"],
            ))
        return annotated

    async def _stage_split(self, manifest: StageManifest, previous: Optional[StageManifest]) -> None:
        annotated = self.load_annotated()
        samples = [s for a in annotated for s in sampler_service.split_trajectory(a)]
        out = self.path("samples")
        written = sampler_service.serialize_samples(samples, out)
        sampler_service.manifest_row_from_file("all", out, reported_samples=written)
        rows = []
        for source in sorted({a.trajectory.source for a in annotated}):
            rows.append(ManifestRow(
                source=source,
                trajectory_count=sum(1 for a in annotated if a.trajectory.source == source),
                sample_count=sum(1 for s in samples if s.source == source),
            ))
        dataset = sampler_service.build_manifest(rows)
        write_json(self.path("manifest"), dataset)
        manifest.outputs = [str(out), str(self.path("manifest"))]
        manifest.item_counts = {"trajectories": len(annotated), "samples": written}

    async def _stage_stats(self, manifest: StageManifest, previous: Optional[StageManifest]) -> None:
        intents = self._intents()
        trajectories = self._trajectories()
        samples = [load_sample(r) for r in read_jsonl(self.path("samples"))]
        gw = self.gateway(self.cfg.gateways.domain)
        labeled, counts, distribution = await analytics_service.classify_domains(gw, intents, self.cfg.format_attempts)
        write_jsonl(self.path("domains"), labeled)
        report: StatsReport = analytics_service.compute_stats(trajectories, samples)
        report.domain_counts = counts
        report.domain_distribution = distribution
        out = self.path("stats")
        write_json(out, report)
        csvs = analytics_service.write_stats_csv(report, self.work_dir / "stats")
        manifest.outputs = [str(out), str(self.path("domains")), *map(str, csvs)]
        manifest.item_counts = {
            "intents": len(intents),
            "unclassified": sum(1 for i in labeled if i.domain_labels == [analytics_service.UNCLASSIFIED]),
            "trajectories": len(trajectories),
            "samples": len(samples),
        }
        self._record_calls(manifest, domain=gw)


async def run_stage(stage: str, cfg: PipelineConfig, resume: bool = False, limit: Optional[int] = None) -> StageManifest:
    return await PipelineService(cfg, resume=resume, limit=limit).run_stage(stage)


async def run_all(cfg: PipelineConfig, resume: bool = False, limit: Optional[int] = None) -> List[StageManifest]:
    return await PipelineService(cfg, resume=resume, limit=limit).run_all()
