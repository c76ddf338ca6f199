from pydantic import BaseModel, Field, model_validator
from typing import Dict, List, Optional, Tuple


class ValidatorScores(BaseModel):
    """Scores assigned by the edge validator prompt"""
    field_transitivity: int = Field(..., ge=0, le=9)
    intent_coherence: int = Field(..., ge=0, le=9)


class ValidatorResult(BaseModel):
    scores: Optional[ValidatorScores] = None
    accepted: bool = False
    raw_reply: str = ""


class Edge(BaseModel):
    """Directed edge src -> dst of the function graph"""
    src: str
    dst: str
    score: Optional[float] = Field(None, description="Max output/input cosine; None when no candidate pair exists")
    best_pair: Optional[Tuple[str, str]] = Field(None, description="(output name of src, input name of dst)")
    validator_scores: Optional[ValidatorScores] = None
    injected: bool = False

    @model_validator(mode="after")
    def _no_self_loop(self) -> "Edge":
        if self.src == self.dst:
            raise ValueError(f"self-loop on {self.src}")
        return self


class GraphConfig(BaseModel):
    """Graph construction and walk parameters"""
    tau: float = Field(0.70, gt=0.0, lt=1.0)
    min_validator_score: int = Field(6, ge=0, le=9)
    random_edge_rate: float = Field(0.0, ge=0.0, le=1.0)
    walk_len_min: int = Field(5, ge=1)
    walk_len_max: int = Field(20, ge=1)
    node_visit_budget: int = Field(10, ge=1)
    max_start_attempts: int = Field(5, ge=1, description="Fresh starts tried per chain before giving up")
    rng_seed: int = 0

    @model_validator(mode="after")
    def _walk_bounds(self) -> "GraphConfig":
        if self.walk_len_min > self.walk_len_max:
            raise ValueError("walk_len_min must not exceed walk_len_max")
        return self


class FunctionGraph(BaseModel):
    """Directed graph over function specs"""
    nodes: List[str] = Field(default_factory=list)
    edges: Dict[str, List[Edge]] = Field(default_factory=dict)
    config: GraphConfig

    @property
    def edge_count(self) -> int:
        return sum(len(out) for out in self.edges.values())

    def out_edges(self, node: str) -> List[Edge]:
        return self.edges.get(node, [])

    def has_edge(self, src: str, dst: str) -> bool:
        return any(e.dst == dst for e in self.out_edges(src))

    def iter_edges(self):
        for src in sorted(self.edges):
            yield from self.edges[src]


class FunctionChain(BaseModel):
    """Ordered walk f_0 ... f_L over the graph"""
    id: str
    steps: List[str]
    names: List[str] = Field(default_factory=list, description="Function names, inlined for readability")

    @property
    def length(self) -> int:
        return len(self.steps) - 1


class ChainSampling(BaseModel):
    """Result of a sampling run; exhausted is set when budgets or retries ran out early"""
    chains: List[FunctionChain] = Field(default_factory=list)
    requested: int = 0
    exhausted: bool = False
