import json
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings

from app.exceptions import ConfigError
from app.models.gateway import GatewayConfig
from app.models.graph import GraphConfig
from app.models.trajectory import SimLimits


class Settings(BaseSettings):
    """Process-level settings"""

    TOOLFORGE_LOG_LEVEL: str = "INFO"
    # Optional path of the gateway audit log; overrides the per-run default
    TOOLFORGE_AUDIT_LOG: Optional[str] = None
    # Used by gateways whose config leaves base_url out
    TOOLFORGE_DEFAULT_BASE_URL: Optional[str] = None

    class Config:
        env_file = ".env"
        case_sensitive = True
        extra = "ignore"


# Create settings instance
settings = Settings()


class InputSource(BaseModel):
    """One raw tool-definition file"""
    path: str
    source: str


class GatewaySet(BaseModel):
    """One endpoint per model role; roles may share a model"""
    completion: GatewayConfig = Field(default_factory=GatewayConfig)
    embedder: GatewayConfig = Field(default_factory=lambda: GatewayConfig(model="text-embedding-3-small"))
    validator: GatewayConfig = Field(default_factory=GatewayConfig)
    intent: GatewayConfig = Field(default_factory=GatewayConfig)
    user: GatewayConfig = Field(default_factory=GatewayConfig)
    assistant: GatewayConfig = Field(default_factory=GatewayConfig)
    tool: GatewayConfig = Field(default_factory=GatewayConfig)
    judge: GatewayConfig = Field(default_factory=lambda: GatewayConfig(temperature=0.0))
    domain: GatewayConfig = Field(default_factory=lambda: GatewayConfig(temperature=0.0))


class StagePaths(BaseModel):
    """Artifact file names inside the work directory"""
    functions: str = "functions.jsonl"
    embeddings: str = "embeddings.jsonl"
    embedding_cache: str = "embeddings.cache.jsonl"
    graph: str = "graph.jsonl"
    graph_meta: str = "graph_meta.json"
    chains: str = "chains.jsonl"
    intents: str = "intents.jsonl"
    trajectories: str = "trajectories.jsonl"
    verdicts: str = "verdicts.jsonl"
    annotated: str = "annotated.jsonl"
    filter_report: str = "filter_report.json"
    samples: str = "samples.jsonl"
    manifest: str = "manifest.json"
    stats: str = "stats.json"
    domains: str = "domains.jsonl"

    @model_validator(mode="after")
    def _distinct(self) -> "StagePaths":
        names = list(self.model_dump().values())
        if len(set(names)) != len(names):
            raise ValueError("artifact paths must be distinct")
        return self


class ChainsConfig(BaseModel):
    count: int = Field(100, ge=1)


class PipelineConfig(BaseModel):
    work_dir: str = "runs/default"
    inputs: List[InputSource] = Field(default_factory=list)
    rng_seed: int = 0
    gateways: GatewaySet = Field(default_factory=GatewaySet)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    simulation: SimLimits = Field(default_factory=SimLimits)
    chains: ChainsConfig = Field(default_factory=ChainsConfig)
    format_attempts: int = Field(2, ge=1)
    embedding_batch_size: int = Field(64, ge=1)
    native_tools: bool = True
    audit_log: bool = False
    paths: StagePaths = Field(default_factory=StagePaths)

    def seeded_graph(self) -> GraphConfig:
        return self.graph.model_copy(update={"rng_seed": self.rng_seed})

    def work_path(self, name: str) -> Path:
        return Path(self.work_dir) / getattr(self.paths, name)


def load_pipeline_config(path: str, overrides: Optional[Dict] = None) -> PipelineConfig:
    """Read a JSON config; relative paths resolve against the config file's directory"""
    config_path = Path(path)
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw.update(overrides or {})
    if settings.TOOLFORGE_DEFAULT_BASE_URL:
        for gateway in (raw.get("gateways") or {}).values():
            if isinstance(gateway, dict):
                gateway.setdefault("base_url", settings.TOOLFORGE_DEFAULT_BASE_URL)
    try:
        cfg = PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    base = config_path.resolve().parent
    if not Path(cfg.work_dir).is_absolute():
        cfg.work_dir = str(base / cfg.work_dir)
    for item in cfg.inputs:
        if not Path(item.path).is_absolute():
            item.path = str(base / item.path)
    return cfg
