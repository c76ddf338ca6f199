from pydantic import BaseModel, Field
from typing import Any, Dict, List, Optional


class StatsReport(BaseModel):
    """Distribution analysis of trajectories and post-split samples"""
    trajectory_count: int = 0
    sample_count: int = 0
    trajectory_turns: Dict[int, int] = Field(default_factory=dict, description="messages per trajectory")
    sample_context_lengths: Dict[int, int] = Field(default_factory=dict, description="context messages per sample")
    user_messages: Dict[int, int] = Field(default_factory=dict, description="user messages per trajectory")
    tool_run_lengths: Dict[int, int] = Field(default_factory=dict, description="consecutive tool-call steps per run; 0 = turn without tool calls")
    domain_counts: Dict[str, int] = Field(default_factory=dict)
    domain_distribution: Dict[str, float] = Field(default_factory=dict, description="percent of label occurrences, tail grouped as 'others'")


class StageManifest(BaseModel):
    """Record written next to every stage artifact"""
    stage: str
    config_hash: str
    seed: int
    input_hash: Optional[str] = None
    output_hash: Optional[str] = None
    outputs: List[str] = Field(default_factory=list)
    item_counts: Dict[str, int] = Field(default_factory=dict)
    completed_ids: List[str] = Field(default_factory=list)
    complete: bool = False
    duration_seconds: float = 0.0
    extra: Dict[str, Any] = Field(default_factory=dict)
