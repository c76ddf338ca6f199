from pydantic import BaseModel, Field, model_validator
from typing import Any, Dict, List, Optional

from app.models.trajectory import Message

LOSS_ANCHOR_ONLY = "anchor_only"


class TrainingSample(BaseModel):
    """Prefix of a trajectory ending at the anchor assistant message"""
    sample_id: str
    source_trajectory: str
    source: str = "synthesized"
    anchor_index: int = Field(..., ge=0)
    context: List[Message]
    tools: List[Dict[str, Any]] = Field(default_factory=list)
    loss: str = LOSS_ANCHOR_ONLY

    @model_validator(mode="after")
    def _anchor_is_last(self) -> "TrainingSample":
        if len(self.context) != self.anchor_index + 1:
            raise ValueError("context must end at the anchor message")
        if not self.context[-1].is_assistant:
            raise ValueError("anchor message must be an assistant message")
        return self


class ManifestRow(BaseModel):
    source: str
    trajectory_count: Optional[int] = Field(None, description="None when the source reports no trajectory count")
    sample_count: int = Field(..., ge=0)


class DatasetManifest(BaseModel):
    rows: List[ManifestRow] = Field(default_factory=list)
    total_trajectories: int = 0
    total_samples: int = 0
