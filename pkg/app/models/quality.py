from pydantic import BaseModel, Field
from typing import Dict, Optional

from app.models.trajectory import Trajectory


class Verdict(BaseModel):
    """Binary judge outcome for a trajectory or one of its turns"""
    trajectory_id: str
    turn_index: Optional[int] = None
    bit: int = Field(..., ge=0, le=1)
    raw_reply: str = ""
    judge_model: Optional[str] = None
    reason: Optional[str] = Field(None, description="Why a verdict was assigned without a valid judge reply")


class AnnotatedTrajectory(BaseModel):
    trajectory: Trajectory
    traj_verdict: Verdict
    turn_mask: Dict[int, bool] = Field(default_factory=dict)

    @property
    def kept_indices(self):
        return sorted(i for i, keep in self.turn_mask.items() if keep)


class FilterReport(BaseModel):
    input: int = 0
    auto_rejected_non_stopped: int = 0
    judge_rejected: int = 0
    surviving: int = 0
    turns_total: int = 0
    turns_masked: int = 0
    judge_unavailable: int = Field(0, description="Verdicts set to 0 because the judge endpoint failed")
