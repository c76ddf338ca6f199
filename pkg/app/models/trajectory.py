from pydantic import BaseModel, Field
from typing import Any, Dict, List, Optional, Union
from enum import Enum

STOP_MARKER = "###STOP###"


class Role(str, Enum):
    """Roles that appear in a stored trajectory"""
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"


class Outcome(str, Enum):
    """How a simulation ended"""
    STOPPED = "stopped"
    TURN_LIMIT = "turn_limit"
    ABORTED = "aborted"


class ToolCall(BaseModel):
    name: str = Field(..., min_length=1)
    arguments: Dict[str, Any] = Field(default_factory=dict)


class Message(BaseModel):
    """One stored message; assistant messages carry think/content/tool_calls"""
    role: Role
    content: str = ""
    think: str = ""
    tool_calls: List[ToolCall] = Field(default_factory=list)
    tool_result: Optional[str] = Field(None, description="JSON text returned by the tool simulator")
    name: Optional[str] = Field(None, description="Function name, tool messages only")

    @property
    def is_assistant(self) -> bool:
        return self.role == Role.ASSISTANT


class UserIntent(BaseModel):
    """Goal a simulated user pursues for one chain"""
    chain_ref: str
    task_instruction: str = Field(..., min_length=1)
    tool_usage: Union[str, List[Any]] = ""
    domain_labels: Optional[List[str]] = None


class SimLimits(BaseModel):
    """Bounds on one simulated conversation"""
    max_user_turns: int = Field(12, ge=1)
    max_consecutive_tool_steps: int = Field(8, ge=1)
    max_turn_tokens: int = Field(2048, ge=1)


class Trajectory(BaseModel):
    """One simulated conversation plus how it ended"""
    id: str
    intent: UserIntent
    tools: List[Dict[str, Any]] = Field(default_factory=list)
    messages: List[Message] = Field(default_factory=list)
    outcome: Outcome
    abort_reason: Optional[str] = None
    seed: int = 0
    source: str = "synthesized"
    native_tools: bool = Field(True, description="Whether tools went in the native tools field or inline text")

    def assistant_indices(self) -> List[int]:
        return [i for i, m in enumerate(self.messages) if m.role == Role.ASSISTANT]
