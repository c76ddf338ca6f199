from pydantic import BaseModel, Field, field_validator
from typing import Any, Dict, List, Optional, Literal

ChatRole = Literal["system", "user", "assistant", "tool"]


class ChatMessage(BaseModel):
    role: ChatRole
    content: str = ""
    tool_calls: Optional[List[Dict[str, Any]]] = None
    tool_call_id: Optional[str] = None

    def to_wire(self) -> Dict[str, Any]:
        wire: Dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            wire["tool_calls"] = self.tool_calls
        if self.tool_call_id:
            wire["tool_call_id"] = self.tool_call_id
        return wire


class ChatRequest(BaseModel):
    """One chat-completion request"""
    model: str
    messages: List[ChatMessage] = Field(..., min_length=1)
    tools: Optional[List[Dict[str, Any]]] = None
    temperature: float = Field(0.0, ge=0.0)
    max_turn_tokens: int = Field(2048, gt=0)
    seed: Optional[int] = None
    purpose: str = Field("chat", description="Audit tag; not part of the prompt fingerprint")

    def to_wire(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {
            "model": self.model,
            "messages": [m.to_wire() for m in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_turn_tokens,
        }
        if self.tools:
            body["tools"] = self.tools
        if self.seed is not None:
            body["seed"] = self.seed
        return body


class ChatReply(BaseModel):
    """First choice of a chat-completion response"""
    content: str = ""
    tool_calls: List[Dict[str, Any]] = Field(default_factory=list)
    reasoning: str = ""
    usage: Dict[str, Any] = Field(default_factory=dict)


class GatewayConfig(BaseModel):
    """Connection settings for one model endpoint"""
    backend: Literal["http", "mock"] = "http"
    model: str = "gpt-4o-mini"
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    request_timeout: float = Field(60.0, gt=0)
    max_retries: int = Field(3, ge=0)
    backoff_base: float = Field(1.0, ge=0)
    concurrency_limit: int = Field(8, ge=1)
    temperature: float = Field(0.7, ge=0.0)
    mock_seed: int = 0
    mock_dimension: int = Field(256, ge=2)

    @field_validator("base_url")
    @classmethod
    def _strip_slash(cls, value: str) -> str:
        return value.rstrip("/")
