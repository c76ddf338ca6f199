import json
from collections import defaultdict, deque
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import pytest

from app.models.function_spec import FunctionSpec, Provenance
from app.models.gateway import ChatReply, ChatRequest, GatewayConfig
from app.services.gateway import MockGateway
from app.models.trajectory import SimLimits, UserIntent
from app.services.spec_service import parse_function_spec
from app.services.synthesis_service import run_simulation

FIXTURES = Path(__file__).parent / "fixtures"


class ScriptedResponder:
    """Answers each request purpose from its own queue of replies, in order"""

    def __init__(self, replies: Optional[Dict[str, Iterable]] = None, default: Optional[Dict[str, str]] = None):
        self.queues = defaultdict(deque)
        for purpose, items in (replies or {}).items():
            self.queues[purpose].extend(items)
        self.default = default or {}
        self.seen: List[ChatRequest] = []

    def __call__(self, req: ChatRequest) -> Optional[ChatReply]:
        self.seen.append(req)
        queue = self.queues.get(req.purpose)
        if queue:
            reply = queue.popleft()
            return reply if isinstance(reply, ChatReply) else ChatReply(content=reply)
        if req.purpose in self.default:
            return ChatReply(content=self.default[req.purpose])
        return None


def scripted_gateway(replies=None, default=None, audit_path=None, model="scripted", **config) -> MockGateway:
    return MockGateway(
        responder=ScriptedResponder(replies, default),
        config=GatewayConfig(backend="mock", model=model, **config),
        audit_path=audit_path,
    )


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def warehouse_tools() -> List[FunctionSpec]:
    lines = (FIXTURES / "warehouse_tools.jsonl").read_text(encoding="utf-8").splitlines()
    return [parse_function_spec(line, Provenance(source="example", locator=f"warehouse_tools.jsonl:{n}")) for n, line in enumerate(lines, 1)]


@pytest.fixture
def warehouse_transcript() -> dict:
    return json.loads((FIXTURES / "warehouse_transcript.json").read_text(encoding="utf-8"))


def write_mock_config(tmp_path: Path, work_dir: str = "run", **changes) -> Path:
    raw = json.loads((FIXTURES / "mock_config.json").read_text(encoding="utf-8"))
    raw["work_dir"] = str(tmp_path / work_dir)
    raw["inputs"] = [{"path": str(FIXTURES / "mock_corpus.jsonl"), "source": "mock"}]
    for key, value in changes.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    path = tmp_path / f"{work_dir}.config.json"
    path.write_text(json.dumps(raw, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def mock_config_path(tmp_path) -> Path:
    return write_mock_config(tmp_path)


async def simulate_golden(tools: List[FunctionSpec], transcript: dict, **kwargs):
    """Replay the warehouse-manager conversation through the three agents"""
    return await run_simulation(
        scripted_gateway({"user": transcript["user"]}),
        scripted_gateway({"assistant": transcript["assistant"]}),
        scripted_gateway({"tool": transcript["tool"]}),
        UserIntent(**transcript["intent"]),
        tools,
        kwargs.pop("limits", SimLimits()),
        seed=kwargs.pop("seed", 0),
        trajectory_id=kwargs.pop("trajectory_id", "traj-warehouse"),
        **kwargs,
    )
