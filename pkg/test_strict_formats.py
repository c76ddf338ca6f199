"""Malformed model replies for every strict-format prompt.

Each reply is sent twice (first try and the reminder retry) and must end in
that prompt's rejection path instead of an exception escaping the stage.
"""

import pytest

from conftest import scripted_gateway
from app.exceptions import IntentFormatError, ToolFormatError
from app.models.function_spec import FunctionSpec, ParameterDef, Provenance
from app.models.graph import FunctionChain
from app.models.trajectory import Message, Outcome, Role, SimLimits, ToolCall, Trajectory, UserIntent
from app.services.analytics_service import UNCLASSIFIED, classify_domains
from app.services.graph_service import validate_edge
from app.services.quality_service import gate_trajectory, gate_turns
from app.services.spec_service import with_id
from app.services.synthesis_service import run_simulation, simulate_tool, synthesize_intent

INTENT = UserIntent(chain_ref="chain-x", task_instruction="look up the weather")

JUDGE_REPLIES = [
    "",
    "2",
    "yes",
    "1 - the dialogue is coherent",
    "0.5",
    "{\"verdict\": 1}",
    "10",
]

TOOL_REPLIES = [
    '{"temperature": 25}',
    "<func_return>sunny and warm</func_return>",
    '<func_return>{"a": 1}</func_return> <func_return>{"b": 2}</func_return>',
    '<func_return>{"temperature": 25}',
    "",
]

INTENT_REPLIES = [
    "Book me a flight",
    '{"Task Instruction": "book a flight"}',
    '{"Task Instruction": "", "Tool Usage": "x"}',
    '{"Task Instruction": "t", "Tool Usage": "u", "Extra": 1}',
    '["Task Instruction", "Tool Usage"]',
    '{"Task Instruction": 5, "Tool Usage": "u"}',
]

VALIDATOR_REPLIES = [
    "8/10",
    '{"Field transitivity": 8}',
    '{"Field transitivity": -1, "Potential user intent path coherence": 8}',
    '{"Field transitivity": 8.5, "Potential user intent path coherence": 8}',
    "null",
]

DOMAIN_REPLIES = [
    "finance",
    '{"domains": []}',
    '{"domains": "finance"}',
    '{"labels": ["finance"]}',
    '{"domains": [3]}',
]


def _spec(name):
    param = ParameterDef(name="city", description="City name", value_type="string")
    return with_id(FunctionSpec(id="", name=name, inputs=[param], outputs=[param], provenance=Provenance(source="t")))


def _stopped_trajectory():
    return Trajectory(
        id="traj-x",
        intent=INTENT,
        outcome=Outcome.STOPPED,
        messages=[
            Message(role=Role.USER, content="weather in Paris?"),
            Message(role=Role.ASSISTANT, tool_calls=[ToolCall(name="get_weather", arguments={"city": "Paris"})]),
            Message(role=Role.TOOL, tool_result='{"temperature": 25}', name="get_weather"),
            Message(role=Role.ASSISTANT, content="It is 25 degrees."),
        ],
    )


def test_table_size():
    total = sum(map(len, (JUDGE_REPLIES, TOOL_REPLIES, INTENT_REPLIES, VALIDATOR_REPLIES, DOMAIN_REPLIES)))
    assert total >= 20


@pytest.mark.asyncio
@pytest.mark.parametrize("reply", JUDGE_REPLIES)
async def test_trajectory_judge_reply(reply):
    gw = scripted_gateway(default={"judge_trajectory": reply})
    verdict = await gate_trajectory(gw, _stopped_trajectory())
    assert (verdict.bit, verdict.reason) == (0, "format-error")
    assert gw.calls["judge_trajectory"] == 2


@pytest.mark.asyncio
@pytest.mark.parametrize("reply", JUDGE_REPLIES)
async def test_turn_judge_reply(reply):
    gw = scripted_gateway(default={"judge_turn": reply})
    mask, verdicts = await gate_turns(gw, _stopped_trajectory())
    assert mask == {1: False, 3: False}
    assert {v.reason for v in verdicts} == {"format-error"}


@pytest.mark.asyncio
@pytest.mark.parametrize("reply", TOOL_REPLIES)
async def test_tool_reply(reply):
    gw = scripted_gateway(default={"tool": reply})
    with pytest.raises(ToolFormatError) as info:
        await simulate_tool(gw, _spec("get_weather"), ToolCall(name="get_weather", arguments={"city": "Paris"}))
    assert info.value.raw_reply == reply


@pytest.mark.asyncio
@pytest.mark.parametrize("reply", TOOL_REPLIES)
async def test_tool_reply_aborts_simulation(reply):
    call = '<tool_call>{"name": "get_weather", "arguments": {"city": "Paris"}}</tool_call>'
    trajectory = await run_simulation(
        scripted_gateway({"user": ["weather in Paris?"]}),
        scripted_gateway({"assistant": [call]}),
        scripted_gateway(default={"tool": reply}),
        INTENT,
        [_spec("get_weather")],
        SimLimits(),
        seed=0,
    )
    assert (trajectory.outcome, trajectory.abort_reason) == (Outcome.ABORTED, "tool-format")


@pytest.mark.asyncio
@pytest.mark.parametrize("reply", INTENT_REPLIES)
async def test_intent_reply(reply):
    spec = _spec("get_weather")
    gw = scripted_gateway(default={"intent": reply})
    with pytest.raises(IntentFormatError):
        await synthesize_intent(gw, FunctionChain(id="chain-x", steps=[spec.id]), {spec.id: spec})
    assert gw.calls["intent"] == 2


@pytest.mark.asyncio
@pytest.mark.parametrize("reply", VALIDATOR_REPLIES)
async def test_validator_reply(reply):
    gw = scripted_gateway(default={"validate_edge": reply})
    result = await validate_edge(gw, _spec("a"), _spec("b"))
    assert not result.accepted
    assert result.scores is None
    assert result.raw_reply == reply


@pytest.mark.asyncio
@pytest.mark.parametrize("reply", DOMAIN_REPLIES)
async def test_domain_reply(reply):
    labeled, counts, _ = await classify_domains(scripted_gateway(default={"domain": reply}), [INTENT])
    assert labeled[0].domain_labels == [UNCLASSIFIED]
    assert counts == {UNCLASSIFIED: 1}


@pytest.mark.asyncio
async def test_reminder_recovers():
    gw = scripted_gateway({"judge_trajectory": ["yes", "1"]})
    verdict = await gate_trajectory(gw, _stopped_trajectory())
    assert verdict.bit == 1
    reminder = gw.responder.seen[1].messages
    assert [m.role for m in reminder] == ["user", "assistant", "user"]
    assert reminder[1].content == "yes"
