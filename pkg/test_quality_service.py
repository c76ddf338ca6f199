import json
import random

import pytest

from conftest import scripted_gateway
from app.exceptions import VerdictFormatError
from app.models.gateway import ChatReply
from app.models.trajectory import Message, Outcome, Role, ToolCall, Trajectory, UserIntent
from app.services.gateway import MockGateway
from app.services.quality_service import apply_quality, gate_trajectory, gate_turns, parse_verdict_bit

INTENT = UserIntent(chain_ref="chain-q", task_instruction="do the thing")


def judge_responder(req):
    """1 unless the judged text carries a rejection marker"""
    prompt = req.messages[0].content
    if req.purpose == "judge_trajectory":
        return ChatReply(content="0" if "reject-me" in prompt else "1")
    last = prompt.split("### Last response", 1)[1]
    if "garble-turn" in last:
        return ChatReply(content="yes, good")
    return ChatReply(content="0" if "bad-turn" in last else "1")


def _trajectory(tid, outcome=Outcome.STOPPED, replies=("fine",), flagged=False):
    messages = [Message(role=Role.USER, content="reject-me please" if flagged else "hello")]
    for text in replies:
        messages.append(Message(role=Role.ASSISTANT, tool_calls=[ToolCall(name="f")]))
        messages.append(Message(role=Role.TOOL, tool_result='{"ok": true}', name="f"))
        messages.append(Message(role=Role.ASSISTANT, content=text))
    return Trajectory(id=tid, intent=INTENT, messages=messages, outcome=outcome)


def test_verdict_bit_parsing():
    assert parse_verdict_bit(" 1\n") == 1
    assert parse_verdict_bit("0") == 0
    for bad in ("", "2", "10", "1.", "yes", "0 1"):
        with pytest.raises(VerdictFormatError):
            parse_verdict_bit(bad)


@pytest.mark.asyncio
async def test_non_stopped_rejected_without_calls():
    gw = MockGateway(responder=judge_responder)
    for outcome in (Outcome.TURN_LIMIT, Outcome.ABORTED):
        verdict = await gate_trajectory(gw, _trajectory("t", outcome))
        assert verdict.bit == 0
        assert verdict.reason == f"auto:{outcome.value}"
    assert sum(gw.calls.values()) == 0


@pytest.mark.asyncio
async def test_turn_gate_masks_each_assistant_message():
    gw = MockGateway(responder=judge_responder)
    trajectory = _trajectory("t", replies=("good answer", "bad-turn answer"))
    mask, verdicts = await gate_turns(gw, trajectory)
    assert mask == {1: True, 3: True, 4: True, 6: False}
    assert [v.turn_index for v in verdicts] == trajectory.assistant_indices()
    assert gw.calls["judge_turn"] == 4


@pytest.mark.asyncio
async def test_turn_judge_sees_only_preceding_history():
    gw = MockGateway(responder=judge_responder)
    trajectory = _trajectory("t", replies=("bad-turn first", "later"))
    mask, _ = await gate_turns(gw, trajectory)
    assert mask[3] is False
    assert mask[6] is True


@pytest.mark.asyncio
async def test_turn_format_error_counts_as_rejection():
    gw = MockGateway(responder=judge_responder)
    trajectory = _trajectory("t", replies=("garble-turn",))
    mask, verdicts = await gate_turns(gw, trajectory)
    assert mask == {1: True, 3: False}
    failed = next(v for v in verdicts if v.turn_index == 3)
    assert failed.reason == "format-error"
    assert failed.raw_reply == "yes, good"
    # first try plus one reminder for the garbled turn
    assert gw.calls["judge_turn"] == 3


@pytest.mark.asyncio
async def test_trajectory_format_error_rejects():
    gw = scripted_gateway(default={"judge_trajectory": "I think it is fine"})
    verdict = await gate_trajectory(gw, _trajectory("t"))
    assert (verdict.bit, verdict.reason) == (0, "format-error")
    assert verdict.judge_model == "scripted"


@pytest.mark.asyncio
async def test_report_arithmetic_and_judge_calls(tmp_path):
    rng = random.Random(17)
    pool, expected = [], {"auto": 0, "judge": 0, "turn_calls": 0, "masked": 0}
    for n in range(100):
        outcome = rng.choice([Outcome.STOPPED, Outcome.STOPPED, Outcome.TURN_LIMIT, Outcome.ABORTED])
        flagged = rng.random() < 0.25
        replies = [rng.choice(["fine", "bad-turn oops"]) for _ in range(rng.randint(1, 3))]
        trajectory = _trajectory(f"traj-{n:05d}", outcome, replies, flagged)
        pool.append(trajectory)
        if outcome != Outcome.STOPPED:
            expected["auto"] += 1
        elif flagged:
            expected["judge"] += 1
        else:
            expected["turn_calls"] += len(trajectory.assistant_indices())
            expected["masked"] += sum(1 for r in replies if r.startswith("bad-turn"))

    audit = tmp_path / "audit.jsonl"
    gw = MockGateway(responder=judge_responder, audit_path=audit)
    annotated, report, verdicts = await apply_quality(pool, gw)

    assert report.input == 100
    assert report.input == report.auto_rejected_non_stopped + report.judge_rejected + report.surviving
    assert report.auto_rejected_non_stopped == expected["auto"]
    assert report.judge_rejected == expected["judge"]
    assert report.turns_total == expected["turn_calls"]
    assert report.turns_masked == expected["masked"]
    assert len(annotated) == report.surviving

    records = [json.loads(line) for line in audit.read_text(encoding="utf-8").splitlines()]
    turn_calls = sum(1 for r in records if r["purpose"] == "judge_turn")
    traj_calls = sum(1 for r in records if r["purpose"] == "judge_trajectory")
    assert turn_calls == expected["turn_calls"] == sum(len(a.turn_mask) for a in annotated)
    assert traj_calls == 100 - expected["auto"]
    assert len(verdicts) == 100 + turn_calls

    for item in annotated:
        assert item.traj_verdict.bit == 1
        assert set(item.turn_mask) == set(item.trajectory.assistant_indices())


@pytest.mark.asyncio
async def test_empty_pool():
    annotated, report, verdicts = await apply_quality([], MockGateway(responder=judge_responder))
    assert annotated == [] and verdicts == []
    assert report.input == report.surviving == 0
