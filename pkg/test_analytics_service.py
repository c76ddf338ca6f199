import json

import pandas as pd
import pytest

from conftest import scripted_gateway, simulate_golden
from app.exceptions import DomainFormatError
from app.models.gateway import ChatReply
from app.models.trajectory import Message, Outcome, Role, ToolCall, Trajectory, UserIntent
from app.services.analytics_service import (
    OTHERS,
    UNCLASSIFIED,
    classify_domains,
    compute_stats,
    domain_distribution,
    parse_domains,
    tool_runs,
    write_stats_csv,
)
from app.services.gateway import MockGateway

INTENT = UserIntent(chain_ref="chain-a", task_instruction="anything")

LABEL_MIX = {"travel": 40, "finance": 30, "weather": 24, "music": 2, "chess": 2, "golf": 2}


def _call(name="f"):
    return Message(role=Role.ASSISTANT, tool_calls=[ToolCall(name=name)])


def _result(name="f"):
    return Message(role=Role.TOOL, tool_result="{}", name=name)


@pytest.mark.asyncio
async def test_warehouse_tool_runs(warehouse_tools, warehouse_transcript):
    trajectory = await simulate_golden(warehouse_tools, warehouse_transcript)
    assert tool_runs(trajectory) == [1, 1, 1]
    stats = compute_stats([trajectory], [])
    assert stats.tool_run_lengths == {1: 3}
    assert stats.trajectory_turns == {12: 1}
    assert stats.user_messages == {3: 1}


def test_tool_runs_mixed_turns():
    messages = [
        Message(role=Role.USER, content="chat only"),
        Message(role=Role.ASSISTANT, content="hello"),
        Message(role=Role.USER, content="two steps"),
        _call(), _result(), _call(), _result(),
        Message(role=Role.ASSISTANT, content="done"),
    ]
    trajectory = Trajectory(id="t", intent=INTENT, messages=messages, outcome=Outcome.STOPPED)
    assert tool_runs(trajectory) == [0, 2]
    assert compute_stats([trajectory], []).tool_run_lengths == {0: 1, 2: 1}


def test_empty_report():
    stats = compute_stats([], [])
    assert stats.trajectory_count == stats.sample_count == 0
    assert stats.trajectory_turns == {}
    assert stats.tool_run_lengths == {}


def _labels():
    return [[label] for label, n in LABEL_MIX.items() for _ in range(n)]


def test_tail_merges_into_others():
    counts, shares = domain_distribution(_labels())
    assert counts["music"] == 2
    assert list(shares) == ["travel", "finance", "weather", OTHERS]
    assert shares[OTHERS] == pytest.approx(6.0)
    assert sum(shares.values()) == pytest.approx(100.0)


def test_single_label_takes_everything():
    counts, shares = domain_distribution([["travel"]] * 10)
    assert counts == {"travel": 10}
    assert shares == {"travel": pytest.approx(100.0)}


def test_multi_label_intents_count_each_occurrence():
    _, shares = domain_distribution([["travel", "weather"], ["travel"]])
    assert shares["travel"] == pytest.approx(200 / 3)
    assert sum(shares.values()) == pytest.approx(100.0)


def test_distribution_empty():
    assert domain_distribution([]) == ({}, {})


@pytest.mark.parametrize("reply, expected", [
    ('{"domains": ["Travel"]}', ["travel"]),
    ('{"domains": ["data  analysis", "Data Analysis", "finance"]}', ["data analysis", "finance"]),
    ('```json\n{"domains": ["weather"]}\n```', ["weather"]),
])
def test_parse_domains(reply, expected):
    assert parse_domains(reply) == expected


@pytest.mark.parametrize("reply", [
    '{"domains": []}',
    '{"domains": "travel"}',
    '{"domain": ["travel"]}',
    '{"domains": ["travel"], "confidence": 1}',
    '{"domains": [""]}',
    "travel",
])
def test_parse_domains_rejects(reply):
    with pytest.raises(DomainFormatError):
        parse_domains(reply)


@pytest.mark.asyncio
async def test_classify_hundred_intents():
    intents = [
        UserIntent(chain_ref=f"chain-{n:05d}", task_instruction=f"task about {labels[0]} number {n}")
        for n, labels in enumerate(_labels())
    ]

    def responder(req):
        prompt = req.messages[0].content
        label = next(name for name in LABEL_MIX if f"task about {name} " in prompt)
        return ChatReply(content=json.dumps({"domains": [label]}))

    labeled, counts, shares = await classify_domains(MockGateway(responder=responder), intents)
    assert [i.chain_ref for i in labeled] == [i.chain_ref for i in intents]
    assert labeled[0].domain_labels == ["travel"]
    assert sum(counts.values()) == 100
    assert shares[OTHERS] == pytest.approx(6.0)
    assert sum(shares.values()) == pytest.approx(100.0)


@pytest.mark.asyncio
async def test_unparseable_domain_reply_is_unclassified():
    gw = scripted_gateway(default={"domain": "travel, probably"})
    labeled, counts, shares = await classify_domains(gw, [INTENT])
    assert labeled[0].domain_labels == [UNCLASSIFIED]
    assert counts == {UNCLASSIFIED: 1}
    assert gw.calls["domain"] == 2


def test_stats_csv(tmp_path):
    trajectory = Trajectory(
        id="t",
        intent=INTENT,
        outcome=Outcome.STOPPED,
        messages=[Message(role=Role.USER, content="q"), _call(), _result(), Message(role=Role.ASSISTANT, content="a")],
    )
    report = compute_stats([trajectory], [])
    report.domain_distribution = {"travel": 75.0, OTHERS: 25.0}
    written = write_stats_csv(report, tmp_path / "stats")
    assert {p.name for p in written} == {
        "trajectory_turns.csv",
        "sample_context_lengths.csv",
        "user_messages.csv",
        "tool_run_lengths.csv",
        "domain_distribution.csv",
    }
    runs = pd.read_csv(tmp_path / "stats" / "tool_run_lengths.csv")
    assert runs.to_dict("records") == [{"value": 1, "count": 1}]
    domains = pd.read_csv(tmp_path / "stats" / "domain_distribution.csv")
    assert list(domains["domain"]) == ["travel", OTHERS]
