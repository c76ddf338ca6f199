import asyncio
from typing import Dict, List, Sequence, Tuple

from app.exceptions import GatewayError, VerdictFormatError
from app.models.quality import AnnotatedTrajectory, FilterReport, Verdict
from app.models.trajectory import Outcome, Trajectory
from app.services import prompts
from app.services.gateway import LLMGateway
from app.services.strict_reply import ask_strict
from app.utils.logger import get_logger

logger = get_logger(__name__)


def parse_verdict_bit(reply: str) -> int:
    """Exactly one digit, 0 or 1, after trimming"""
    text = (reply or "").strip()
    if text not in ("0", "1"):
        raise VerdictFormatError(f"judge reply is not a single 0/1 digit: {text[:50]!r}")
    return int(text)


async def _judge(gw: LLMGateway, prompt: str, purpose: str, trajectory_id: str, turn_index=None, attempts: int = 2) -> Verdict:
    try:
        bit, raw = await ask_strict(gw, prompt, purpose, parse_verdict_bit, VerdictFormatError, attempts)
    except VerdictFormatError as exc:
        logger.info("%s turn=%s: %s", trajectory_id, turn_index, exc)
        return Verdict(
            trajectory_id=trajectory_id,
            turn_index=turn_index,
            bit=0,
            raw_reply=getattr(exc, "raw_reply", ""),
            judge_model=gw.model,
            reason="format-error",
        )
    except GatewayError as exc:
        logger.warning("%s turn=%s: judge unavailable: %s", trajectory_id, turn_index, exc)
        return Verdict(trajectory_id=trajectory_id, turn_index=turn_index, bit=0, judge_model=gw.model, reason="gateway")
    return Verdict(trajectory_id=trajectory_id, turn_index=turn_index, bit=bit, raw_reply=raw, judge_model=gw.model)


async def gate_trajectory(gw: LLMGateway, trajectory: Trajectory, attempts: int = 2) -> Verdict:
    """Trajectory-level judge; trajectories that did not stop are rejected without a call"""
    if trajectory.outcome != Outcome.STOPPED:
        return Verdict(trajectory_id=trajectory.id, bit=0, reason=f"auto:{trajectory.outcome.value}")
    prompt = prompts.trajectory_judge(trajectory.tools, trajectory.messages)
    return await _judge(gw, prompt, "judge_trajectory", trajectory.id, attempts=attempts)


async def gate_turns(gw: LLMGateway, trajectory: Trajectory, attempts: int = 2) -> Tuple[Dict[int, bool], List[Verdict]]:
    """One independent judge call per assistant message, history = everything before it"""
    indices = trajectory.assistant_indices()
    verdicts = await asyncio.gather(*(
        _judge(
            gw,
            prompts.turn_judge(trajectory.tools, trajectory.messages[:i], trajectory.messages[i]),
            "judge_turn",
            trajectory.id,
            turn_index=i,
            attempts=attempts,
        )
        for i in indices
    ))
    mask = {v.turn_index: v.bit == 1 for v in verdicts}
    return mask, list(verdicts)


async def apply_quality(
    pool: Sequence[Trajectory],
    gw: LLMGateway,
    attempts: int = 2,
) -> Tuple[List[AnnotatedTrajectory], FilterReport, List[Verdict]]:
    """Trajectory gate then turn gates; returns survivors, report and every verdict"""
    report = FilterReport(input=len(pool))
    traj_verdicts = await asyncio.gather(*(gate_trajectory(gw, t, attempts) for t in pool))

    survivors = [(t, v) for t, v in zip(pool, traj_verdicts) if v.bit == 1]
    for t, v in zip(pool, traj_verdicts):
        if v.bit == 1:
            continue
        if t.outcome != Outcome.STOPPED:
            report.auto_rejected_non_stopped += 1
        else:
            report.judge_rejected += 1

    turn_results = await asyncio.gather(*(gate_turns(gw, t, attempts) for t, _ in survivors))

    annotated: List[AnnotatedTrajectory] = []
    verdicts: List[Verdict] = list(traj_verdicts)
    for (trajectory, verdict), (mask, turn_verdicts) in zip(survivors, turn_results):
        annotated.append(AnnotatedTrajectory(trajectory=trajectory, traj_verdict=verdict, turn_mask=mask))
        verdicts.extend(turn_verdicts)
        report.turns_total += len(mask)
        report.turns_masked += sum(1 for keep in mask.values() if not keep)
    report.surviving = len(annotated)
    report.judge_unavailable = sum(1 for v in verdicts if v.reason == "gateway")
    logger.info(
        "Quality filter: %d in, %d auto-rejected, %d judge-rejected, %d surviving",
        report.input, report.auto_rejected_non_stopped, report.judge_rejected, report.surviving,
    )
    return annotated, report, verdicts
