import asyncio
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import pandas as pd

from app.exceptions import DomainFormatError, GatewayError
from app.models.pipeline import StatsReport
from app.models.sample import TrainingSample
from app.models.trajectory import Role, Trajectory, UserIntent
from app.services import prompts
from app.services.gateway import LLMGateway
from app.services.strict_reply import ask_strict, load_json_object
from app.utils.logger import get_logger

logger = get_logger(__name__)

OTHERS = "others"
UNCLASSIFIED = "unclassified"
TAIL_SHARE = 2.0


def _histogram(values: Iterable[int]) -> Dict[int, int]:
    counts = pd.Series(list(values), dtype="int64").value_counts().sort_index()
    return {int(k): int(v) for k, v in counts.items()}


def tool_runs(trajectory: Trajectory) -> List[int]:
    """Lengths of maximal tool-calling runs per user turn; a turn without any run yields 0"""
    runs: List[int] = []
    segments: List[List] = []
    for message in trajectory.messages:
        if message.role == Role.USER:
            segments.append([])
        elif segments:
            segments[-1].append(message)
    for segment in segments:
        found, run = [], 0
        for message in segment:
            if message.role != Role.ASSISTANT:
                continue
            if message.tool_calls:
                run += 1
            elif run:
                found.append(run)
                run = 0
        if run:
            found.append(run)
        runs.extend(found or [0])
    return runs


def compute_stats(trajectories: Sequence[Trajectory], samples: Sequence[TrainingSample]) -> StatsReport:
    return StatsReport(
        trajectory_count=len(trajectories),
        sample_count=len(samples),
        trajectory_turns=_histogram(len(t.messages) for t in trajectories),
        sample_context_lengths=_histogram(len(s.context) for s in samples),
        user_messages=_histogram(sum(1 for m in t.messages if m.role == Role.USER) for t in trajectories),
        tool_run_lengths=_histogram(run for t in trajectories for run in tool_runs(t)),
    )


def parse_domains(reply: str) -> List[str]:
    obj = load_json_object(reply, DomainFormatError)
    if set(obj) != {"domains"}:
        raise DomainFormatError(f'domain reply must have exactly the field "domains", got {sorted(obj)}')
    labels = obj["domains"]
    if not isinstance(labels, list) or not labels or not all(isinstance(x, str) and x.strip() for x in labels):
        raise DomainFormatError("domains must be a non-empty list of names")
    return list(dict.fromkeys(" ".join(x.lower().split()) for x in labels))


def domain_distribution(labels_per_intent: Sequence[Sequence[str]]) -> Tuple[Dict[str, int], Dict[str, float]]:
    """Percent share per label occurrence; labels at or below 2% merge into 'others'"""
    occurrences = pd.Series([label for labels in labels_per_intent for label in labels], dtype="object")
    if occurrences.empty:
        return {}, {}
    counts = occurrences.value_counts()
    shares = counts / counts.sum() * 100.0
    tail = shares[shares <= TAIL_SHARE]
    grouped = shares[shares > TAIL_SHARE].to_dict()
    if not tail.empty:
        grouped[OTHERS] = grouped.get(OTHERS, 0.0) + float(tail.sum())
    ordered = dict(sorted(grouped.items(), key=lambda kv: (-kv[1], kv[0])))
    return {str(k): int(v) for k, v in counts.sort_index().items()}, {str(k): float(v) for k, v in ordered.items()}


async def classify_domains(
    gw: LLMGateway,
    intents: Sequence[UserIntent],
    attempts: int = 2,
) -> Tuple[List[UserIntent], Dict[str, int], Dict[str, float]]:
    """Label every intent with one or more domains and compute the grouped distribution"""
    async def one(intent: UserIntent) -> List[str]:
        try:
            labels, _ = await ask_strict(
                gw, prompts.domain_classification(intent.task_instruction), "domain", parse_domains, DomainFormatError, attempts
            )
            return labels
        except DomainFormatError as exc:
            logger.info("%s left unclassified: %s", intent.chain_ref, exc)
            return [UNCLASSIFIED]
        except GatewayError as exc:
            logger.warning("%s left unclassified, domain endpoint failed: %s", intent.chain_ref, exc)
            return [UNCLASSIFIED]

    labels = await asyncio.gather(*(one(i) for i in intents))
    labeled = [i.model_copy(update={"domain_labels": l}) for i, l in zip(intents, labels)]
    counts, distribution = domain_distribution(labels)
    return labeled, counts, distribution


def write_stats_csv(report: StatsReport, out_dir: Path) -> List[Path]:
    """One CSV per histogram plus the domain table, for plotting elsewhere"""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("trajectory_turns", "sample_context_lengths", "user_messages", "tool_run_lengths"):
        histogram = getattr(report, name)
        frame = pd.DataFrame({"value": list(histogram.keys()), "count": list(histogram.values())})
        path = out_dir / f"{name}.csv"
        frame.to_csv(path, index=False, lineterminator="\n")
        written.append(path)
    domains = pd.DataFrame({
        "domain": list(report.domain_distribution.keys()),
        "share_percent": list(report.domain_distribution.values()),
    })
    path = out_dir / "domain_distribution.csv"
    domains.to_csv(path, index=False, lineterminator="\n")
    written.append(path)
    return written
