from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from app.exceptions import ManifestMismatch, SerializationError
from app.models.quality import AnnotatedTrajectory
from app.models.sample import DatasetManifest, ManifestRow, TrainingSample
from app.models.trajectory import Message, Role
from app.utils.jsonl import count_lines, dumps, write_atomic
from app.utils.logger import get_logger

logger = get_logger(__name__)


def split_trajectory(annotated: AnnotatedTrajectory) -> List[TrainingSample]:
    """One sample per kept assistant message, context = messages up to and including it"""
    if annotated.traj_verdict.bit != 1:
        return []
    trajectory = annotated.trajectory
    samples = []
    for index, message in enumerate(trajectory.messages):
        if message.role != Role.ASSISTANT or not annotated.turn_mask.get(index, False):
            continue
        samples.append(TrainingSample(
            sample_id=f"{trajectory.id}#{index}",
            source_trajectory=trajectory.id,
            source=trajectory.source,
            anchor_index=index,
            context=[m.model_copy(deep=True) for m in trajectory.messages[: index + 1]],
            tools=trajectory.tools,
        ))
    return samples


def _message_record(message: Message) -> Dict[str, Any]:
    if message.role == Role.ASSISTANT:
        return {
            "role": "assistant",
            "think": message.think,
            "content": message.content,
            "tool_calls": [c.model_dump() for c in message.tool_calls],
        }
    if message.role == Role.TOOL:
        return {"role": "tool", "name": message.name, "content": message.tool_result or ""}
    return {"role": "user", "content": message.content}


def sample_record(sample: TrainingSample) -> Dict[str, Any]:
    return {
        "sample_id": sample.sample_id,
        "source": sample.source,
        "source_trajectory": sample.source_trajectory,
        "anchor_index": sample.anchor_index,
        "messages": [_message_record(m) for m in sample.context],
        "tools": sample.tools,
        "loss": sample.loss,
    }


def serialize_samples(samples: Sequence[TrainingSample], path: Path) -> int:
    """Write samples as JSONL sorted by (source trajectory, anchor index)"""
    ordered = sorted(samples, key=lambda s: (s.source_trajectory, s.anchor_index))
    lines = []
    for sample in ordered:
        line = dumps(sample_record(sample))
        try:
            line.encode("utf-8")
        except UnicodeEncodeError as exc:
            raise SerializationError(f"{sample.sample_id} holds text that is not valid UTF-8") from exc
        lines.append(line + "\n")
    write_atomic(path, "".join(lines))
    return len(lines)


def build_manifest(rows: Sequence[ManifestRow]) -> DatasetManifest:
    """Totals are column sums; unknown trajectory counts are left out of the trajectory total"""
    return DatasetManifest(
        rows=list(rows),
        total_trajectories=sum(r.trajectory_count or 0 for r in rows),
        total_samples=sum(r.sample_count for r in rows),
    )


def manifest_row_from_file(
    source: str,
    path: Path,
    reported_samples: Optional[int] = None,
    trajectory_count: Optional[int] = None,
) -> ManifestRow:
    """Count a sample file's records, checking them against its self-reported count"""
    actual = count_lines(path)
    if reported_samples is not None and reported_samples != actual:
        raise ManifestMismatch(f"{path}: reports {reported_samples} samples but holds {actual}")
    return ManifestRow(source=source, trajectory_count=trajectory_count, sample_count=actual)


def build_manifest_from_files(sample_files: Mapping[str, Dict[str, Any]]) -> DatasetManifest:
    """`sample_files` maps source tag -> {path, reported_samples?, trajectory_count?}"""
    rows = [
        manifest_row_from_file(
            source,
            Path(entry["path"]),
            entry.get("reported_samples"),
            entry.get("trajectory_count"),
        )
        for source, entry in sorted(sample_files.items())
    ]
    return build_manifest(rows)
