import asyncio
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from app.exceptions import CompletionFailed, GatewayError, ParseFailure, SchemaMismatch
from app.models.function_spec import FunctionSpec, ParameterDef, Provenance, normalize_value_type
from app.services import prompts
from app.services.gateway import LLMGateway
from app.services.strict_reply import ask_strict, load_json_object
from app.utils.jsonl import sha256_text
from app.utils.logger import get_logger

logger = get_logger(__name__)


def _clean(text: Any) -> str:
    """Collapse whitespace runs and trim"""
    if text is None:
        return ""
    return " ".join(str(text).split())


def _parse_properties(block: Any, where: str, required: Sequence[str] = ()) -> List[ParameterDef]:
    if block is None:
        return []
    if not isinstance(block, dict):
        raise SchemaMismatch(f"{where} must be an object")
    properties = block.get("properties", {})
    if properties is None:
        properties = {}
    if not isinstance(properties, dict):
        raise SchemaMismatch(f"{where}.properties must be an object")
    missing = [name for name in required if name not in properties]
    if missing:
        raise SchemaMismatch(f"{where}: required names {missing} are not among the properties")
    params = []
    seen = set()
    for name, body in properties.items():
        if not isinstance(body, dict):
            raise SchemaMismatch(f"{where}.properties.{name} must be an object")
        cleaned = _clean(name)
        if not cleaned:
            raise SchemaMismatch(f"{where}.properties has an empty parameter name")
        if cleaned in seen:
            raise SchemaMismatch(f"{where}.properties: {name!r} collides with another name after whitespace cleanup")
        seen.add(cleaned)
        params.append(ParameterDef(
            name=cleaned,
            description=_clean(body.get("description")),
            value_type=normalize_value_type(body.get("type")),
            required=name in required,
        ))
    return sorted(params, key=lambda p: p.name)


def _spec_content(name: str, description: str, inputs: List[ParameterDef], outputs: List[ParameterDef]) -> Dict[str, Any]:
    content: Dict[str, Any] = {
        "name": name,
        "description": description,
        "parameters": {
            "type": "dict",
            "properties": {
                p.name: {"description": p.description, "type": p.value_type} for p in inputs
            },
            "required": sorted(p.name for p in inputs if p.required),
        },
        "outputs": {
            "type": "dict",
            "properties": {
                p.name: {"description": p.description, "type": p.value_type} for p in outputs
            },
        },
    }
    return content


def canonicalize(spec: FunctionSpec) -> str:
    """Deterministic text form of a spec's content; the spec id is its hash.

    The text is itself a valid raw record, so parsing it again yields the
    same spec.
    """
    content = _spec_content(
        _clean(spec.name),
        _clean(spec.description),
        sorted(spec.inputs, key=lambda p: p.name),
        sorted(spec.outputs, key=lambda p: p.name),
    )
    return json.dumps(content, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def spec_id(spec: FunctionSpec) -> str:
    return sha256_text(canonicalize(spec))[:16]


def with_id(spec: FunctionSpec) -> FunctionSpec:
    spec = spec.model_copy(deep=True)
    spec.id = spec_id(spec)
    return spec


def parse_function_spec(raw: str, provenance: Provenance) -> FunctionSpec:
    """Parse one raw tool record ({name, description, parameters, [outputs]})"""
    try:
        record = json.loads(raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseFailure(f"malformed JSON at {provenance.locator or provenance.source}: {exc}") from exc
    if not isinstance(record, dict):
        raise ParseFailure("record is not a JSON object")
    name = _clean(record.get("name"))
    if not name:
        raise ParseFailure("record has no name")

    parameters = record.get("parameters")
    required: List[str] = []
    if isinstance(parameters, dict):
        required = parameters.get("required") or []
        if not isinstance(required, list):
            raise SchemaMismatch("parameters.required must be a list")
    inputs = _parse_properties(parameters, "parameters", required)
    outputs = [p.model_copy(update={"required": False}) for p in _parse_properties(record.get("outputs"), "outputs")]

    spec = FunctionSpec(
        id="",
        name=name,
        description=_clean(record.get("description")),
        inputs=inputs,
        outputs=outputs,
        provenance=provenance,
        completed=False,
    )
    return with_id(spec)


def _parse_structure(reply: str, direction: str) -> List[ParameterDef]:
    obj = load_json_object(reply, CompletionFailed)
    structure = obj.get(f"{direction} structure")
    if not isinstance(structure, list):
        raise CompletionFailed(f'reply lacks a "{direction} structure" list')
    params = []
    for item in structure:
        if not isinstance(item, dict):
            raise CompletionFailed(f"{direction} structure entries must be objects")
        name = _clean(item.get("name"))
        description = _clean(item.get("description"))
        value_type = normalize_value_type(item.get("type"))
        if not (name and description and value_type):
            raise CompletionFailed(f"{direction} structure entry {item!r} is incomplete")
        params.append(ParameterDef(name=name, description=description, value_type=value_type))
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CompletionFailed(f"duplicate names in {direction} structure")
    return params


def _merge(existing: List[ParameterDef], predicted: List[ParameterDef]) -> Tuple[List[ParameterDef], bool]:
    """Fill missing description/type of existing params from predicted ones with the same name"""
    by_name = {p.name: p for p in predicted}
    merged = []
    changed = False
    for param in existing:
        guess = by_name.get(param.name)
        update = {}
        if guess is not None:
            if not param.description:
                update["description"] = guess.description
            if not param.value_type:
                update["value_type"] = guess.value_type
        if update:
            changed = True
            param = param.model_copy(update=update)
        merged.append(param)
    return merged, changed


async def complete_spec(spec: FunctionSpec, gw: LLMGateway, attempts: int = 2) -> FunctionSpec:
    """Fill missing parameter descriptions/types and empty outputs via the model.

    Complete specs come back unchanged without any gateway call.
    """
    if spec.is_complete:
        return spec
    inputs, outputs = list(spec.inputs), list(spec.outputs)
    filled = False

    if any(not p.is_complete for p in inputs):
        def parse_inputs(reply: str) -> List[ParameterDef]:
            merged, _ = _merge(inputs, _parse_structure(reply, "input"))
            if any(not p.is_complete for p in merged):
                raise CompletionFailed("predicted input structure does not cover every incomplete input")
            return merged

        inputs, _ = await ask_strict(gw, prompts.input_completion(spec), "complete_input", parse_inputs, CompletionFailed, attempts)
        filled = True

    if not outputs or any(not p.is_complete for p in outputs):
        def parse_outputs(reply: str) -> List[ParameterDef]:
            predicted = _parse_structure(reply, "output")
            if not outputs:
                if not predicted:
                    raise CompletionFailed("predicted output structure is empty")
                return sorted(predicted, key=lambda p: p.name)
            merged, _ = _merge(outputs, predicted)
            if any(not p.is_complete for p in merged):
                raise CompletionFailed("predicted output structure does not cover every incomplete output")
            return merged

        outputs, _ = await ask_strict(gw, prompts.output_completion(spec), "complete_output", parse_outputs, CompletionFailed, attempts)
        filled = True

    completed = spec.model_copy(update={"inputs": inputs, "outputs": outputs, "completed": spec.completed or filled})
    return with_id(completed)


def load_raw_records(path: Path, source: str) -> Tuple[List[FunctionSpec], int]:
    """Parse a JSONL file of raw records; returns (specs, rejected count)"""
    specs, rejected = [], 0
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            provenance = Provenance(source=source, locator=f"{Path(path).name}:{lineno}")
            try:
                specs.append(parse_function_spec(line, provenance))
            except (ParseFailure, SchemaMismatch) as exc:
                rejected += 1
                logger.warning("Skipping %s: %s", provenance.locator, exc)
    return specs, rejected


def dedupe(specs: Iterable[FunctionSpec]) -> List[FunctionSpec]:
    """Keep the first spec per canonical id"""
    seen: Dict[str, FunctionSpec] = {}
    for spec in specs:
        seen.setdefault(spec.id, spec)
    return list(seen.values())


async def complete_corpus(
    specs: Sequence[FunctionSpec],
    gw: LLMGateway,
    attempts: int = 2,
) -> Tuple[List[FunctionSpec], List[str]]:
    """Complete many specs concurrently; failed specs are dropped, their ids returned"""
    async def one(spec: FunctionSpec) -> Optional[FunctionSpec]:
        try:
            return await complete_spec(spec, gw, attempts)
        except (CompletionFailed, GatewayError) as exc:
            logger.warning("Dropping %s (%s): %s", spec.name, spec.id, exc)
            return None

    results = await asyncio.gather(*(one(s) for s in specs))
    kept = dedupe(r for r in results if r is not None)
    dropped = [s.id for s, r in zip(specs, results) if r is None]
    return kept, dropped
