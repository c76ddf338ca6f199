import json
from typing import Any, Callable, List, Optional, Tuple, Type, TypeVar

from app.exceptions import ToolforgeError
from app.models.gateway import ChatMessage
from app.services import prompts
from app.services.gateway import LLMGateway
from app.utils.logger import get_logger

logger = get_logger(__name__)

T = TypeVar("T")


def strip_code_fences(text: str) -> str:
    """Remove a surrounding ```json ... ``` wrapper"""
    text = text.strip()
    if text.startswith("```"):
        lines = text.splitlines()
        if len(lines) >= 3 and lines[-1].strip() == "```":
            text = "\n".join(lines[1:-1]).strip()
    return text


def load_json_object(text: str, error: Type[ToolforgeError]) -> dict:
    try:
        obj = json.loads(strip_code_fences(text))
    except (json.JSONDecodeError, ValueError) as exc:
        raise error(f"reply is not JSON: {text[:200]!r}") from exc
    if not isinstance(obj, dict):
        raise error(f"reply is not a JSON object: {text[:200]!r}")
    return obj


async def ask_strict(
    gw: LLMGateway,
    prompt: str,
    purpose: str,
    parse: Callable[[str], T],
    error: Type[ToolforgeError],
    attempts: int = 2,
    system: Optional[str] = None,
    seed: Optional[int] = None,
) -> Tuple[T, str]:
    """Send a strict-format prompt, re-prompting with a format reminder on parse errors.

    `attempts` counts the first request. Returns (parsed value, raw reply);
    raises `error` once every attempt produced an unparseable reply.
    """
    messages: List[ChatMessage] = []
    if system:
        messages.append(ChatMessage(role="system", content=system))
    messages.append(ChatMessage(role="user", content=prompt))
    last: Optional[ToolforgeError] = None
    raw = ""
    for attempt in range(max(1, attempts)):
        reply = await gw.chat(gw.request(list(messages), purpose=purpose, seed=seed))
        raw = reply.content
        try:
            return parse(reply.content), reply.content
        except ToolforgeError as exc:
            last = exc
            logger.info("%s reply rejected (attempt %d/%d): %s", purpose, attempt + 1, attempts, exc)
            messages.append(ChatMessage(role="assistant", content=reply.content))
            messages.append(ChatMessage(role="user", content=prompts.format_reminder(purpose)))
    failure = error(f"{purpose}: no well-formed reply after {attempts} attempts ({last})")
    failure.raw_reply = raw
    raise failure
