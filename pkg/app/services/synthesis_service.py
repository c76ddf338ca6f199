import json
import re
from typing import Any, Dict, List, Mapping, Optional, Sequence

from app.exceptions import (
    GatewayError,
    IntentFormatError,
    MalformedToolCall,
    ToolFormatError,
)
from app.models.function_spec import FunctionSpec
from app.models.gateway import ChatMessage
from app.models.graph import FunctionChain
from app.models.trajectory import (
    STOP_MARKER,
    Message,
    Outcome,
    Role,
    SimLimits,
    ToolCall,
    Trajectory,
    UserIntent,
)
from app.services import prompts
from app.services.gateway import LLMGateway
from app.services.strict_reply import ask_strict, load_json_object
from app.utils.logger import get_logger

logger = get_logger(__name__)

THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL)
TOOL_CALL_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)
FUNC_RETURN_RE = re.compile(r"<func_return>(.*?)</func_return>", re.DOTALL)
INTENT_FIELDS = ("Task Instruction", "Tool Usage")


def parse_intent_reply(reply: str) -> Dict[str, Any]:
    obj = load_json_object(reply, IntentFormatError)
    if set(obj) != set(INTENT_FIELDS):
        raise IntentFormatError(f"intent reply must have exactly {INTENT_FIELDS}, got {sorted(obj)}")
    task = obj["Task Instruction"]
    if not isinstance(task, str) or not task.strip():
        raise IntentFormatError("Task Instruction must be a non-empty string")
    usage = obj["Tool Usage"]
    if not isinstance(usage, (str, list)):
        raise IntentFormatError("Tool Usage must be text or a list")
    return {"task_instruction": task.strip(), "tool_usage": usage}


async def synthesize_intent(
    gw: LLMGateway,
    chain: FunctionChain,
    corpus: Mapping[str, FunctionSpec],
    attempts: int = 2,
) -> UserIntent:
    """Ask for one natural user goal covering the chain's tools"""
    tools = []
    for step in dict.fromkeys(chain.steps):
        spec = corpus.get(step)
        if spec is None:
            raise KeyError(f"chain {chain.id} references unknown spec {step}")
        tools.append(spec.to_tool_schema())
    fields, _ = await ask_strict(gw, prompts.intent_synthesis(tools), "intent", parse_intent_reply, IntentFormatError, attempts)
    return UserIntent(chain_ref=chain.id, **fields)


def _decode_call(name: Any, arguments: Any) -> ToolCall:
    if not isinstance(name, str) or not name.strip():
        raise MalformedToolCall(f"tool call without a name: {name!r}")
    if arguments is None or arguments == "":
        arguments = {}
    if isinstance(arguments, str):
        try:
            arguments = json.loads(arguments)
        except json.JSONDecodeError as exc:
            raise MalformedToolCall(f"arguments of {name} are not JSON: {arguments[:200]!r}") from exc
    if not isinstance(arguments, dict):
        raise MalformedToolCall(f"arguments of {name} must be an object")
    return ToolCall(name=name.strip(), arguments=arguments)


def parse_assistant_message(
    text: str,
    native_tool_calls: Optional[Sequence[Dict[str, Any]]] = None,
    reasoning: str = "",
) -> Message:
    """Split an assistant reply into think, content and tool calls.

    Structured tool calls returned by the provider win over tag parsing.
    """
    text = text or ""
    think_parts = [m.strip() for m in THINK_RE.findall(text)]
    rest = THINK_RE.sub("", text)
    if "</think>" in rest:
        # reply opened the think block implicitly
        head, _, rest = rest.partition("</think>")
        think_parts.insert(0, head.strip())
    think = "\n".join(p for p in [reasoning.strip(), *think_parts] if p)

    calls: List[ToolCall] = []
    if native_tool_calls:
        for raw in native_tool_calls:
            function = raw.get("function", raw)
            calls.append(_decode_call(function.get("name"), function.get("arguments")))
        content = TOOL_CALL_RE.sub("", rest)
    else:
        blocks = TOOL_CALL_RE.findall(rest)
        if rest.count("<tool_call>") != len(blocks):
            raise MalformedToolCall("unterminated <tool_call> block")
        for block in blocks:
            try:
                obj = json.loads(block)
            except json.JSONDecodeError as exc:
                raise MalformedToolCall(f"tool call is not JSON: {block.strip()[:200]!r}") from exc
            if not isinstance(obj, dict):
                raise MalformedToolCall("tool call must be a JSON object")
            calls.append(_decode_call(obj.get("name"), obj.get("arguments")))
        content = TOOL_CALL_RE.sub("", rest)
    return Message(role=Role.ASSISTANT, think=think, content=content.strip(), tool_calls=calls)


def parse_func_return(reply: str) -> str:
    """Interior JSON of the single <func_return> region, re-serialized"""
    regions = FUNC_RETURN_RE.findall(reply or "")
    if len(regions) != 1:
        raise ToolFormatError(f"expected exactly one <func_return> region, found {len(regions)}")
    try:
        body = json.loads(regions[0])
    except json.JSONDecodeError as exc:
        raise ToolFormatError(f"<func_return> body is not JSON: {regions[0].strip()[:200]!r}") from exc
    return json.dumps(body, ensure_ascii=False)


async def simulate_tool(
    gw: LLMGateway,
    function_spec: Optional[FunctionSpec],
    tool_call: ToolCall,
    attempts: int = 2,
    seed: Optional[int] = None,
) -> Message:
    """Simulated execution of one call; error objects from the simulator are kept as results"""
    if function_spec is not None:
        function_info = prompts.render_json(function_spec.to_tool_schema())
    else:
        function_info = prompts.UNKNOWN_FUNCTION_INFO.format(name=tool_call.name)
    prompt = prompts.tool_simulator(function_info, [{"name": tool_call.name, "arguments": tool_call.arguments}])
    result, _ = await ask_strict(gw, prompt, "tool", parse_func_return, ToolFormatError, attempts, seed=seed)
    return Message(role=Role.TOOL, tool_result=result, name=tool_call.name)


def _merge_same_role(messages: List[ChatMessage]) -> List[ChatMessage]:
    merged: List[ChatMessage] = []
    for m in messages:
        if merged and merged[-1].role == m.role and m.role in ("user", "assistant") and not merged[-1].tool_calls and not m.tool_calls:
            merged[-1] = ChatMessage(role=m.role, content=f"{merged[-1].content}\n\n{m.content}")
        else:
            merged.append(m)
    return merged


def user_view(intent: UserIntent, messages: Sequence[Message]) -> List[ChatMessage]:
    """Conversation as the user agent sees it: roles flipped, tool traffic hidden"""
    view = [
        ChatMessage(role="system", content=prompts.user_simulator(intent.task_instruction)),
        ChatMessage(role="user", content=prompts.USER_KICKOFF),
    ]
    for m in messages:
        if m.role == Role.USER:
            view.append(ChatMessage(role="assistant", content=m.content))
        elif m.role == Role.ASSISTANT and m.content:
            view.append(ChatMessage(role="user", content=m.content))
    return _merge_same_role(view)


def assistant_view(tools: Sequence[FunctionSpec], messages: Sequence[Message], native_tools: bool) -> List[ChatMessage]:
    """Conversation as the assistant agent sees it (think blocks are not replayed)"""
    view = [ChatMessage(role="system", content=prompts.assistant_system([t.to_tool_schema() for t in tools], native_tools))]
    pending_ids: List[str] = []
    for index, m in enumerate(messages):
        if m.role == Role.USER:
            view.append(ChatMessage(role="user", content=m.content))
        elif m.role == Role.ASSISTANT:
            if native_tools and m.tool_calls:
                pending_ids = [f"call_{index}_{k}" for k in range(len(m.tool_calls))]
                wire_calls = [
                    {
                        "id": call_id,
                        "type": "function",
                        "function": {"name": c.name, "arguments": json.dumps(c.arguments, ensure_ascii=False)},
                    }
                    for call_id, c in zip(pending_ids, m.tool_calls)
                ]
                view.append(ChatMessage(role="assistant", content=m.content, tool_calls=wire_calls))
            else:
                stripped = m.model_copy(update={"think": ""})
                view.append(ChatMessage(role="assistant", content=prompts.render_assistant_text(stripped)))
        elif native_tools:
            call_id = pending_ids.pop(0) if pending_ids else None
            view.append(ChatMessage(role="tool", content=m.tool_result or "", tool_call_id=call_id))
        else:
            view.append(ChatMessage(role="user", content=f"<tool_response>\n{m.tool_result or ''}\n</tool_response>"))
    return _merge_same_role(view)


class _Abort(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


async def run_simulation(
    gw_user: LLMGateway,
    gw_assistant: LLMGateway,
    gw_tool: LLMGateway,
    intent: UserIntent,
    tools: Sequence[FunctionSpec],
    limits: SimLimits,
    seed: int,
    trajectory_id: Optional[str] = None,
    native_tools: bool = True,
    attempts: int = 2,
) -> Trajectory:
    """User -> assistant (-> tool -> assistant)* -> user ... until stop, turn limit or abort"""
    if not tools:
        raise ValueError("run_simulation needs at least one tool")
    by_name = {t.name: t for t in tools}
    openai_tools = [t.to_openai_tool() for t in tools] if native_tools else None
    messages: List[Message] = []
    outcome = Outcome.TURN_LIMIT
    abort_reason: Optional[str] = None

    async def assistant_turn() -> Message:
        for attempt in range(2):
            req = gw_assistant.request(
                assistant_view(tools, messages, native_tools),
                purpose="assistant",
                tools=openai_tools,
                seed=seed,
                max_turn_tokens=limits.max_turn_tokens,
            )
            reply = await gw_assistant.chat(req)
            try:
                message = parse_assistant_message(reply.content, reply.tool_calls, reply.reasoning)
            except MalformedToolCall as exc:
                logger.info("%s: malformed tool call (attempt %d): %s", trajectory_id, attempt + 1, exc)
                continue
            if message.content or message.tool_calls:
                return message
            logger.info("%s: empty assistant reply (attempt %d)", trajectory_id, attempt + 1)
        raise _Abort("malformed-assistant-reply")

    try:
        user_turns = 0
        while user_turns < limits.max_user_turns:
            req = gw_user.request(user_view(intent, messages), purpose="user", seed=seed, max_turn_tokens=limits.max_turn_tokens)
            user_text = (await gw_user.chat(req)).content.strip()
            if STOP_MARKER in user_text:
                if user_turns == 0:
                    raise _Abort("first-turn-stop")
                outcome = Outcome.STOPPED
                break
            if not user_text:
                raise _Abort("empty-user-reply")
            messages.append(Message(role=Role.USER, content=user_text))
            user_turns += 1

            tool_steps = 0
            while True:
                reply = await assistant_turn()
                if reply.tool_calls and tool_steps + len(reply.tool_calls) > limits.max_consecutive_tool_steps:
                    raise _Abort("loop")
                if not reply.tool_calls:
                    messages.append(reply)
                    break
                # the call message and its results land together or not at all
                turn = [reply]
                for call in reply.tool_calls:
                    try:
                        result = await simulate_tool(gw_tool, by_name.get(call.name), call, attempts, seed)
                    except ToolFormatError as exc:
                        logger.info("%s: %s", trajectory_id, exc)
                        raise _Abort("tool-format") from exc
                    turn.append(result)
                messages.extend(turn)
                tool_steps += len(reply.tool_calls)
    except _Abort as exc:
        outcome, abort_reason = Outcome.ABORTED, exc.reason
    except GatewayError as exc:
        outcome, abort_reason = Outcome.ABORTED, f"gateway: {exc}"
        logger.warning("%s aborted on gateway error: %s", trajectory_id, exc)

    return Trajectory(
        id=trajectory_id or intent.chain_ref,
        intent=intent,
        tools=[t.to_tool_schema() for t in tools],
        messages=messages,
        outcome=outcome,
        abort_reason=abort_reason,
        seed=seed,
        native_tools=native_tools,
    )
