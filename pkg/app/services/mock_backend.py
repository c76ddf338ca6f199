"""Deterministic stand-in for every model role, used by `backend: "mock"` runs.

Replies depend only on the request content and the seed, so offline runs
are reproducible byte for byte.
"""

import hashlib
import json
import re
from typing import Any, Dict, List, Optional

from app.models.gateway import ChatReply, ChatRequest
from app.models.trajectory import STOP_MARKER

NAME_RE = re.compile(r'"name":\s*"([^"]+)"')
DOMAINS = ["data analysis", "entertainment", "e-commerce", "finance", "travel", "communication", "security"]
EXAMPLE_VALUES = {"string": "example", "float": 1.0, "int": 1, "integer": 1, "number": 1.0, "boolean": True, "bool": True}


def _extract_json(text: str, marker: str, end: Optional[str] = None) -> Any:
    start = text.find(marker)
    if start < 0:
        return None
    body = text[start + len(marker):]
    if end and end in body:
        body = body[: body.index(end)]
    try:
        return json.loads(body.strip())
    except json.JSONDecodeError:
        return None


class OfflineResponder:
    def __init__(self, seed: int = 0):
        self.seed = seed

    def _hash(self, *parts: str) -> int:
        text = "\x00".join([str(self.seed), *parts])
        return int(hashlib.sha256(text.encode("utf-8")).hexdigest()[:12], 16)

    def __call__(self, req: ChatRequest) -> Optional[ChatReply]:
        handler = getattr(self, f"_{req.purpose}", None)
        if handler is None:
            return None
        # re-prompts carry the original request first; answer that one
        prompt = next((m.content for m in req.messages if m.role == "user"), "")
        return ChatReply(content=handler(req, prompt))

    def _complete_input(self, req: ChatRequest, prompt: str) -> str:
        function = _extract_json(prompt, "The function is:") or {}
        properties = (function.get("parameters") or {}).get("properties") or {}
        structure = [
            {
                "name": name,
                "description": body.get("description") or f"The {name.replace('_', ' ')} to use",
                "type": body.get("type") or "string",
            }
            for name, body in properties.items()
        ]
        return json.dumps({"input description": f"Arguments of {function.get('name', 'the function')}", "input structure": structure})

    def _complete_output(self, req: ChatRequest, prompt: str) -> str:
        function = _extract_json(prompt, "The function is:") or {}
        name = function.get("name", "function")
        properties = (function.get("outputs") or {}).get("properties") or {}
        structure = [
            {"name": k, "description": v.get("description") or f"The {k.replace('_', ' ')} returned", "type": v.get("type") or "string"}
            for k, v in properties.items()
        ] or [{"name": "result", "description": f"Result returned by {name}", "type": "dict"}]
        return json.dumps({"output description": f"Output of {name}", "output structure": structure})

    def _validate_edge(self, req: ChatRequest, prompt: str) -> str:
        return json.dumps({"Field transitivity": 7, "Potential user intent path coherence": 7})

    def _intent(self, req: ChatRequest, prompt: str) -> str:
        names = list(dict.fromkeys(NAME_RE.findall(prompt)))
        steps = ", then ".join(n for n in names) or "look something up"
        return json.dumps({
            "Task Instruction": f"I want to get a small project done. I need help to {steps}.",
            "Tool Usage": names,
        })

    def _user(self, req: ChatRequest, prompt: str) -> str:
        system = req.messages[0].content
        turns_taken = sum(1 for m in req.messages if m.role == "assistant")
        stop_after = 2 + self._hash(system) % 2
        if turns_taken == 0:
            intent = system.split("### Your intent:", 1)[-1].split("Please adhere", 1)[0].strip()
            return f"Hi! {intent.splitlines()[0] if intent else 'Can you help me?'}"
        if turns_taken >= stop_after:
            return STOP_MARKER
        return "Thanks, that helps. Can you do the next step for me as well?"

    def _tool_names(self, req: ChatRequest) -> List[Dict[str, Any]]:
        if req.tools:
            return [t["function"] for t in req.tools]
        return [{"name": n, "parameters": {}} for n in dict.fromkeys(NAME_RE.findall(req.messages[0].content))]

    def _assistant(self, req: ChatRequest, prompt: str) -> str:
        last = req.messages[-1]
        if last.role == "tool" or last.content.startswith("<tool_response>"):
            return "<think>The tool returned a result; I will summarize it.</think>\nHere is what I found. The request completed successfully."
        tools = self._tool_names(req)
        queries = sum(1 for m in req.messages if m.role == "user" and not m.content.startswith("<tool_response>"))
        tool = tools[(queries - 1) % len(tools)] if tools else None
        if tool is None:
            return "Could you tell me a bit more about what you need?"
        parameters = tool.get("parameters") or {}
        properties = parameters.get("properties") or {}
        arguments = {
            name: EXAMPLE_VALUES.get(str(properties.get(name, {}).get("type")), "example")
            for name in parameters.get("required") or []
        }
        call = json.dumps({"name": tool["name"], "arguments": arguments}, sort_keys=True)
        return f"<think>The user needs {tool['name']}; I will call it.</think>\n<tool_call>\n{call}\n</tool_call>"

    def _tool(self, req: ChatRequest, prompt: str) -> str:
        calls = _extract_json(prompt, "### Function call", "Given this function call") or [{}]
        name = calls[0].get("name", "unknown") if calls else "unknown"
        if "No function named" in prompt:
            body = {"error": f"Unknown function: {name}"}
        else:
            body = {"status": "ok", "function": name, "result_id": f"{self._hash(prompt) % 100000:05d}"}
        return f"<func_return> {json.dumps(body, sort_keys=True)} </func_return>"

    def _judge_trajectory(self, req: ChatRequest, prompt: str) -> str:
        return "1"

    def _judge_turn(self, req: ChatRequest, prompt: str) -> str:
        return "0" if self._hash(prompt) % 10 == 0 else "1"

    def _domain(self, req: ChatRequest, prompt: str) -> str:
        h = self._hash(prompt)
        labels = [DOMAINS[h % len(DOMAINS)]]
        if h % 3 == 0:
            labels.append(DOMAINS[(h // 7) % len(DOMAINS)])
        return json.dumps({"domains": list(dict.fromkeys(labels))})
