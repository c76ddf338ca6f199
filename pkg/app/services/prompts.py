"""Prompt templates for every model-facing step of the pipeline."""

import json
from typing import Any, Dict, List, Sequence

from app.models.function_spec import FunctionSpec
from app.models.trajectory import Message, Role, STOP_MARKER

INPUT_COMPLETION = """Please help me predict the input of the function.

Return only one result in JSON format with two fields: input description and input structure.
Input description should describe the content of the input, while input structure should be a list of parameters, each with a name, a description and a type.

The function is: {function}"""

OUTPUT_COMPLETION = """Please help me predict the output of this function.

Return only one result in JSON format with two fields: output description and output structure.
Output description should describe the content of the output, while output structure should be a list of parameters, each with a name, a description and a type.

The function is: {function}"""

EDGE_VALIDATION = """Please determine whether the following "source_function" and "target_function" can be highly correlated or the output result of "source_function" is suitable as the input parameter of "target_function". If the correlation is large or suitable for parameter passing, the specific function is as follows:

### Source_function:

{source_function}

### Target_function:

{target_function}

Please evaluate the strength of the association edges and assign a score from 0 to 9 for the following aspects: field transitivity, coherence of potential user intent paths. The output should be a JSON object with exactly two fields: "Field transitivity", "Potential user intent path coherence". Do not output anything else!!!"""

INTENT_SYNTHESIS = """Suppose you have another assistant who has access to the following tools to get information. Please generate one task instruction that mimic real human users and their intentions, such as having different personalities and goals. Note that the intent should be as natural as possible, covering as many tools as possible, but not forcing overwriting if the tools are not closely related. Please ignore image-related tools and do not generate image-related instructions. User intents should be highly consistent, avoiding the awkward patchwork of several unrelated tasks.

### Tools

{tools}

Please output the results strictly in JSON format with two fields: "Task Instruction" and "Tool Usage" and don't output anything else!!"""

USER_SIMULATOR = """You are a human user and must act as a genuine user throughout the conversation, interacting in a manner consistent with normal human behavior.
Your primary goal is to achieve the following intent by seeking guidance, advice, or assistance from other participants.

### Your intent:

{intent}

Please adhere strictly to the following guidelines:

1. Role Consistency and Natural Interaction: Always maintain the role of a user. Do not respond as an assistant, AI, or any authoritative figure. Speak naturally, as a real human would. Avoid repetitive, mechanical, or overly structured responses.

2. Incremental Disclosure: Do not reveal your entire intent at once. Unfold your needs gradually over multiple turns. Use common human conversation strategies, such as showing uncertainty when appropriate.

3. Response to Fulfillment: If the the other participant successfully fulfills your intent, output '{stop}' immediately. Do not output '{stop}' in the first turn, regardless of the conversation!!"""

USER_KICKOFF = "Start the conversation now with your first message to the assistant."

ASSISTANT_SYSTEM = """You are a helpful assistant with access to tools. Think step by step inside <think></think> before answering. Ask the user for missing details instead of guessing them."""

ASSISTANT_INLINE_TOOLS = """

### Tools

{tools}

To call a tool, output one <tool_call></tool_call> block per call containing a JSON object with "name" and "arguments" fields."""

TOOL_SIMULATOR = """You are simulating a high-performance computer system with complete computational capabilities. You have access to extensive external knowledge, can execute any arbitrary function, and operate without errors. For a given function, you should simulate the execution of a computer system program as accurately as possible.

### Function info

{function_info}

### Function call

{tool_calls}

Given this function call, you should execute the function and return the results strictly in JSON format.
Your response should contain only the JSON result, without any additional or irrelevant text.
The result must be enclosed within <func_return> and </func_return> tags.
If the function call is invalid (e.g., incorrect function name, missing or malformed arguments), return a JSON error message clearly indicating the cause.

### Example of function call and function return:

[{{ "name": "get_weather", "arguments": {{"city": "New York"}} }}]

<func_return> {{ "temperature": "25°C" }} </func_return>"""

UNKNOWN_FUNCTION_INFO = "No function named {name!r} is available in this system."

TRAJECTORY_JUDGE = """Please strictly evaluate the quality of the following multi-turn dialogue data based on the following criteria: contextual coherence, role consistency, logical soundness, and accuracy of tool usage.
Your task is to make a binary judgment: if the dialogue is of good quality, output 1; otherwise, output 0.

### Tools

{tools}

###Multi-turn conversations

{messages}

Please make a strict and comprehensive assessment of the dialogue's quality, considering whether it maintains contextual coherence, consistent role behavior, logical reasoning, and correct use of tools.
Finally, output only a single digit: 0 or 1. Do not include any other text or explanation."""

TURN_JUDGE = """Please strictly evaluate the quality of the last response in the following dialogue data, based on contextual coherence, logical consistency, and accuracy of tool usage.
Determine whether the response is semantically aligned with the previous dialogue, logically sound without contradictions, and employs the mentioned tools correctly according to their definitions and argument structures.
If the response is of good quality, output 1; otherwise, output 0.

### Tools mentioned in the conversation

{tools}

### Conversation history

{messages}

### Last response

{response}

Please make a strict judgment on whether the last response is of good or poor quality, considering contextual coherence, logical soundness, and correctness of tool usage.
Finally, output only a single digit: 0 or 1. Do not output any other text or explanation."""

DOMAIN_CLASSIFICATION = """Classify the application domain of the following user intent for a tool-using assistant.
A single intent may belong to several domains when it combines tools from different areas.
Use short lowercase domain names such as "data analysis", "entertainment", "finance", "travel", "e-commerce", "health", "weather", "security", "education", "communication", "productivity".

### User intent

{intent}

Return only a JSON object with one field "domains" whose value is a non-empty list of domain names. Do not output anything else."""

FORMAT_REMINDER = "Your previous reply did not follow the required output format. {hint} Reply again, following the format exactly."

HINTS = {
    "complete_input": 'Return one JSON object with the fields "input description" and "input structure".',
    "complete_output": 'Return one JSON object with the fields "output description" and "output structure".',
    "validate_edge": 'Return one JSON object with exactly the fields "Field transitivity" and "Potential user intent path coherence", each an integer from 0 to 9.',
    "intent": 'Return one JSON object with exactly the fields "Task Instruction" and "Tool Usage".',
    "tool": "Return the JSON result enclosed in exactly one <func_return></func_return> pair.",
    "judge_trajectory": "Output only a single digit: 0 or 1.",
    "judge_turn": "Output only a single digit: 0 or 1.",
    "domain": 'Return one JSON object with the field "domains".',
}


def render_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=2)


def render_tools(specs: Sequence[Dict[str, Any]]) -> str:
    return "\n\n".join(render_json(s) for s in specs)


def render_tool_call(call) -> str:
    return json.dumps({"name": call.name, "arguments": call.arguments}, ensure_ascii=False)


def render_assistant_text(message: Message) -> str:
    """Assistant message back in tagged text form (think, content, tool calls)"""
    parts: List[str] = []
    if message.think:
        parts.append(f"<think>{message.think}</think>")
    if message.content:
        parts.append(message.content)
    for call in message.tool_calls:
        parts.append(f"<tool_call>\n{render_tool_call(call)}\n</tool_call>")
    return "\n".join(parts)


def render_message(message: Message) -> str:
    if message.role == Role.ASSISTANT:
        return f"assistant: {render_assistant_text(message)}"
    if message.role == Role.TOOL:
        return f"tool: {message.tool_result or ''}"
    return f"user: {message.content}"


def render_messages(messages: Sequence[Message]) -> str:
    return "\n\n".join(render_message(m) for m in messages)


def input_completion(spec: FunctionSpec) -> str:
    return INPUT_COMPLETION.format(function=render_json(spec.to_tool_schema()))


def output_completion(spec: FunctionSpec) -> str:
    return OUTPUT_COMPLETION.format(function=render_json(spec.to_tool_schema()))


def edge_validation(src: FunctionSpec, dst: FunctionSpec) -> str:
    return EDGE_VALIDATION.format(
        source_function=render_json(src.to_tool_schema()),
        target_function=render_json(dst.to_tool_schema()),
    )


def intent_synthesis(tools: Sequence[Dict[str, Any]]) -> str:
    return INTENT_SYNTHESIS.format(tools=render_tools(tools))


def user_simulator(intent: str) -> str:
    return USER_SIMULATOR.format(intent=intent, stop=STOP_MARKER)


def assistant_system(tools: Sequence[Dict[str, Any]], native_tools: bool) -> str:
    if native_tools:
        return ASSISTANT_SYSTEM
    return ASSISTANT_SYSTEM + ASSISTANT_INLINE_TOOLS.format(tools=render_tools(tools))


def tool_simulator(function_info: str, tool_calls: List[Dict[str, Any]]) -> str:
    return TOOL_SIMULATOR.format(function_info=function_info, tool_calls=json.dumps(tool_calls, ensure_ascii=False))


def trajectory_judge(tools: Sequence[Dict[str, Any]], messages: Sequence[Message]) -> str:
    return TRAJECTORY_JUDGE.format(tools=render_tools(tools), messages=render_messages(messages))


def turn_judge(tools: Sequence[Dict[str, Any]], history: Sequence[Message], response: Message) -> str:
    return TURN_JUDGE.format(
        tools=render_tools(tools),
        messages=render_messages(history),
        response=render_message(response),
    )


def domain_classification(intent: str) -> str:
    return DOMAIN_CLASSIFICATION.format(intent=intent)


def format_reminder(purpose: str) -> str:
    return FORMAT_REMINDER.format(hint=HINTS.get(purpose, "Follow the requested format."))
