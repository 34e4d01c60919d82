"""Tool registry and sandboxed executor.

Tool calls travel as a JSON object ``{"tool_name": ..., "tool_input": {...}}``
embedded anywhere in an action's text. Tool output goes back to the policy as
a message starting with ``tool_output:``.
"""

from __future__ import annotations

import json
import queue
import re
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from .calc import evaluate, render_number
from .errors import (
    DuplicateTool,
    MalformedToolCall,
    MissingColumn,
    MissingRow,
    ToolError,
    UnknownTool,
)
from .trajectory import Observation, ToolCall

TOOL_OUTPUT_PREFIX = "tool_output:"
TRUNCATION_MARKER = "...[truncated]"

Handler = Callable[[Mapping[str, Any], Mapping[str, Any] | None], str]


def _reject_constant(name):
    raise ValueError(f"non-finite literal {name}")


_DECODER = json.JSONDecoder(parse_constant=_reject_constant)
_CALL_START = re.compile(r'\{\s*"tool_name"\s*:')


def find_tool_calls(text: str) -> list[ToolCall]:
    """All complete tool-call objects in ``text``, in order of appearance."""
    calls: list[ToolCall] = []
    malformed = None
    pos = text.find("{")
    while pos != -1:
        try:
            obj, end = _DECODER.raw_decode(text, pos)
        except ValueError:
            if _CALL_START.match(text, pos):
                malformed = malformed or f"unparseable tool call at offset {pos}"
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict) and "tool_name" in obj:
            if not isinstance(obj.get("tool_input"), dict):
                malformed = malformed or "tool_input missing or not an object"
            else:
                calls.append(ToolCall(obj["tool_name"], obj["tool_input"]))
            pos = text.find("{", end)
        else:
            # not a call; a call may still be nested inside it
            pos = text.find("{", pos + 1)
    if not calls and malformed:
        raise MalformedToolCall(malformed)
    return calls


def parse_tool_call(text: str) -> ToolCall | None:
    """First complete tool call in ``text``, or ``None``.

    Raises MalformedToolCall when the text holds a ``tool_name`` object but no
    complete call.
    """
    calls = find_tool_calls(text)
    return calls[0] if calls else None


@dataclass(frozen=True)
class ToolLimits:
    wall_clock_timeout: float = 2.0  # seconds
    max_output_bytes: int = 4096

    def __post_init__(self):
        if not self.wall_clock_timeout > 0:
            raise ValueError("wall_clock_timeout must be positive")
        if not self.max_output_bytes > 0:
            raise ValueError("max_output_bytes must be positive")


@dataclass
class ToolRegistry:
    handlers: dict[str, Handler] = field(default_factory=dict)

    def register(self, name: str, handler: Handler) -> "ToolRegistry":
        if name in self.handlers:
            raise DuplicateTool(name)
        self.handlers[name] = handler
        return self

    def __contains__(self, name: str) -> bool:
        return name in self.handlers

    def lookup(self, name: str) -> Handler:
        try:
            return self.handlers[name]
        except KeyError:
            raise UnknownTool(name) from None


def register_tool(registry: ToolRegistry, name: str, handler: Handler) -> ToolRegistry:
    return registry.register(name, handler)


def _truncate(payload: str, max_bytes: int) -> str:
    raw = payload.encode("utf-8")
    if len(raw) <= max_bytes:
        return payload
    # the marker counts against the budget; a cut multi-byte character is dropped whole
    marker = TRUNCATION_MARKER.encode("utf-8")
    if max_bytes <= len(marker):
        return raw[:max_bytes].decode("utf-8", errors="ignore")
    return raw[: max_bytes - len(marker)].decode("utf-8", errors="ignore") + TRUNCATION_MARKER


def invoke(
    registry: ToolRegistry,
    call: ToolCall,
    limits: ToolLimits,
    scene: Mapping[str, Any] | None = None,
) -> Observation:
    """Run one tool call under ``limits``.

    The handler runs on a daemon thread; past the deadline the caller gets a
    timeout observation and the thread is abandoned.
    """
    handler = registry.lookup(call.tool_name)
    results: queue.Queue = queue.Queue(maxsize=1)

    def target():
        try:
            results.put(("ok", handler(call.tool_input, scene)))
        except ToolError as exc:
            results.put(("tool-error", f"{type(exc).__name__}: {exc}"))
        except Exception as exc:  # handler bug; still reported to the policy as feedback
            results.put(("tool-error", f"{type(exc).__name__}: {exc}"))

    worker = threading.Thread(target=target, name=f"tool-{call.tool_name}", daemon=True)
    worker.start()
    try:
        status, payload = results.get(timeout=limits.wall_clock_timeout)
    except queue.Empty:
        return Observation(call.tool_name, f"timeout after {limits.wall_clock_timeout:g}s", "timeout")
    if not isinstance(payload, str):
        status, payload = "tool-error", f"handler returned {type(payload).__name__}, expected str"
    return Observation(call.tool_name, _truncate(payload, limits.max_output_bytes), status)


def format_observation(obs: Observation) -> str:
    return f"{TOOL_OUTPUT_PREFIX} {obs.payload}"


# -- built-in tools --------------------------------------------------------------


def calculator(tool_input: Mapping[str, Any], scene=None) -> str:
    expr = tool_input.get("expr")
    if not isinstance(expr, str):
        raise ToolError("calculator needs a string 'expr'")
    return render_number(evaluate(expr))


def table_lookup(scene_table: Mapping[str, Any], row_key: str, column_key: str) -> str:
    rows, columns = scene_table["rows"], scene_table["columns"]
    if row_key not in rows:
        raise MissingRow(row_key)
    if column_key not in columns:
        raise MissingColumn(column_key)
    return scene_table["cells"][rows.index(row_key)][columns.index(column_key)]


def table_lookup_tool(tool_input: Mapping[str, Any], scene=None) -> str:
    if not scene or "table" not in scene:
        raise ToolError("table_lookup needs a table scene")
    row, col = tool_input.get("row_key"), tool_input.get("column_key")
    if not isinstance(row, str) or not isinstance(col, str):
        raise ToolError("table_lookup needs string 'row_key' and 'column_key'")
    return table_lookup(scene["table"], row, col)


class SubprocessTool:
    """Adapter running an external command with ``tool_input`` as JSON on stdin.

    Disabled unless constructed with ``enabled=True``; never registered by default.
    """

    def __init__(self, argv: list[str], timeout: float = 2.0, enabled: bool = False):
        self.argv = list(argv)
        self.timeout = timeout
        self.enabled = enabled

    def __call__(self, tool_input, scene=None) -> str:
        if not self.enabled:
            raise ToolError("external-process tools are disabled")
        try:
            proc = subprocess.run(
                self.argv,
                input=json.dumps(tool_input),
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except subprocess.TimeoutExpired:
            raise ToolError("external tool timed out") from None
        if proc.returncode != 0:
            raise ToolError(f"exit status {proc.returncode}: {proc.stderr.strip()[:200]}")
        return proc.stdout.strip()


def default_registry() -> ToolRegistry:
    return ToolRegistry().register("calculator", calculator).register("table_lookup", table_lookup_tool)
