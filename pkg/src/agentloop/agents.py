"""Brain/hand roles: tool registry, prompt assembly, command parsing, task
dispatch, and the hand-agent action/observation loop.

The brain plans and never sees a command catalog; the hand executes and, in
hierarchical mode, sees only the catalog of its task's domain. Commands
naming another domain's tools are rejected at parse time, so out-of-domain
commands are never executed no matter what the model emits. Flat mode (one
prompt with every catalog plus a mixed example) exists as the ablation
condition and executes whatever parses.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from . import toolkit
from .backends import BackendResponse, Messages
from .errors import (
    BackendFailure,
    DriverUnavailable,
    LineOutOfRange,
    SpawnFailure,
    UnknownDomain,
)
from .memory import MARKERS, MemoryKind, MemoryRecord, MemoryStore, Phase
from .toolkit import EditRequest, Sandbox

logger = logging.getLogger(__name__)

MAX_HAND_ACTIONS = 20  # hard ceiling on the inner loop
DONE_LINE = re.compile(r"^\s*DONE:\s*(.*)$", re.MULTILINE)


@dataclass
class TaskSpec:
    """Brain-to-hand delegation: what to do, how, and what success looks like."""

    objective: str
    steps: list[str]
    expected_outcome: str
    tool_domain: str = ""
    turn: int = 0

    def __post_init__(self) -> None:
        if not self.objective.strip():
            raise ValueError("task objective must be non-empty")
        if not self.expected_outcome.strip():
            raise ValueError("expected outcome must be non-empty")

    def to_prompt_text(self) -> str:
        lines = [f"OBJECTIVE: {self.objective}", "STEPS:"]
        lines += [f"- {step}" for step in self.steps]
        lines.append(f"EXPECTED: {self.expected_outcome}")
        return "\n".join(lines)


@dataclass(frozen=True)
class CommandSpec:
    name: str
    signature: str
    doc: str
    example: str


@dataclass
class ToolDomain:
    name: str
    commands: dict[str, CommandSpec]
    handler: Callable[["ToolCommand", Sandbox], str]


class ToolRegistry:
    """Tool domains with disjoint command catalogs."""

    def __init__(self) -> None:
        self.domains: dict[str, ToolDomain] = {}

    def register(self, domain: ToolDomain) -> None:
        for name in domain.commands:
            owner = self.owning_domain(name)
            if owner is not None:
                raise ValueError(f"command {name!r} already registered in domain {owner!r}")
        self.domains[domain.name] = domain

    def domain(self, name: str) -> ToolDomain:
        if name not in self.domains:
            raise UnknownDomain(f"tool domain {name!r} is not registered")
        return self.domains[name]

    def owning_domain(self, command_name: str) -> str | None:
        for domain in self.domains.values():
            if command_name in domain.commands:
                return domain.name
        return None

    def __contains__(self, name: str) -> bool:
        return name in self.domains


@dataclass
class ToolCommand:
    name: str
    args: list = field(default_factory=list)
    kwargs: dict = field(default_factory=dict)
    raw: str = ""
    domain: str | None = None


@dataclass(frozen=True)
class Rejection:
    kind: str  # "misrouted" | "unknown" | "unparseable"
    command_name: str | None
    observation: str
    raw: str = ""


@dataclass
class ExecutionReport:
    actions: list[ToolCommand] = field(default_factory=list)
    observations: list[str] = field(default_factory=list)
    final_status: str = "failure"  # "success" | "failure"
    misrouted_count: int = 0
    result: str = ""


# --- default tool domains ---


def _to_edit_request(cmd: ToolCommand) -> EditRequest:
    values = list(cmd.args)
    names = ("file", "start_line", "end_line", "start_line_string", "end_line_string", "new_content")
    params = dict(zip(names, values))
    params.update(cmd.kwargs)
    return EditRequest(
        file=str(params["file"]),
        start_line=int(params["start_line"]),
        end_line=int(params["end_line"]),
        start_line_string=str(params["start_line_string"]),
        end_line_string=str(params["end_line_string"]),
        new_content=str(params["new_content"]),
    )


def _handle_file_edit(cmd: ToolCommand, sandbox: Sandbox) -> str:
    try:
        if cmd.name == "edit_file":
            req = _to_edit_request(cmd)
            outcome = toolkit.edit_file(req, sandbox.workdir)
            if outcome.applied:
                return f"edit applied: {req.file} lines {req.start_line}-{req.end_line} replaced"
            return (
                "edit mismatch: " + json.dumps(outcome.hint.to_dict())
                + "\nAdjust the line numbers to match the anchor text and retry."
            )
        if cmd.name == "replace_function":
            file, signature, new_code = cmd.args[0], cmd.args[1], cmd.args[2]
            outcome = toolkit.replace_function(str(file), str(signature), str(new_code), sandbox.workdir)
            if outcome.applied:
                return f"function replaced in {file}"
            return "replace mismatch: " + json.dumps(outcome.hint.to_dict())
        return f"unhandled file-edit command {cmd.name!r}"
    except FileNotFoundError as exc:
        return f"file not found: {exc}"
    except LineOutOfRange as exc:
        return f"line out of range: {exc}"
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        return f"bad arguments for {cmd.name}: {exc}"


def _handle_code(cmd: ToolCommand, sandbox: Sandbox) -> str:
    try:
        if cmd.name == "trace_code_switch":
            enabled = bool(cmd.args[0]) if cmd.args else bool(cmd.kwargs.get("enabled", True))
            sandbox.trace_enabled = enabled
            return f"call tracing {'enabled' if enabled else 'disabled'}"
        if cmd.name == "run_command":
            shell_cmd = str(cmd.args[0] if cmd.args else cmd.kwargs.get("cmd", ""))
            if sandbox.trace_enabled:
                try:
                    report = toolkit.run_traced(shell_cmd, sandbox)
                    chain = " -> ".join(c.function for c in report.calls) or "(no user-code calls)"
                    return (
                        f"traced calls: {chain}\nexit status {report.exit_status}\n{report.output}"
                    )
                except DriverUnavailable as exc:
                    prefix = f"tracing unavailable ({exc}); ran untraced\n"
                    result = toolkit.run_command(shell_cmd, sandbox)
                    return prefix + f"exit status {result.exit_status}\n{result.output}"
            result = toolkit.run_command(shell_cmd, sandbox)
            return f"exit status {result.exit_status}\n{result.output}"
        return f"unhandled code command {cmd.name!r}"
    except SpawnFailure as exc:
        return f"command rejected: {exc}"
    except (IndexError, TypeError, ValueError) as exc:
        return f"bad arguments for {cmd.name}: {exc}"


def _handle_browser_stub(cmd: ToolCommand, sandbox: Sandbox) -> str:
    return f"browser domain is a stub; {cmd.name!r} was not executed"


def default_registry() -> ToolRegistry:
    registry = ToolRegistry()
    registry.register(
        ToolDomain(
            name="file-edit",
            commands={
                "edit_file": CommandSpec(
                    "edit_file",
                    "edit_file(file, start_line, end_line, start_line_string, end_line_string, new_content)",
                    "Replace lines start_line..end_line after verifying both anchor strings.",
                    'edit_file("app.py", 3, 3, "x = 1", "x = 1", "x = 2")',
                ),
                "replace_function": CommandSpec(
                    "replace_function",
                    "replace_function(file, signature, new_code)",
                    "Replace the function whose definition line starts with the signature.",
                    'replace_function("app.py", "def add", "def add(a, b):\\n    return a + b")',
                ),
            },
            handler=_handle_file_edit,
        )
    )
    registry.register(
        ToolDomain(
            name="code",
            commands={
                "run_command": CommandSpec(
                    "run_command",
                    "run_command(cmd)",
                    "Run a shell command in the sandbox and return its output and exit status.",
                    'run_command("python3 app.py")',
                ),
                "trace_code_switch": CommandSpec(
                    "trace_code_switch",
                    "trace_code_switch(enabled)",
                    "Toggle function-call tracing for subsequent run_command calls.",
                    "trace_code_switch(true)",
                ),
            },
            handler=_handle_code,
        )
    )
    registry.register(
        ToolDomain(
            name="browser",
            commands={
                "browse": CommandSpec(
                    "browse",
                    "browse(url)",
                    "Open a web page and return its text.",
                    'browse("https://example.org")',
                ),
                "web_search": CommandSpec(
                    "web_search",
                    "web_search(query)",
                    "Search the web and return result snippets.",
                    'web_search("merge sorted lists")',
                ),
            },
            handler=_handle_browser_stub,
        )
    )
    return registry


# --- prompt assembly ---

_BRAIN_SYSTEM = (
    "You are the reasoning agent of a two-level assistant. You analyze the "
    "request, schedule tasks for an execution agent, evaluate its reports, "
    "and summarize each turn. You never call tools yourself."
)
_HAND_SYSTEM = (
    "You are the execution agent. Carry out the assigned task by issuing one "
    "command per response from the catalog below. When the task is complete, "
    "respond with DONE: <result>."
)

_MIXED_ONE_SHOT = """Example (mixed-domain session):
TASK: fix the heading in page.py and double-check the style guide online
edit_file("page.py", 12, 12, "heading =", "heading =", "heading = 'Home'")
browse("https://style.example.org/headings")
DONE: heading fixed and style confirmed
"""


def _render_record(record: MemoryRecord) -> str:
    return f"{MARKERS[record.kind]}: {record.content}"


def _catalog_text(domain: ToolDomain) -> str:
    lines = [f"Commands for domain '{domain.name}':"]
    for spec in domain.commands.values():
        lines.append(f"- {spec.signature}: {spec.doc}")
        lines.append(f"  example: {spec.example}")
    return "\n".join(lines)


def render_prompt(
    role: str,
    context_records: Sequence[MemoryRecord],
    mode: str,
    registry: ToolRegistry,
    task_domain: str | None = None,
    mandatory_requirement: str | None = None,
    instruction: str = "",
    extra_notes: Iterable[str] = (),
) -> Messages:
    """Assemble the ordered chat messages for a brain or hand call.

    Hand prompts carry the task domain's catalog (hierarchical) or every
    catalog plus a mixed one-shot example (flat). Brain prompts never carry a
    catalog and always embed the mandatory requirement verbatim.
    """
    if role == "brain":
        system = _BRAIN_SYSTEM
        if mandatory_requirement:
            system += f"\nMandatory requirement: {mandatory_requirement}"
    elif role == "hand":
        parts = [_HAND_SYSTEM]
        if mode == "flat":
            parts += [_catalog_text(d) for d in registry.domains.values()]
            parts.append(_MIXED_ONE_SHOT)
        else:
            parts.append(_catalog_text(registry.domain(task_domain or "")))
        system = "\n\n".join(parts)
    else:
        raise ValueError(f"unknown role {role!r}")

    body = [_render_record(r) for r in context_records]
    body += [f"NOTE: {note}" for note in extra_notes]
    if instruction:
        body.append(instruction)
    return [("system", system), ("user", "\n".join(body) if body else "(no history)")]


# --- dispatch ---

_KEYWORD_TABLE: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("file-edit", ("edit", "open", "file")),
    ("code", ("run", "execute", "python", "test")),
    ("browser", ("search", "web", "url")),
)


def classify_tool_domain(text: str, registry: ToolRegistry) -> str | None:
    """First keyword-table row with a whole-word hit in the text wins."""
    lowered = text.lower()
    for domain, keywords in _KEYWORD_TABLE:
        if domain not in registry:
            continue
        for keyword in keywords:
            if re.search(rf"\b{re.escape(keyword)}\b", lowered):
                return domain
    return None


def dispatch_task(task: TaskSpec, registry: ToolRegistry) -> str:
    """Resolve the tool domain for a task; default to 'code' with a warning."""
    if task.tool_domain:
        if task.tool_domain not in registry:
            raise UnknownDomain(f"task names unregistered domain {task.tool_domain!r}")
        return task.tool_domain
    domain = classify_tool_domain(task.to_prompt_text(), registry)
    if domain is None:
        logger.warning("no tool domain matched for task %r; defaulting to 'code'", task.objective)
        return "code"
    return domain


# --- command parsing ---

_NAME_OPEN = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\(")
_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", '"': '"', "'": "'"}


def _scan_balanced(text: str, start: int) -> int | None:
    """Index just past the ')' closing the paren at text[start], quote-aware."""
    depth = 0
    quote: str | None = None
    i = start
    while i < len(text):
        ch = text[i]
        if quote:
            if ch == "\\":
                i += 2
                continue
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth == 0:
                return i + 1
        i += 1
    return None


def _find_command(text: str) -> tuple[str, str, int] | None:
    """First well-formed name(args) call in the text: (name, args, start index)."""
    for match in _NAME_OPEN.finditer(text):
        start = match.start()
        if start > 0 and text[start - 1] not in " \t\n`>":
            continue
        end = _scan_balanced(text, match.end() - 1)
        if end is None:
            continue
        return match.group(1), text[match.end() : end - 1], start
    return None


def _split_args(argstr: str) -> list[str]:
    pieces: list[str] = []
    depth = 0
    quote: str | None = None
    current: list[str] = []
    i = 0
    while i < len(argstr):
        ch = argstr[i]
        if quote:
            current.append(ch)
            if ch == "\\" and i + 1 < len(argstr):
                current.append(argstr[i + 1])
                i += 2
                continue
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
            current.append(ch)
        elif ch == "(":
            depth += 1
            current.append(ch)
        elif ch == ")":
            depth -= 1
            current.append(ch)
        elif ch == "," and depth == 0:
            pieces.append("".join(current))
            current = []
        else:
            current.append(ch)
        i += 1
    if "".join(current).strip():
        pieces.append("".join(current))
    return [p.strip() for p in pieces if p.strip()]


def _unquote(text: str) -> str:
    quote = text[0]
    out: list[str] = []
    i = 1
    while i < len(text) - 1:
        ch = text[i]
        if ch == "\\" and i + 1 < len(text) - 1:
            nxt = text[i + 1]
            out.append(_ESCAPES.get(nxt, "\\" + nxt))
            i += 2
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def _convert_value(piece: str):
    if len(piece) >= 2 and piece[0] in "\"'" and piece[-1] == piece[0]:
        return _unquote(piece)
    lowered = piece.lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    try:
        return int(piece)
    except ValueError:
        pass
    try:
        return float(piece)
    except ValueError:
        pass
    return piece


_NAMED_ARG = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.+)$", re.DOTALL)


def _parse_args(argstr: str) -> tuple[list, dict]:
    args: list = []
    kwargs: dict = {}
    for piece in _split_args(argstr):
        named = None if piece[0] in "\"'" else _NAMED_ARG.match(piece)
        if named:
            kwargs[named.group(1)] = _convert_value(named.group(2).strip())
        else:
            args.append(_convert_value(piece))
    return args, kwargs


def parse_command(
    completion: str,
    registry: ToolRegistry,
    task_domain: str,
    mode: str = "hierarchical",
) -> ToolCommand | Rejection:
    """Extract the first command call from a hand completion.

    Hierarchical mode rejects commands owned by another domain (misrouted)
    and unknown names; flat mode returns any known command, tagged with its
    owning domain so the caller can count misroutes.
    """
    found = _find_command(completion)
    if found is None:
        return Rejection(
            kind="unparseable",
            command_name=None,
            observation=(
                "No command found. Respond with exactly one command call from the "
                "catalog, or DONE: <result> when finished."
            ),
            raw=completion.strip(),
        )
    name, argstr, start = found
    raw = completion[start : start + len(name) + len(argstr) + 2]
    owner = registry.owning_domain(name)
    if owner is None:
        allowed = ", ".join(sorted(registry.domain(task_domain).commands))
        return Rejection(
            kind="unknown",
            command_name=name,
            observation=f"Unknown command {name!r}. Available commands: {allowed}.",
            raw=raw,
        )
    if mode == "hierarchical" and owner != task_domain:
        allowed = ", ".join(sorted(registry.domain(task_domain).commands))
        return Rejection(
            kind="misrouted",
            command_name=name,
            observation=(
                f"Command {name!r} belongs to the '{owner}' domain and is not available "
                f"for this task. Use one of: {allowed}."
            ),
            raw=raw,
        )
    try:
        args, kwargs = _parse_args(argstr)
    except Exception as exc:
        return Rejection(
            kind="unparseable",
            command_name=name,
            observation=f"Could not parse arguments of {name}: {exc}",
            raw=raw,
        )
    return ToolCommand(name=name, args=args, kwargs=kwargs, raw=raw, domain=owner)


def _find_done(text: str) -> tuple[int, str] | None:
    match = DONE_LINE.search(text)
    if match is None:
        return None
    return match.start(), match.group(1).strip()


# --- the hand inner loop ---


def hand_execute(
    task: TaskSpec,
    registry: ToolRegistry,
    sandbox: Sandbox,
    backend,
    store: MemoryStore | None = None,
    task_record: MemoryRecord | None = None,
    domain: str | None = None,
    mode: str = "hierarchical",
    critiques: Sequence[str] = (),
    memory_retrieval: bool = True,
    max_actions: int = MAX_HAND_ACTIONS,
    pre_call: Callable[[Messages], None] | None = None,
    on_usage: Callable[[BackendResponse], None] | None = None,
) -> ExecutionReport:
    """Drive the hand agent until it reports DONE or hits the action ceiling.

    Each completion yields exactly one action/observation pair; parse-time
    rejections feed a corrective observation back to the agent. When a store
    is given, actions and observations are appended to it as they happen.
    """
    domain = domain or task.tool_domain or dispatch_task(task, registry)
    report = ExecutionReport()
    local_context: list[MemoryRecord] = []
    if task_record is None:
        task_record = MemoryRecord(
            kind=MemoryKind.TASK, content=task.to_prompt_text(), turn=task.turn, seq=-1
        )

    def _context() -> list[MemoryRecord]:
        if store is not None:
            if memory_retrieval:
                return store.retrieve(Phase.EXECUTION, task_record)
            return list(store.records)
        return [task_record] + local_context

    def _record(action_text: str, observation: str) -> None:
        if store is not None:
            store.append(MemoryRecord(kind=MemoryKind.ACTION, content=action_text))
            store.append(MemoryRecord(kind=MemoryKind.OBSERVATION, content=observation))
        else:
            local_context.append(MemoryRecord(kind=MemoryKind.ACTION, content=action_text, seq=-1))
            local_context.append(
                MemoryRecord(kind=MemoryKind.OBSERVATION, content=observation, seq=-1)
            )

    for _step in range(max_actions):
        messages = render_prompt(
            "hand",
            _context(),
            mode,
            registry,
            task_domain=domain,
            extra_notes=critiques,
        )
        if pre_call is not None:
            pre_call(messages)
        try:
            response = backend.complete(messages)
        except BackendFailure as exc:
            report.final_status = "failure"
            report.result = f"backend failure: {exc}"
            return report
        if on_usage is not None:
            on_usage(response)

        done = _find_done(response.text)
        parsed = parse_command(response.text, registry, domain, mode)
        located = _find_command(response.text)
        command_start = located[2] if located else None
        if done is not None and (command_start is None or done[0] < command_start):
            report.final_status = "success"
            report.result = done[1]
            return report

        if isinstance(parsed, ToolCommand):
            if parsed.domain != domain:
                report.misrouted_count += 1  # flat mode executes it anyway
            handler = registry.domain(parsed.domain if mode == "flat" else domain).handler
            try:
                observation = handler(parsed, sandbox)
            except (SpawnFailure, FileNotFoundError, ValueError) as exc:
                observation = f"tool error: {exc}"
            action = parsed
        else:
            if parsed.kind == "misrouted":
                report.misrouted_count += 1
            observation = parsed.observation
            action = ToolCommand(
                name=parsed.command_name or "<unparsed>", raw=parsed.raw or response.text.strip()
            )
        report.actions.append(action)
        report.observations.append(observation)
        _record(action.raw or action.name, observation)

    report.final_status = "failure"
    report.result = f"action ceiling of {max_actions} reached without DONE"
    return report
