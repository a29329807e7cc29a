"""Sandboxed execution tools: anchored file edits, command running, tracing,
and git-patch change tracking.

The editing commands verify claimed line numbers against anchor strings
before touching a file. On a mismatch nothing is written and the outcome
carries every line where the failing anchor actually occurs, so a correcting
agent (or the deterministic snap callback below) can fix the request.
"""

from __future__ import annotations

import json
import os
import shlex
import signal
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .errors import (
    DriverUnavailable,
    LineOutOfRange,
    NotARepository,
    PatchApplyFailure,
    RoundLimitExceeded,
    SpawnFailure,
)

TIMEOUT_EXIT = -1  # sentinel exit status for timed-out commands
DEFAULT_OUTPUT_LIMIT = 64 * 1024

_ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "PYTHONPATH", "TMPDIR", "TERM", "USER")


@dataclass(frozen=True)
class EditRequest:
    file: str
    start_line: int
    end_line: int
    start_line_string: str
    end_line_string: str
    new_content: str

    def __post_init__(self) -> None:
        if self.start_line > self.end_line:
            raise ValueError("start_line must be <= end_line")
        if not self.start_line_string or not self.end_line_string:
            raise ValueError("anchor strings must be non-empty")


@dataclass(frozen=True)
class EditHint:
    anchor: str  # "start" | "end" | "signature"
    given_line: int
    candidate_lines: list[int]

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "given_line": self.given_line,
            "candidate_lines": list(self.candidate_lines),
        }


@dataclass(frozen=True)
class EditOutcome:
    status: str  # "applied" | "mismatch"
    hint: EditHint | None = None
    rounds_used: int = 1

    @property
    def applied(self) -> bool:
        return self.status == "applied"


@dataclass(frozen=True)
class GitPatch:
    text: str
    base_revision: str

    @property
    def empty(self) -> bool:
        return not self.text.strip()


@dataclass(frozen=True)
class TraceCall:
    function: str
    file: str
    line: int


@dataclass(frozen=True)
class TraceReport:
    calls: list[TraceCall]
    exit_status: int
    output: str = ""


@dataclass(frozen=True)
class CommandResult:
    output: str
    exit_status: int
    timed_out: bool = False


def _anchor_matches(line: str, anchor: str) -> bool:
    # substring comparison with both sides whitespace-stripped
    return anchor.strip() in line.strip()


def resolve_under(workdir: str | Path, relative: str | Path) -> Path:
    """Resolve a path inside workdir, rejecting escapes."""
    workdir = Path(workdir).resolve()
    path = (workdir / relative).resolve()
    if path != workdir and workdir not in path.parents:
        raise SpawnFailure(f"path {relative!r} escapes the sandbox")
    return path


def _read_lines(path: Path) -> tuple[list[str], bool]:
    text = path.read_text(encoding="utf-8")
    return text.splitlines(), text.endswith("\n")


def _write_lines(path: Path, lines: list[str], trailing_newline: bool) -> None:
    body = "\n".join(lines)
    if trailing_newline and body:
        body += "\n"
    path.write_text(body, encoding="utf-8")


def locate_anchor(file: str | Path, anchor: str, workdir: str | Path | None = None) -> list[int]:
    """All 1-based line numbers whose stripped text contains the anchor."""
    path = resolve_under(workdir, file) if workdir is not None else Path(file)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    lines, _ = _read_lines(path)
    return [i + 1 for i, line in enumerate(lines) if _anchor_matches(line, anchor)]


def edit_file(req: EditRequest, workdir: str | Path) -> EditOutcome:
    """Replace lines [start_line, end_line] if both anchors verify.

    On mismatch the file is untouched and the hint lists, for the failing
    anchor, every line where it actually occurs.
    """
    path = resolve_under(workdir, req.file)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    lines, trailing = _read_lines(path)
    if req.start_line < 1 or req.end_line > len(lines):
        raise LineOutOfRange(
            f"lines {req.start_line}-{req.end_line} outside file of {len(lines)} lines"
        )

    checks = (
        ("start", req.start_line, req.start_line_string),
        ("end", req.end_line, req.end_line_string),
    )
    for which, lineno, anchor in checks:
        if not _anchor_matches(lines[lineno - 1], anchor):
            hint = EditHint(
                anchor=which,
                given_line=lineno,
                candidate_lines=locate_anchor(path, anchor),
            )
            return EditOutcome(status="mismatch", hint=hint)

    new_lines = req.new_content.splitlines()
    lines[req.start_line - 1 : req.end_line] = new_lines
    _write_lines(path, lines, trailing)
    return EditOutcome(status="applied")


def corrected_edit_loop(
    initial: EditRequest,
    agent: Callable[[EditRequest, EditHint], EditRequest],
    limit: int,
    workdir: str | Path,
) -> tuple[EditOutcome, int]:
    """Apply an edit, feeding mismatch hints back to the agent until it lands.

    Returns the applied outcome and the number of rounds used; raises
    RoundLimitExceeded (carrying the final hint) when the limit runs out.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    req = initial
    hint: EditHint | None = None
    for round_no in range(1, limit + 1):
        outcome = edit_file(req, workdir)
        if outcome.applied:
            return EditOutcome(status="applied", rounds_used=round_no), round_no
        hint = outcome.hint
        if round_no < limit:
            req = agent(req, hint)
    raise RoundLimitExceeded(f"edit did not apply within {limit} rounds", hint=hint)


def snap_to_sole_candidate(workdir: str | Path) -> Callable[[EditRequest, EditHint], EditRequest]:
    """Deterministic correction agent: re-derive both line numbers by locating
    each anchor in the file; snap whenever an anchor occurs exactly once."""

    def agent(req: EditRequest, hint: EditHint) -> EditRequest:
        start_candidates = locate_anchor(req.file, req.start_line_string, workdir=workdir)
        end_candidates = locate_anchor(req.file, req.end_line_string, workdir=workdir)
        start = start_candidates[0] if len(start_candidates) == 1 else req.start_line
        end = end_candidates[0] if len(end_candidates) == 1 else req.end_line
        if start > end:
            return req
        return EditRequest(
            file=req.file,
            start_line=start,
            end_line=end,
            start_line_string=req.start_line_string,
            end_line_string=req.end_line_string,
            new_content=req.new_content,
        )

    return agent


def replace_function(
    file: str | Path, signature: str, new_code: str, workdir: str | Path
) -> EditOutcome:
    """Replace a function body located by its definition-line signature.

    The span runs from the definition line through the last line indented
    deeper than it (blank lines inside the block included). Zero or multiple
    signature matches produce a mismatch whose candidates list every
    definition line found.
    """
    path = resolve_under(workdir, file)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    lines, trailing = _read_lines(path)
    wanted = signature.strip()
    candidates = [i + 1 for i, line in enumerate(lines) if line.strip().startswith(wanted)]
    if len(candidates) != 1:
        hint = EditHint(anchor="signature", given_line=0, candidate_lines=candidates)
        return EditOutcome(status="mismatch", hint=hint)

    def_idx = candidates[0] - 1
    def_indent = len(lines[def_idx]) - len(lines[def_idx].lstrip())
    last_idx = def_idx
    for i in range(def_idx + 1, len(lines)):
        if not lines[i].strip():
            continue
        indent = len(lines[i]) - len(lines[i].lstrip())
        if indent <= def_indent:
            break
        last_idx = i
    lines[def_idx : last_idx + 1] = new_code.splitlines()
    _write_lines(path, lines, trailing)
    return EditOutcome(status="applied")


@dataclass
class Sandbox:
    """Subprocess sandbox rooted at a workdir: scrubbed env, timeout with
    process-tree kill, byte-capped output, and a relative-escape path policy."""

    workdir: Path
    timeout: float = 120.0
    output_limit: int = DEFAULT_OUTPUT_LIMIT
    trace_enabled: bool = False
    env_allowlist: tuple[str, ...] = _ENV_ALLOWLIST
    extra_env: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.workdir = Path(self.workdir).resolve()

    def scrubbed_env(self) -> dict[str, str]:
        env = {k: v for k, v in os.environ.items() if k in self.env_allowlist}
        # bytecode caches would pollute patches and break transcript determinism
        env["PYTHONDONTWRITEBYTECODE"] = "1"
        env.update(self.extra_env)
        return env

    def check_path_policy(self, cmd: str) -> None:
        """Reject commands whose relative path tokens climb out of the workdir."""
        try:
            tokens = shlex.split(cmd)
        except ValueError:
            tokens = cmd.split()
        for token in tokens:
            if token.startswith("/"):
                continue
            if token == ".." or token.startswith("../") or "/../" in token:
                raise SpawnFailure(f"path policy rejects parent escape in {token!r}")

    def resolve(self, relative: str | Path) -> Path:
        return resolve_under(self.workdir, relative)


def _truncate(data: bytes, limit: int) -> str:
    if len(data) <= limit:
        return data.decode("utf-8", errors="replace")
    head = data[:limit].decode("utf-8", errors="replace")
    return head + f"\n[output truncated at {limit} bytes]"


def run_command(
    cmd: str, sandbox: Sandbox, timeout: float | None = None, argv: list[str] | None = None
) -> CommandResult:
    """Run a shell command inside the sandbox.

    Captures interleaved stdout/stderr up to the byte ceiling; on timeout the
    whole process group is killed and the exit status is the timeout sentinel.
    """
    if argv is None:
        if not cmd.strip():
            raise SpawnFailure("empty command")
        sandbox.check_path_policy(cmd)
    timeout = sandbox.timeout if timeout is None else timeout
    try:
        proc = subprocess.Popen(
            argv if argv is not None else cmd,
            shell=argv is None,
            cwd=sandbox.workdir,
            env=sandbox.scrubbed_env(),
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
    except OSError as exc:
        raise SpawnFailure(f"could not spawn command: {exc}") from exc
    try:
        out, _ = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, _ = proc.communicate()
        text = _truncate(out or b"", sandbox.output_limit)
        return CommandResult(
            output=text + f"\n[timed out after {timeout:g}s]",
            exit_status=TIMEOUT_EXIT,
            timed_out=True,
        )
    return CommandResult(output=_truncate(out or b"", sandbox.output_limit), exit_status=proc.returncode)


_TRACE_DRIVER = '''\
import json, os, runpy, sys

prefix = os.path.abspath(sys.argv[1])
out_path = sys.argv[2]
script = os.path.abspath(sys.argv[3])
sys.argv = [sys.argv[3]] + sys.argv[4:]
calls = []

def _tracer(frame, event, arg):
    if event == "call":
        name = frame.f_code.co_name
        raw = frame.f_code.co_filename
        if not name.startswith("<") and not raw.startswith("<"):
            filename = os.path.abspath(raw)
            if filename.startswith(prefix):
                calls.append({"function": name, "file": filename, "line": frame.f_lineno})
    return None

status = 0
sys.settrace(_tracer)
try:
    runpy.run_path(script, run_name="__main__")
except SystemExit as exc:
    status = exc.code if isinstance(exc.code, int) else (0 if exc.code is None else 1)
except BaseException:
    import traceback
    traceback.print_exc()
    status = 1
finally:
    sys.settrace(None)
    with open(out_path, "w") as fh:
        json.dump(calls, fh)
sys.exit(status)
'''


def _parse_traceable(cmd: str) -> list[str]:
    try:
        tokens = shlex.split(cmd)
    except ValueError as exc:
        raise DriverUnavailable(f"cannot tokenize command: {exc}") from exc
    if len(tokens) >= 2 and Path(tokens[0]).name.startswith("python") and tokens[1].endswith(".py"):
        return tokens
    raise DriverUnavailable(f"no tracing driver for {cmd!r}")


def run_traced(cmd: str, sandbox: Sandbox, timeout: float | None = None) -> TraceReport:
    """Run a script under the call tracer.

    Records user-code function calls in call order (frames outside the workdir
    are filtered out) and produces a report whether or not the program exits
    cleanly. Raises DriverUnavailable for commands the tracer cannot wrap.
    """
    tokens = _parse_traceable(cmd)
    sandbox.check_path_policy(cmd)
    with tempfile.TemporaryDirectory(prefix="trace-") as tmp:
        driver = Path(tmp) / "driver.py"
        driver.write_text(_TRACE_DRIVER, encoding="utf-8")
        out_json = Path(tmp) / "calls.json"
        argv = [tokens[0], str(driver), str(sandbox.workdir), str(out_json)] + tokens[1:]
        result = run_command(cmd, sandbox, timeout=timeout, argv=argv)
        calls: list[TraceCall] = []
        if out_json.is_file():
            for item in json.loads(out_json.read_text(encoding="utf-8")):
                calls.append(TraceCall(item["function"], item["file"], item["line"]))
    return TraceReport(calls=calls, exit_status=result.exit_status, output=result.output)


# --- git patch tracking ---


def _git(workdir: str | Path, *args: str, input_text: str | None = None) -> subprocess.CompletedProcess:
    return subprocess.run(
        ["git", "-C", str(workdir), *args],
        capture_output=True,
        text=True,
        input=input_text,
    )


def head_revision(workdir: str | Path) -> str:
    proc = _git(workdir, "rev-parse", "HEAD")
    if proc.returncode != 0:
        raise NotARepository(f"{workdir} has no git HEAD: {proc.stderr.strip()}")
    return proc.stdout.strip()


_REPO_EXCLUDES = "__pycache__/\n*.pyc\n"


def ensure_repo(workdir: str | Path) -> str:
    """Make workdir a git repo with a committed base state; return base revision."""
    workdir = Path(workdir)
    if _git(workdir, "rev-parse", "--git-dir").returncode != 0:
        proc = _git(workdir, "init", "-q")
        if proc.returncode != 0:
            raise NotARepository(f"git init failed: {proc.stderr.strip()}")
    exclude = workdir / ".git" / "info" / "exclude"
    if exclude.parent.is_dir() and _REPO_EXCLUDES not in (
        exclude.read_text(encoding="utf-8") if exclude.is_file() else ""
    ):
        with exclude.open("a", encoding="utf-8") as fh:
            fh.write(_REPO_EXCLUDES)
    if _git(workdir, "rev-parse", "HEAD").returncode != 0:
        _git(workdir, "add", "-A")
        proc = _git(
            workdir,
            "-c", "user.name=agentloop",
            "-c", "user.email=agentloop@localhost",
            "commit", "-q", "--allow-empty", "-m", "base",
        )
        if proc.returncode != 0:
            raise NotARepository(f"base commit failed: {proc.stderr.strip()}")
    return head_revision(workdir)


def snapshot_patch(workdir: str | Path, base_revision: str | None = None) -> GitPatch:
    """Unified diff of the worktree against the base revision, new files included."""
    base = base_revision or head_revision(workdir)
    # intent-to-add makes untracked files visible to diff; reset drops it again
    _git(workdir, "add", "-A", "-N")
    proc = _git(workdir, "diff", "--no-color", base)
    _git(workdir, "reset", "-q")
    if proc.returncode not in (0, 1):
        raise NotARepository(f"git diff failed: {proc.stderr.strip()}")
    return GitPatch(text=proc.stdout, base_revision=base)


def apply_patch(patch: GitPatch, workdir: str | Path) -> None:
    """Apply a snapshot patch to a clean checkout of its base revision."""
    if _git(workdir, "rev-parse", "--git-dir").returncode != 0:
        raise NotARepository(f"{workdir} is not a git repository")
    if patch.empty:
        return
    proc = _git(workdir, "apply", "--whitespace=nowarn", input_text=patch.text)
    if proc.returncode != 0:
        raise PatchApplyFailure(proc.stderr.strip() or "git apply failed")
