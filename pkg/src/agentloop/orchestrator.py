"""The autonomous turn loop: analyze, schedule a task, delegate execution,
evaluate with bounded retries, summarize with a git patch, and check whether
the mandatory requirement is satisfied — under iteration and cost caps.

Component failures inside a turn never kill the run; they are recorded as
observation notes and the loop moves on, so termination is guaranteed by the
iteration cap alone.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .accounting import UsageLedger, count_tokens, call_cost
from .agents import (
    ExecutionReport,
    TaskSpec,
    ToolRegistry,
    classify_tool_domain,
    default_registry,
    dispatch_task,
    hand_execute,
    render_prompt,
)
from .backends import Messages
from .errors import (
    AgentLoopError,
    BackendFailure,
    BudgetExceeded,
    EmptyRequest,
    FixtureMismatch,
    TaskFormatError,
)
from .memory import MemoryKind, MemoryRecord, MemoryStore, Phase, parse_response
from .toolkit import GitPatch, Sandbox, ensure_repo, snapshot_patch

logger = logging.getLogger(__name__)


class RunStatus(str, Enum):
    SOLVED = "solved"
    BUDGET_EXHAUSTED = "budget-exhausted"
    ITERATION_CAP = "iteration-cap"


EXIT_CODES = {
    RunStatus.SOLVED: 0,
    RunStatus.ITERATION_CAP: 2,
    RunStatus.BUDGET_EXHAUSTED: 3,
}


@dataclass
class RunConfig:
    """Loop limits and mode switches. Defaults mirror the reference setup:
    100 iterations, 3 self-corrections, 120 s sandbox timeout, $10 cap."""

    max_iterations: int = 100
    self_correction_limit: int = 3
    sandbox_timeout: float = 120.0
    max_cost: float = 10.0
    voting_rounds: int = 1
    dispatch_mode: str = "hierarchical"  # "hierarchical" | "flat"
    memory_retrieval: bool = True
    brain_backend: str = "mock"
    hand_backend: str = "mock"
    brain_model: str = "mock-brain"
    hand_model: str = "mock-hand"
    budget_per_iteration: bool = False
    max_analyses_per_turn: int = 10
    output_limit: int = 64 * 1024

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.max_cost <= 0:
            raise ValueError("max_cost must be positive")
        if self.voting_rounds < 1:
            raise ValueError("voting_rounds must be >= 1")
        if self.self_correction_limit < 0:
            raise ValueError("self_correction_limit must be >= 0")
        if self.dispatch_mode not in ("hierarchical", "flat"):
            raise ValueError(f"unknown dispatch_mode {self.dispatch_mode!r}")


@dataclass
class RunOutcome:
    status: RunStatus
    turns_used: int
    final_patch: GitPatch
    cost: float
    store: MemoryStore
    ledger: UsageLedger
    transcript_path: Path | None = None

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]


_NEXT_DIRECTIVE = re.compile(r"^\s*NEXT:\s*(task|analysis)\s*$", re.IGNORECASE | re.MULTILINE)
_TASK_SECTION = re.compile(
    r"OBJECTIVE:\s*(?P<objective>.*?)\s*STEPS:\s*(?P<steps>.*?)\s*EXPECTED:\s*(?P<expected>.*?)\s*(?:DOMAIN:\s*(?P<domain>\S+)\s*)?$",
    re.DOTALL,
)

_TASK_FORMAT_REMINDER = (
    "Respond with a TASK block:\n"
    "TASK:\nOBJECTIVE: <goal>\nSTEPS:\n- <step>\nEXPECTED: <expected outcome>\n"
    "DOMAIN: <tool domain> (optional)"
)


def _normalize_vote(text: str) -> str:
    return " ".join(text.split()).lower()


def parse_task_text(payload: str) -> dict | None:
    """Parse OBJECTIVE/STEPS/EXPECTED(/DOMAIN) sections; None if malformed."""
    match = _TASK_SECTION.search(payload)
    if not match:
        return None
    objective = match.group("objective").strip()
    expected = match.group("expected").strip()
    steps = [
        line.strip().lstrip("-").strip()
        for line in match.group("steps").splitlines()
        if line.strip()
    ]
    if not objective or not expected or not steps:
        return None
    return {
        "objective": objective,
        "steps": steps,
        "expected_outcome": expected,
        "tool_domain": (match.group("domain") or "").strip(),
    }


def evaluation_verdict(content: str) -> bool:
    """pass/fail from an evaluation payload; anything malformed counts as fail."""
    first = content.strip().split(None, 1)
    if not first:
        return False
    return first[0].strip(" -:.").lower() == "pass"


class Orchestrator:
    """One run over one workdir: owns the store, ledger, and sandbox."""

    def __init__(
        self,
        config: RunConfig,
        brain,
        hand,
        registry: ToolRegistry | None = None,
        workdir: str | Path = ".",
        pricing: dict | None = None,
    ) -> None:
        self.config = config
        self.brain = brain
        self.hand = hand
        self.registry = registry or default_registry()
        self.workdir = Path(workdir)
        self.pricing = dict(pricing or {})
        self.pricing.setdefault(config.brain_model, (0.0, 0.0))
        self.pricing.setdefault(config.hand_model, (0.0, 0.0))
        self.store = MemoryStore()
        self.ledger = UsageLedger()
        self.sandbox = Sandbox(
            workdir=self.workdir,
            timeout=config.sandbox_timeout,
            output_limit=config.output_limit,
        )
        self.base_revision = ensure_repo(self.workdir)
        self.requirement = ""
        self._turn_cost_mark = 0.0
        self._solved = False

    # --- budget ---

    def _budget_base(self) -> float:
        if self.config.budget_per_iteration:
            return self.ledger.total_cost - self._turn_cost_mark
        return self.ledger.total_cost

    def _guard_call(self, messages: Messages, model: str) -> None:
        """Refuse a call whose prompt cost alone would cross the cap."""
        prompt_tokens = count_tokens("\n".join(content for _r, content in messages))
        projected = call_cost(prompt_tokens, 0, model, self.pricing)
        if self._budget_base() + projected > self.config.max_cost:
            raise BudgetExceeded(
                f"projected cost {projected:.4f} would cross the {self.config.max_cost:.2f} cap"
            )

    def _charge(self, role: str, response) -> None:
        model = self.config.brain_model if role == "brain" else self.config.hand_model
        self.ledger.charge(role, response.prompt_tokens, response.completion_tokens, model, self.pricing)
        if self._budget_base() > self.config.max_cost:
            # overshoot is bounded by the single call that crossed the cap
            raise BudgetExceeded(
                f"cost {self.ledger.total_cost:.4f} exceeded the {self.config.max_cost:.2f} cap"
            )

    def _brain_call(self, context: list[MemoryRecord], instruction: str) -> str:
        messages = render_prompt(
            "brain",
            context,
            self.config.dispatch_mode,
            self.registry,
            mandatory_requirement=self.requirement or None,
            instruction=instruction,
        )
        self._guard_call(messages, self.config.brain_model)
        response = self.brain.complete(messages)
        self._charge("brain", response)
        return response.text

    def _reasoning_context(self) -> list[MemoryRecord]:
        if self.config.memory_retrieval:
            return self.store.retrieve(Phase.REASONING)
        return list(self.store.records)

    def _evaluation_context(self) -> list[MemoryRecord]:
        if self.config.memory_retrieval:
            return self.store.retrieve_for_evaluation(self.store.current_turn)
        return list(self.store.records)

    # --- loop operations ---

    def extract_mandatory_requirement(self, request: str) -> MemoryRecord:
        """Distill the one constraint every later step must satisfy."""
        if not request.strip():
            raise EmptyRequest("user request is empty")
        text = self._brain_call(
            self._reasoning_context(),
            "State the single mandatory requirement this request must satisfy, "
            "as 'REQUIREMENT: <requirement>'.",
        )
        record = parse_response(text, MemoryKind.MANDATORY_REQUIREMENT)
        self.store.append(record)
        self.requirement = record.content
        return record

    def reason_step(self) -> tuple[MemoryRecord, str | None]:
        """One chain-of-thought step; returns the record and any NEXT directive."""
        text = self._brain_call(
            self._reasoning_context(),
            "Return exactly one step of analysis as 'ANALYSIS: <one step>'. "
            "Add a line 'NEXT: task' when ready to schedule a task.",
        )
        directive_match = _NEXT_DIRECTIVE.search(text)
        directive = directive_match.group(1).lower() if directive_match else None
        cleaned = _NEXT_DIRECTIVE.sub("", text).strip()
        record = self.store.append(parse_response(cleaned, MemoryKind.ANALYSIS))
        return record, directive

    def reason_with_voting(self) -> tuple[MemoryRecord, str | None]:
        """Sample voting_rounds completions; majority wins, ties to the lowest index."""
        context = self._reasoning_context()
        instruction = (
            "Return exactly one step of analysis as 'ANALYSIS: <one step>'. "
            "Add a line 'NEXT: task' when ready to schedule a task."
        )
        samples: list[str] = []
        failures = 0
        for _ in range(self.config.voting_rounds):
            try:
                samples.append(self._brain_call(context, instruction))
            except BackendFailure:
                failures += 1
        if not samples:
            raise BackendFailure(f"all {failures} voting samples failed")
        tallies: dict[str, int] = {}
        first_seen: dict[str, int] = {}
        for idx, sample in enumerate(samples):
            key = _normalize_vote(sample)
            tallies[key] = tallies.get(key, 0) + 1
            first_seen.setdefault(key, idx)
        winner_key = max(tallies, key=lambda key: (tallies[key], -first_seen[key]))
        winner = samples[first_seen[winner_key]]
        directive_match = _NEXT_DIRECTIVE.search(winner)
        directive = directive_match.group(1).lower() if directive_match else None
        cleaned = _NEXT_DIRECTIVE.sub("", winner).strip()
        record = parse_response(cleaned, MemoryKind.ANALYSIS)
        record.content += f"\n[vote {tallies[winner_key]}/{len(samples)}]"
        self.store.append(record)
        return record, directive

    def formulate_task(self) -> tuple[TaskSpec, MemoryRecord]:
        """Ask the brain for a task block; reprompt on format failures."""
        attempts = 1 + self.config.self_correction_limit
        instruction = _TASK_FORMAT_REMINDER
        for attempt in range(attempts):
            text = self._brain_call(self._reasoning_context(), instruction)
            record = parse_response(text, MemoryKind.TASK)
            parsed = parse_task_text(record.content)
            if parsed is not None:
                task = TaskSpec(turn=self.store.current_turn, **parsed)
                task_record = self.store.append(record)
                return task, task_record
            instruction = (
                "The previous task was malformed (objective, steps, and expected "
                "outcome are all required). " + _TASK_FORMAT_REMINDER
            )
        raise TaskFormatError(f"task block still malformed after {attempts} attempts")

    def evaluate_result(self, task: TaskSpec, report: ExecutionReport) -> MemoryRecord:
        """Compare the execution report with the expected outcome; default fail."""
        instruction = (
            f"The execution agent finished with status '{report.final_status}' and "
            f"result '{report.result}'. Compare the observations with the expected "
            f"outcome ({task.expected_outcome}) and answer "
            "'EVALUATION: pass - <why>' or 'EVALUATION: fail - <critique>'."
        )
        text = self._brain_call(self._evaluation_context(), instruction)
        try:
            record = parse_response(text, MemoryKind.EVALUATION)
        except Exception:
            record = MemoryRecord(kind=MemoryKind.EVALUATION, content="fail - unreadable verdict")
        return self.store.append(record)

    def summarize_turn(self) -> MemoryRecord:
        """Compress the turn and append the turn's git patch verbatim."""
        text = self._brain_call(
            self._reasoning_context(),
            "Summarize this turn's outcome and key conclusions as 'SUMMARY: <text>'.",
        )
        record = parse_response(text, MemoryKind.SUMMARY)
        patch = snapshot_patch(self.workdir, self.base_revision)
        record.content += "\n\n[git patch]\n" + patch.text
        appended = self.store.append(record)
        self.store.advance_turn()
        return appended

    def check_stop(self) -> bool:
        """True iff the brain confirms the mandatory requirement is satisfied."""
        text = self._brain_call(
            self._reasoning_context(),
            "Is the mandatory requirement satisfied by the work so far? "
            "Answer 'SATISFIED' or 'NOT YET'.",
        )
        first_line = text.strip().splitlines()[0].strip() if text.strip() else ""
        first_line = first_line.removeprefix("STOP:").strip()
        return first_line.upper() == "SATISFIED"

    # --- the loop ---

    def _run_turn(self) -> None:
        config = self.config
        directive = None
        for _ in range(config.max_analyses_per_turn):
            if config.voting_rounds >= 2:
                _, directive = self.reason_with_voting()
            else:
                _, directive = self.reason_step()
            if directive == "task":
                break

        task, task_record = self.formulate_task()
        domain = dispatch_task(task, self.registry)
        if not task.tool_domain and classify_tool_domain(task.to_prompt_text(), self.registry) is None:
            logger.warning("turn %d: task dispatch defaulted to 'code'", self.store.current_turn)
        task.tool_domain = domain

        # the limit caps total execution attempts for the task (always >= 1)
        max_attempts = max(1, config.self_correction_limit)
        critiques: list[str] = []
        for attempt in range(1, max_attempts + 1):
            report = hand_execute(
                task,
                self.registry,
                self.sandbox,
                self.hand,
                store=self.store,
                task_record=task_record,
                domain=domain,
                mode=config.dispatch_mode,
                critiques=critiques,
                memory_retrieval=config.memory_retrieval,
                pre_call=lambda messages: self._guard_call(messages, config.hand_model),
                on_usage=lambda response: self._charge("hand", response),
            )
            evaluation = self.evaluate_result(task, report)
            if evaluation_verdict(evaluation.content) or attempt == max_attempts:
                break
            critiques.append(evaluation.content)

        self.summarize_turn()
        self._solved = self.check_stop()

    def run(self, request: str) -> RunOutcome:
        """Execute the full loop for a single request."""
        if not request.strip():
            raise EmptyRequest("user request is empty")
        self.store.append(
            MemoryRecord(kind=MemoryKind.USER_REQUEST, content=request.strip(), producer="user")
        )
        status: RunStatus | None = None
        turns = 0
        try:
            self.extract_mandatory_requirement(request)
            while turns < self.config.max_iterations:
                turns += 1
                self._turn_cost_mark = self.ledger.total_cost
                try:
                    self._run_turn()
                except (BudgetExceeded, FixtureMismatch):
                    # budget ends the run; a fixture mismatch is a broken test script
                    raise
                except AgentLoopError as exc:
                    # resilience: the failure becomes a note and ends the turn
                    logger.warning("turn %d aborted: %s", self.store.current_turn, exc)
                    self.store.append(
                        MemoryRecord(
                            kind=MemoryKind.OBSERVATION,
                            content=f"turn aborted: {exc}",
                            producer="environment",
                        )
                    )
                    self.store.advance_turn()
                    continue
                if self._solved:
                    status = RunStatus.SOLVED
                    break
            if status is None:
                status = RunStatus.ITERATION_CAP
        except BudgetExceeded:
            status = RunStatus.BUDGET_EXHAUSTED
        final_patch = snapshot_patch(self.workdir, self.base_revision)
        return RunOutcome(
            status=status,
            turns_used=turns,
            final_patch=final_patch,
            cost=self.ledger.total_cost,
            store=self.store,
            ledger=self.ledger,
        )


def run_loop(
    request: str,
    config: RunConfig,
    brain,
    hand,
    registry: ToolRegistry | None = None,
    workdir: str | Path = ".",
    pricing: dict | None = None,
) -> RunOutcome:
    """Convenience wrapper: build an orchestrator and run one request."""
    orch = Orchestrator(config, brain, hand, registry=registry, workdir=workdir, pricing=pricing)
    return orch.run(request)
