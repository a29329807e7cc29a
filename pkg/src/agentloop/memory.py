"""Typed agent history: storage, response parsing, and phase-scoped retrieval.

Every model response and tool result becomes one MemoryRecord. Retrieval is a
pure kind-based filter: reasoning-side calls see analyses, tasks, and
summaries but never action/observation text, which is where the token savings
of the retrieval mode come from.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .accounting import count_tokens
from .errors import DuplicateSingleton, EmptyResponse, KindMismatch, MissingTask


class MemoryKind(str, Enum):
    USER_REQUEST = "user_request"
    MANDATORY_REQUIREMENT = "mandatory_requirement"
    ANALYSIS = "analysis"
    TASK = "task"
    ACTION = "action"
    OBSERVATION = "observation"
    EVALUATION = "evaluation"
    SUMMARY = "summary"


class Phase(str, Enum):
    REASONING = "reasoning"
    EXECUTION = "execution"


# Marker used on the first payload line of a structured model response.
MARKERS: dict[MemoryKind, str] = {
    MemoryKind.USER_REQUEST: "REQUEST",
    MemoryKind.MANDATORY_REQUIREMENT: "REQUIREMENT",
    MemoryKind.ANALYSIS: "ANALYSIS",
    MemoryKind.TASK: "TASK",
    MemoryKind.ACTION: "ACTION",
    MemoryKind.OBSERVATION: "OBSERVATION",
    MemoryKind.EVALUATION: "EVALUATION",
    MemoryKind.SUMMARY: "SUMMARY",
}
_MARKER_TO_KIND = {marker: kind for kind, marker in MARKERS.items()}
_MARKER_LINE = re.compile(r"^\s*([A-Z_]+):\s?(.*)$")

DEFAULT_PRODUCER: dict[MemoryKind, str] = {
    MemoryKind.USER_REQUEST: "user",
    MemoryKind.MANDATORY_REQUIREMENT: "brain",
    MemoryKind.ANALYSIS: "brain",
    MemoryKind.TASK: "brain",
    MemoryKind.ACTION: "hand",
    MemoryKind.OBSERVATION: "environment",
    MemoryKind.EVALUATION: "brain",
    MemoryKind.SUMMARY: "brain",
}

REASONING_KINDS = frozenset(
    {
        MemoryKind.USER_REQUEST,
        MemoryKind.MANDATORY_REQUIREMENT,
        MemoryKind.ANALYSIS,
        MemoryKind.SUMMARY,
        MemoryKind.TASK,
    }
)
EXECUTION_KINDS = frozenset({MemoryKind.ACTION, MemoryKind.OBSERVATION})
_SINGLETON_KINDS = (MemoryKind.USER_REQUEST, MemoryKind.MANDATORY_REQUIREMENT)


@dataclass
class MemoryRecord:
    """One unit of agent history. turn/seq/token_count are set on append."""

    kind: MemoryKind
    content: str
    producer: str = ""
    turn: int | None = None
    seq: int | None = None
    token_count: int | None = None

    def __post_init__(self) -> None:
        if not self.producer:
            self.producer = DEFAULT_PRODUCER[self.kind]

    def to_json_dict(self) -> dict:
        # Stable field order; the transcript schema depends on it.
        return {
            "kind": self.kind.value,
            "content": self.content,
            "turn": self.turn,
            "seq": self.seq,
            "producer": self.producer,
            "token_count": self.token_count,
        }


def parse_response(text: str, expected_kind: MemoryKind, producer: str = "") -> MemoryRecord:
    """Turn raw model output into an unappended record of the expected kind.

    If the response uses the block format ``MARKER: payload``, everything
    before the first marker line is dropped and the payload (marker line
    remainder plus following lines) becomes the content. A marker of a
    different kind raises KindMismatch. Without any marker the whole trimmed
    text is the content.
    """
    trimmed = text.strip()
    if not trimmed:
        raise EmptyResponse("response is empty after trimming")
    lines = trimmed.splitlines()
    for idx, line in enumerate(lines):
        match = _MARKER_LINE.match(line)
        if not match or match.group(1) not in _MARKER_TO_KIND:
            continue
        found = _MARKER_TO_KIND[match.group(1)]
        if found is not expected_kind:
            raise KindMismatch(
                f"response is marked {match.group(1)} but {MARKERS[expected_kind]} was expected"
            )
        payload = "\n".join([match.group(2)] + lines[idx + 1 :]).strip()
        if not payload:
            raise EmptyResponse(f"{match.group(1)} marker carries no content")
        return MemoryRecord(kind=expected_kind, content=payload, producer=producer)
    return MemoryRecord(kind=expected_kind, content=trimmed, producer=producer)


class MemoryStore:
    """Append-only ordered record store with a turn counter."""

    def __init__(self, tokenizer: Callable[[str], int] = count_tokens) -> None:
        self.records: list[MemoryRecord] = []
        self.current_turn = 0
        self._tokenizer = tokenizer
        self._seen_singletons: set[MemoryKind] = set()

    def append(self, record: MemoryRecord) -> MemoryRecord:
        """Assign seq/turn/token_count and store the record."""
        if record.kind in _SINGLETON_KINDS:
            if record.kind in self._seen_singletons:
                raise DuplicateSingleton(f"a {record.kind.value} record already exists")
            if (record.turn or 0) != 0 or self.current_turn != 0:
                raise ValueError(f"{record.kind.value} records belong to turn 0")
        if record.turn is None:
            record.turn = self.current_turn
        if self.records and record.turn < self.records[-1].turn:
            raise ValueError("turn must be non-decreasing along seq")
        record.seq = len(self.records)
        record.token_count = self._tokenizer(record.content)
        self.records.append(record)
        if record.kind in _SINGLETON_KINDS:
            self._seen_singletons.add(record.kind)
        return record

    def advance_turn(self) -> None:
        self.current_turn += 1

    def retrieve(
        self, phase: Phase, current_task: MemoryRecord | None = None
    ) -> list[MemoryRecord]:
        """Phase-scoped view of the history, in seq order.

        Reasoning: user request, mandatory requirement, analyses, summaries,
        and tasks. Execution: the current task followed by this turn's
        action/observation records after it.
        """
        if phase is Phase.REASONING:
            return [r for r in self.records if r.kind in REASONING_KINDS]
        if current_task is None:
            raise MissingTask("execution retrieval needs the current task record")
        tail = [
            r
            for r in self.records
            if r.kind in EXECUTION_KINDS
            and r.turn == current_task.turn
            and r.seq > (current_task.seq or 0)
        ]
        return [current_task] + tail

    def retrieve_for_evaluation(self, turn: int | None = None) -> list[MemoryRecord]:
        """Reasoning view plus the given turn's action/observation records."""
        turn = self.current_turn if turn is None else turn
        return [
            r
            for r in self.records
            if r.kind in REASONING_KINDS or (r.kind in EXECUTION_KINDS and r.turn == turn)
        ]

    def records_for_turn(self, turn: int) -> list[MemoryRecord]:
        return [r for r in self.records if r.turn == turn]


# --- transcript JSONL ---


def transcript_lines(records: Iterable[MemoryRecord]) -> list[str]:
    return [json.dumps(r.to_json_dict(), ensure_ascii=False) for r in records]


def export_transcript(store_or_records, path: str | Path) -> Path:
    """Write one JSON object per record per line, UTF-8."""
    records = getattr(store_or_records, "records", store_or_records)
    path = Path(path)
    body = "\n".join(transcript_lines(records))
    path.write_text(body + ("\n" if body else ""), encoding="utf-8")
    return path


def load_transcript(path: str | Path) -> list[MemoryRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        records.append(
            MemoryRecord(
                kind=MemoryKind(data["kind"]),
                content=data["content"],
                producer=data["producer"],
                turn=data["turn"],
                seq=data["seq"],
                token_count=data["token_count"],
            )
        )
    return records


_TURN_SYMBOLS = {
    MemoryKind.USER_REQUEST: "u",
    MemoryKind.MANDATORY_REQUIREMENT: "r",
    MemoryKind.ANALYSIS: "a",
    MemoryKind.TASK: "t",
    MemoryKind.ACTION: "x",
    MemoryKind.OBSERVATION: "o",
    MemoryKind.EVALUATION: "e",
    MemoryKind.SUMMARY: "s",
}
# Within a turn: analyses, one task, action/observation pairs interleaved with
# one evaluation per execution attempt, one summary.
_TURN_GRAMMAR = re.compile(r"^a*t(?:(?:xo)*e)+s$")


def lint_phase_order(records: Sequence[MemoryRecord]) -> list[str]:
    """Check the per-turn record-kind grammar; return a list of problems."""
    problems: list[str] = []
    for i, record in enumerate(records):
        if record.seq != i:
            problems.append(f"record {i}: seq {record.seq} not dense")
    for prev, cur in zip(records, records[1:]):
        if (cur.turn or 0) < (prev.turn or 0):
            problems.append(f"record {cur.seq}: turn decreases")
    for kind in _SINGLETON_KINDS:
        matching = [r for r in records if r.kind is kind]
        if len(matching) > 1:
            problems.append(f"multiple {kind.value} records")
        for r in matching:
            if r.turn != 0:
                problems.append(f"{kind.value} outside turn 0")

    turns: dict[int, list[MemoryRecord]] = {}
    for r in records:
        turns.setdefault(r.turn or 0, []).append(r)
    for turn in sorted(turns):
        symbols = "".join(_TURN_SYMBOLS[r.kind] for r in turns[turn])
        if turn == 0:
            # the two singletons lead the first turn, possibly with no turn body yet
            symbols = re.sub(r"^ur", "", symbols)
            if not symbols:
                continue
        if not _TURN_GRAMMAR.match(symbols):
            problems.append(f"turn {turn}: kind sequence '{symbols}' breaks phase order")
    return problems


def lint_transcript(path: str | Path) -> list[str]:
    return lint_phase_order(load_transcript(path))
