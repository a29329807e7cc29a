"""Shared fixture helpers: scripted-run builders and the add.py workdir."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

TEST_ADD_PY = "from add import add\n\nassert add(2, 3) == 5\nprint(\"ok\")\n"


def brain_entry(completion: str, expect: str | None = None) -> dict:
    entry = {"role": "brain", "completion": completion}
    if expect is not None:
        entry["expect_substring"] = expect
    return entry


def hand_entry(completion: str, expect: str | None = None) -> dict:
    entry = {"role": "hand", "completion": completion}
    if expect is not None:
        entry["expect_substring"] = expect
    return entry


def build_turn(
    analyses: list[str],
    task_body: str,
    attempts: list[tuple[list[str], str]],
    summary: str,
    stop: str,
) -> list[dict]:
    """Script entries for one full turn.

    attempts: per execution attempt, the hand completions and the evaluation
    verdict line ('pass - ...' or 'fail - ...').
    """
    entries: list[dict] = []
    for i, analysis in enumerate(analyses):
        marker = "\nNEXT: task" if i == len(analyses) - 1 else ""
        entries.append(brain_entry(f"ANALYSIS: {analysis}{marker}"))
    entries.append(brain_entry("TASK:\n" + task_body))
    for hand_completions, verdict in attempts:
        entries.extend(hand_entry(c) for c in hand_completions)
        entries.append(brain_entry(f"EVALUATION: {verdict}"))
    entries.append(brain_entry(f"SUMMARY: {summary}"))
    entries.append(brain_entry(stop))
    return entries


def simple_task_body(objective: str, step: str, expected: str, domain: str = "code") -> str:
    return f"OBJECTIVE: {objective}\nSTEPS:\n- {step}\nEXPECTED: {expected}\nDOMAIN: {domain}"


def write_script(path: Path, entries: list[dict]) -> Path:
    path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def add_workdir(tmp_path: Path) -> Path:
    """A work directory seeded with the unit test the run must satisfy."""
    workdir = tmp_path / "workdir"
    workdir.mkdir()
    (workdir / "test_add.py").write_text(TEST_ADD_PY, encoding="utf-8")
    return workdir


def trivial_run_entries(stop: str = "SATISFIED", verdict: str = "pass - done") -> list[dict]:
    """A minimal one-turn run: no file changes, one no-op command."""
    return [
        brain_entry("REQUIREMENT: finish the job"),
        *build_turn(
            analyses=["nothing to inspect; schedule the command."],
            task_body=simple_task_body("Run a no-op", "run true", "exit status 0"),
            attempts=[([
                'run_command("true")',
                "DONE: ran",
            ], verdict)],
            summary="ran a no-op command.",
            stop=stop,
        ),
    ]
