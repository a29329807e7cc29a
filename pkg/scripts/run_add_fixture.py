#!/usr/bin/env python3
"""Run the scripted add.py demo end to end in a throwaway directory.

Replays the deterministic two-turn fixture: turn 1 creates add.py, turn 2
runs the unit test and the stop check confirms the requirement. Prints the
outcome, the transcript, and the final patch.
"""

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from agentloop.backends import ScriptedBackend, load_script
from agentloop.memory import transcript_lines
from agentloop.orchestrator import Orchestrator, RunConfig

FIXTURE = Path(__file__).parent.parent / "tests" / "fixtures" / "add_fixture.json"
REQUEST = "Create add.py so that `python3 test_add.py` exits with status 0."
TEST_ADD = 'from add import add\n\nassert add(2, 3) == 5\nprint("ok")\n'


def main() -> int:
    with tempfile.TemporaryDirectory(prefix="agentloop-demo-") as tmp:
        workdir = Path(tmp) / "workdir"
        workdir.mkdir()
        (workdir / "test_add.py").write_text(TEST_ADD)

        source = load_script(FIXTURE)
        brain = ScriptedBackend(source, role="brain", model="mock-brain")
        hand = ScriptedBackend(source, role="hand", model="mock-hand")
        outcome = Orchestrator(RunConfig(), brain, hand, workdir=workdir).run(REQUEST)

        print(f"status: {outcome.status.value}   turns: {outcome.turns_used}   "
              f"cost: ${outcome.cost:.4f}")
        print("\n--- transcript ---")
        for line in transcript_lines(outcome.store.records):
            print(line)
        print("\n--- final patch ---")
        print(outcome.final_patch.text, end="")
        return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
