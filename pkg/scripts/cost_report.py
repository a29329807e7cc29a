#!/usr/bin/env python3
"""Print the token-cost report for the sampled turn statistics.

Shows the closed-form totals evaluated verbatim, the event-level simulator at
the rounded integer point, both savings fractions next to the recorded
reference claim, and the per-term discrepancy table for the flat side.

Usage: python3 scripts/cost_report.py [n m k]
"""

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from agentloop.accounting import TokenModelParams, cost_report


def main() -> None:
    if len(sys.argv) == 4:
        n, m, k = (float(x) for x in sys.argv[1:4])
        params = TokenModelParams(
            n=n, m=m, k=k,
            input=359, sumy=784, eval=7.54, task=754,
            analysis=148, action=227, obs=1994,
        )
    else:
        params = TokenModelParams.sampled_defaults()
    report = cost_report(params)
    print(json.dumps(report, indent=2))

    sim = report["simulator"]
    print("\nsummary", file=sys.stderr)
    print(f"  simulator savings:  input {sim['input_saving']:.4f}  "
          f"output {sim['output_saving']:.4f}", file=sys.stderr)
    ref = report["reference_claim"]
    print(f"  reference claim:    input {ref['input_saving']:.4f}  "
          f"output {ref['output_saving']:.4f}", file=sys.stderr)
    nonzero = [cat for cat, row in report["discrepancies"].items() if row["delta"] != 0]
    print(f"  flat-side terms disagreeing with the simulator: {nonzero}", file=sys.stderr)


if __name__ == "__main__":
    main()
