"""Run ``cardioplan repro`` and check the end-to-end targets on its report.

Usage: python scripts/run_repro.py [--seed 7] [--out-dir repro] [--fast]
"""
import argparse
import json
import sys
import time
from pathlib import Path

from cardioplan.cli import main as cli_main


def summarize(report: dict) -> list[str]:
    lines = []
    for regime in ("original_only", "with_noise"):
        rows = report["cv"][regime]["rows"]
        fr = "  ".join(f"{p} {100 * rows[p]['frac_under_15']:.1f}%" for p in ("sa", "ch4", "ch2"))
        lines.append(f"{regime:<14} LV mean {rows['lv']['mean']:.2f} mm   under 15 deg: {fr}")
    return lines


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--out-dir", default="repro")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--fast", action="store_true")
    args = ap.parse_args()

    argv = ["repro", "--seed", str(args.seed), "--out-dir", args.out_dir, "--threads", str(args.threads)]
    if args.fast:
        argv.append("--fast")
    t0 = time.perf_counter()
    rc = cli_main(argv)
    elapsed = time.perf_counter() - t0
    if rc != 0:
        return rc
    report = json.loads((Path(args.out_dir) / "report" / "cv_report.json").read_text())
    for line in summarize(report):
        print(line)
    print(f"runtime {elapsed:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
