"""Run every config under configs/ (or the ones named) and tabulate the audits.

    python scripts/run_configs.py --out runs
    python scripts/run_configs.py --out runs configs/minimal.json configs/chs_sweep.json
"""
import argparse
import sys
import time
from pathlib import Path

from reactodiff.errors import ReactoDiffError
from reactodiff.harness import emit_report, run_experiment

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("configs", nargs="*", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    paths = args.configs or sorted((ROOT / "configs").glob("*.json"))
    failed = 0
    for path in paths:
        t0 = time.perf_counter()
        try:
            bundle = run_experiment(path, threads=args.threads)
        except ReactoDiffError as exc:
            print(f"{path.stem:24s} ERROR {type(exc).__name__}: {exc}")
            failed += 1
            continue
        emit_report(bundle, args.out / path.stem)
        bad = [a["name"] for a in bundle.audits if not a["passed"]]
        status = "ok" if not bad else "FAIL " + ",".join(bad)
        print(f"{path.stem:24s} {len(bundle.audits):3d} audits  {time.perf_counter() - t0:7.1f} s  {status}")
        failed += bool(bad)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
