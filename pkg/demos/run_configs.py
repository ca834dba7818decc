"""Run every config in demos/configs through the command line runner.

Outputs land in demos/out/<name>/ (CSV tables, SVG plots and summary.txt).

Run: python3 demos/run_configs.py [--workers N]
"""
import sys
import time
from pathlib import Path

from bhplab.runner import main

workers = sys.argv[sys.argv.index("--workers") + 1] if "--workers" in sys.argv else "1"
for cfg in sorted((Path(__file__).parent / "configs").glob("*.ini")):
    t = time.perf_counter()
    code = main(["run", str(cfg), "--workers", workers])
    print(f"{cfg.stem:20s} exit {code}  {time.perf_counter() - t:.1f} s", file=sys.stderr)
