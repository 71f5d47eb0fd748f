"""
A complete desk-scale experiment
================================

The ``nowcast`` command runs the whole chain: generate the synthetic world,
build normalised inputs and binned targets, train, fit thresholds and verify
against a persistence baseline.  Each stage caches its outputs under a
content hash of the settings it depends on, so a second call does nothing.

This script shrinks the bundled toy configuration so it finishes in well under a
minute, then reads the verification report.
"""

import csv
import json
import subprocess
import sys
import tempfile
from pathlib import Path

out = Path(tempfile.mkdtemp(prefix="nowcast-demo-"))
config = {
    "seed": 11,
    "scenes": {"train": 8, "threshold": 4, "test": 4},
    "train": {"steps": 60},
    "leads": [15, 30, 60],
}
cfg_path = out / "config.json"
cfg_path.write_text(json.dumps(config))

cmd = [sys.executable, "-m", "nowcast.cli", "run", "--config", str(cfg_path), "--out", str(out / "run")]
print(" ".join(cmd[2:]), flush=True)
subprocess.run(cmd, check=True)

# Rerunning reuses every cached stage.
status = subprocess.run(cmd, check=True, capture_output=True, text=True).stdout
print("second run:", status.strip())

with open(out / "run" / "reports" / "verification.csv") as fh:
    rows = [r for r in csv.DictReader(fh) if r["metric"] == "csi" and r["rate_mm_hr"] == "1.0"]
for r in rows:
    print(f"{r['model']:12s} lead {r['lead_min']:>3s}  CSI {float(r['value']):.3f}")
print("outputs in", out / "run")
