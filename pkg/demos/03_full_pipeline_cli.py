"""The whole pipeline through the command line interface.

Runs every stage of the ``ddoslab`` CLI into one workspace: preprocess,
local training, federated simulation and cross-evaluation, followed by
synthetic generation, the range audit, and the external detectors pretrained
on synthetic rows and fine-tuned on the external party's labeled flows. Each
stage writes a directory with a manifest. The script then prints the reports.

Equivalent shell session:
    ddoslab maketoy --out data
    ddoslab preprocess --config data/config.json --out ws
    ...
    ddoslab report --config data/config.json --out ws
"""
import json
import sys
import tempfile
from pathlib import Path

from ddoslab import cli

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
data, ws = root / "data", root / "ws"
assert cli.main(["maketoy", "--out", str(data)]) == 0
config = data / "config.json"

stages = [["preprocess"], ["train-local"], ["federate", "simulate"], ["crosseval"],
          ["generate"], ["audit"], ["external", "pretrain"], ["external", "finetune"],
          ["external", "eval"], ["report"]]
for cmd in stages:
    code = cli.main([*cmd, "--config", str(config), "--out", str(ws), "--log-level", "WARNING"])
    print(f"ddoslab {' '.join(cmd):<20} exit {code}")
    if code:
        sys.exit(code)

# Each stage directory carries a manifest with inputs, seeds and digests.
m = json.loads((ws / "federate" / "manifest.json").read_text())
print(f"\nfederate manifest: {m['wall_time_s']:.0f}s, output digest {m['output_digest'][:16]}")

print("\n" + (ws / "crosseval" / "report.txt").read_text())

audit = json.loads((ws / "generate" / "audit.json").read_text())["range_audit"]
print(f"synthetic rows {audit['rows']}, rows breaking a range rule "
      f"{audit['violating_rows']} ({audit['violation_ratio']:.2%})")

print("\n" + (ws / "external-eval" / "report.txt").read_text())
print(f"workspace kept at {root}")
