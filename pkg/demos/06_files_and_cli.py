"""Tensor files, manifests and the command-line interface.

Run: python demos/06_files_and_cli.py
"""

# %% The SPTF container
import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from subpool.data_io import encode_tensor, decode_tensor, load_manifest

blob = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
print("bytes:", len(blob), "header:", blob[:16].hex(" "))
print(decode_tensor(blob))

# %% synth -> train -> eval through the CLI
work = Path(tempfile.mkdtemp())


def subpool(*args):
    proc = subprocess.run([sys.executable, "-m", "subpool.cli", *args],
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


print(subpool("synth", "--ids", "20", "--per-id", "8", "--seed", "7", "--out", str(work / "data")))
print("manifest rows:", len(load_manifest(work / "data" / "manifest.csv")))
summary = subpool("train", "--data", str(work / "data"), "--out", str(work / "run"), "--seed", "7")
print("final loss", summary["final_loss"], "held-out mAP", summary["eval"]["map"])
report = subpool("eval", "--data", str(work / "data"), "--checkpoint", str(work / "run"),
                 "--mode", "multi", "--export-ranking", "3", "--ranking-out", str(work / "rank.csv"))
print("multi-query mAP", report["map"])
print((work / "rank.csv").read_text().splitlines()[:4])
print((work / "run" / "run.cfg").read_text().splitlines()[:6])
