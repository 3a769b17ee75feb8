"""The whole pipeline through the command line, end to end.

Stages write versioned artifacts plus a run record with the config hash and
content hashes; rerunning any stage with the same seed and config reproduces
identical bytes.  Scaled down here to finish in about a minute.
"""

import json
import tempfile
from pathlib import Path

from voiceface.cli import main

tmp = Path(tempfile.mkdtemp(prefix="voiceface_demo_"))
cfg = tmp / "pipeline.cfg"
cfg.write_text(f"""\
[paths]
dataset_root = {tmp / "dataset"}
output_dir = {tmp / "out"}

[synth]
n_speakers = 60

[training]
iterations = 60
batch_size = 16
segment_lo_frames = 24
segment_hi_frames = 32
warmup_iterations = 15
eval_every = 30
n_eval_segments = 2

[harness]
n_runs = 6
iterations = 40
batch_size = 16
warmup_iterations = 10
eval_every = 20

[reconstruction]
basis_dim = 24

[pipeline]
seed = 11
""")

for stage in ("synth", "compute-ams", "build-basis", "train", "predict",
              "select", "fit", "evaluate", "report"):
    code = main(["--config", str(cfg), stage])
    print(f"{stage:12s} exit={code}")
    assert code == 0

out = tmp / "out"
selection = json.loads((out / "selection.json").read_text())
manifest = json.loads((tmp / "dataset" / "manifest.json").read_text())
print(f"\nplanted:     {manifest['planted']}")
print(f"predictable: {selection['predictable']}")
print(f"chosen for reconstruction: {selection['chosen']}")

print("\nreconstruction error by confidence level:")
for line in (out / "evaluation_summary.csv").read_text().splitlines():
    if not line.startswith("#"):
        print(f"  {line}")

print(f"\nartifacts in {out}")
