"""Generate a small batch-structured dataset and look at its statistics.

Run with ``python demos/02_synthetic_dataset.py [OUTDIR]``.
"""

import sys
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from xrayqc import SynthConfig, generate_dataset, image_stats, load_pgm16
from xrayqc.synth import Label

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="xrayqc_demo_"))

# three batches, a quarter abnormal, small plates so this is quick
cfg = SynthConfig(seed=1, batch_sizes=(12, 16, 10), abnormal_fraction=0.25, image_width=64, image_height=128)
index = generate_dataset(cfg, out)
print(f"{len(index)} images under {out}")

for b in index.batch_ids:
    recs = index.select([b])
    labels = Counter(r.label.token for r in recs)
    means = [image_stats(load_pgm16(index.image_path(r))).mean for r in recs]
    # batches share a coating mean, so within-batch spread is small
    print(f"batch {b}: {dict(labels)}  mean counts {np.mean(means):.0f} +/- {np.std(means):.0f}")

# which anomalies made the abnormal samples abnormal
kinds = Counter(k.value for r in index if r.label is Label.ABNORMAL for k, s in r.injected if s >= cfg.severity_threshold)
print("anomaly kinds above threshold:", dict(kinds))

# normal plates may carry small defects too
minor = sum(1 for r in index if r.label is Label.NORMAL and r.injected)
print("normal plates with a minor defect:", minor)
