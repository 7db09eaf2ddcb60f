"""One silo, one detector.

Generates the toy NetFlow corpora, cleans and splits silo A, trains a dense
GANomaly on its benign training rows and then calibrates a threshold on the
benign validation split. Finally it scores the held-out test split, which
contains both benign and ddos flows.

Run from the repository root:  python demos/01_one_silo_detector.py
"""
import tempfile
from pathlib import Path

import numpy as np

from ddoslab import evalkit as ek
from ddoslab import flowdata as fd
from ddoslab import ganomaly as gan
from ddoslab import toy
from ddoslab.federation import train_solo

# The toy corpora are small enough to regenerate each run.
data = Path(tempfile.mkdtemp()) / "toy"
toy.make_toy(data, seed=0)
schema = fd.FlowSchema.load(data / "schema.json")

# Raw CSV -> processed table: flags become 8 bit columns, address and port
# columns are dropped, outliers outside 3 IQR of the benign rows are removed.
raw = fd.load_csv(data / "A.csv", schema)
table = fd.preprocess(raw, schema)
print(f"silo A: {len(raw)} raw rows, {len(table)} after cleaning")
print("processed columns:", ", ".join(table.column_names))

# Train is benign only; test carries every ddos row.
parts = fd.split(table, seed=0)
for name in ("train", "test", "validation"):
    t = getattr(parts, name)
    print(f"  {name:<10} {len(t):>5} rows, {t.n_ddos:>4} ddos")

# Toy-sized network: 15 inputs -> 128 -> 64 -> 32 -> z=8 and back.
arch = gan.GanomalyArch(len(table.column_names), 8, (128, 64, 32))
cfg = gan.TrainConfig(epochs=50, batch_size=256, lr=1e-3)
model, scaler = train_solo(parts, arch, cfg, seed=0, client_id="A", epochs=50)

# The detector keeps the silo's own scaler. Normalization and threshold come
# from the benign validation scores.
det = ek.Detector(model, scaler, "A")
thr = ek.select_threshold(det, parts.validation, q=0.95)
print(f"threshold at q=0.95 of validation scores: {thr.threshold:.4f}")

rep = ek.evaluate(det, parts.test)
print(f"test ROC-AUC {rep.roc_auc:.3f}  F1 {rep.f1:.3f}  "
      f"(tp {rep.tp}, fp {rep.fp}, tn {rep.tn}, fn {rep.fn})")

# How much does F1 move with the quantile?
for q, row in ek.threshold_sensitivity(det, parts.validation, parts.test).items():
    print(f"  q={q:<5} threshold {row['threshold']:.4f}  F1 {row['f1']:.3f}")

# Score distributions by class, on the normalized scale.
s = det.score(parts.test)
y = parts.test.labels
print(f"median score benign {np.median(s[y == 0]):.3f}, ddos {np.median(s[y == 1]):.3f}")
