"""Write the bundled Breast Cancer Wisconsin (Diagnostic) snapshot.

Needs scikit-learn, which is not a runtime dependency. Label 1 = benign.
"""
import csv
import sys
from pathlib import Path

from sklearn.datasets import load_breast_cancer

out = Path(sys.argv[1]) if len(sys.argv) > 1 else (
    Path(__file__).resolve().parents[1] / "src" / "tikhonov_bilevel" / "data" / "wdbc.csv"
)
ds = load_breast_cancer()
names = [n.replace(" ", "_") for n in ds.feature_names]
with open(out, "w", newline="") as fh:
    w = csv.writer(fh)
    w.writerow(names + ["label"])
    for row, y in zip(ds.data, ds.target):
        w.writerow([repr(float(v)) for v in row] + [int(y)])
print(f"wrote {len(ds.target)} rows to {out}")
