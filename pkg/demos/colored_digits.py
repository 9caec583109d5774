"""One seed of the colored-digits comparison, driven through the CLI.

Pass IDX image and label files, or have mlxtend installed for its 5000-digit
sample. Writes everything under ./colored_digits_demo.

    python demos/colored_digits.py [images.idx labels.idx]
"""

import os
import sys

from sfp import cli
from sfp.datasets import write_idx

OUT = "colored_digits_demo"
SEED = "1"
COMMON = ["--seed", SEED, "--p-i", "0.7", "--lr", "0.01", "--epochs", "60", "--batch-size", "64"]

if len(sys.argv) == 3:
    images, labels = sys.argv[1:]
else:
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    os.makedirs(OUT, exist_ok=True)
    images, labels = os.path.join(OUT, "images.idx"), os.path.join(OUT, "labels.idx")
    write_idx(images, x.reshape(-1, 28, 28))
    write_idx(labels, y)

for name, ratios in (("biased", "0.8,0.6,0.0"), ("unbiased", "0.0,0.0,0.0")):
    cli.main(["gen-data", "--task", "colored-mnist", "--images", images, "--labels", labels,
              "--ratios", ratios, "--seed", SEED, "--out", os.path.join(OUT, name)])

for method in ("erm", "sfp", "rex", "sfp+rex"):
    cli.main(["train", "--method", method, "--dataset", os.path.join(OUT, "biased"),
              "--out", os.path.join(OUT, "runs")] + COMMON)
cli.main(["train", "--method", "erm", "--dataset", os.path.join(OUT, "unbiased"),
          "--out", os.path.join(OUT, "runs_unbiased")] + COMMON)

cli.main(["report", os.path.join(OUT, "runs"), os.path.join(OUT, "runs_unbiased"),
          "--out", os.path.join(OUT, "table.csv")])
