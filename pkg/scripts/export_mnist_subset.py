"""Write the 5,000-digit MNIST subset shipped inside the mlxtend wheel as IDX files.

Usage: python scripts/export_mnist_subset.py path/to/mlxtend-*.whl [out_dir]

The wheel stores ``mlxtend/data/data/mnist_5k.csv.gz``: one row per image,
784 pixel values (0-255) followed by the label.
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from pointconv_robust.harness.data import write_idx  # noqa: E402

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel: str, out_dir: str = "data") -> None:
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, 784].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist5k-images-idx3-ubyte.gz", images)
    write_idx(out / "mnist5k-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:])
