import os
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_MNIST_DIR = REPO_ROOT / "data" / "mnist"


def mnist_dir() -> Path | None:
    """Directory holding the four IDX files, or None if unavailable."""
    candidate = Path(os.environ.get("FEDWB_MNIST_DIR", DEFAULT_MNIST_DIR))
    names = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    ok = all((candidate / n).exists() or (candidate / (n + ".gz")).exists()
             for n in names)
    return candidate if ok else None


requires_mnist = pytest.mark.skipif(
    mnist_dir() is None,
    reason="MNIST IDX files not found (set FEDWB_MNIST_DIR or place them in data/mnist)",
)
