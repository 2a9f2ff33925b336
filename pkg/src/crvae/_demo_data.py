"""Build a 5000-image MNIST subset in IDX format from the copy bundled with mlxtend."""

import gzip
import os

import numpy as np

from .data import write_idx

IMAGES_NAME = "mnist5k-images-idx3-ubyte.gz"
LABELS_NAME = "mnist5k-labels-idx1-ubyte.gz"


def mnist5k_to_idx(out_dir, seed=0):
    """Write shuffled images/labels IDX files into ``out_dir``; return the image path.

    The bundled CSV is ordered by class, so rows are permuted with ``seed``
    to make the trailing hold-out split class-balanced in expectation.
    """
    try:
        import mlxtend
    except ImportError as exc:  # pragma: no cover - exercised only without the extra
        raise ImportError("the MNIST subset needs the 'demo' extra: pip install mlxtend") from exc
    src = os.path.join(os.path.dirname(mlxtend.__file__), "data", "data", "mnist_5k.csv.gz")
    with gzip.open(src, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    order = np.random.default_rng(seed).permutation(len(labels))
    os.makedirs(out_dir, exist_ok=True)
    image_path = os.path.join(out_dir, IMAGES_NAME)
    write_idx(image_path, images[order])
    write_idx(os.path.join(out_dir, LABELS_NAME), labels[order])
    return image_path
