"""Dataset ingestion: IDX-format MNIST, Gaussian blobs, and rendered digits.

Image datasets are stored as uint8 and normalized to float64 on access
(value/255, then standardized); blob datasets are stored as float64 and
passed through. `resolve_dataset` prefers real MNIST IDX files under the
data directory and otherwise falls back to a deterministic stroke-rendered
digit dataset with the same shape (28x28, 10 classes), which is generated
once, written as IDX files, and re-read through the same loader.
"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

_log = logging.getLogger(__name__)

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    name: str
    train_x: np.ndarray  # uint8 images (N,1,H,W) or float features (N,D)
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    mean: float = 0.0
    std: float = 1.0
    scale: float = 1.0  # raw values are divided by this before standardizing

    @property
    def item_shape(self):
        return self.train_x.shape[1:]

    @property
    def n_classes(self):
        return int(self.train_y.max()) + 1

    def normalized(self, split="train", idx=None, flat=False):
        """Float64 inputs for a split: (raw/scale - mean)/std."""
        x = self.train_x if split == "train" else self.test_x
        if idx is not None:
            x = x[idx]
        out = (np.asarray(x, dtype=float) / self.scale - self.mean) / self.std
        if flat:
            out = out.reshape(out.shape[0], -1)
        return out

    def labels(self, split="train", idx=None):
        y = self.train_y if split == "train" else self.test_y
        return y if idx is None else y[idx]


def inputs_for(input_shape, ds, split="train", idx=None):
    """Normalized inputs reshaped to match a network's input shape."""
    flat = len(input_shape) == 1
    x = ds.normalized(split, idx, flat=flat)
    if x.shape[1:] != tuple(input_shape):
        raise DataFormatError(f"dataset items {x.shape[1:]} do not fit network input {tuple(input_shape)}")
    return x


# ---------------------------------------------------------------------------
# IDX files


def _open_maybe_gz(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path):
    """Parse one IDX file (optionally .gz) into a numpy uint8 array."""
    with _open_maybe_gz(path) as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated header")
    zero, dtype, ndim = blob[0] << 8 | blob[1], blob[2], blob[3]
    if zero != 0 or dtype != 0x08:
        raise DataFormatError(f"{path}: bad magic {blob[:4].hex()}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) != header + count:
        raise DataFormatError(f"{path}: expected {count} data bytes, found {len(blob) - header}")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path, array):
    """Write a uint8 array in IDX format (big-endian dims)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _find(dir_path, fname):
    for candidate in (fname, fname + ".gz"):
        p = os.path.join(dir_path, candidate)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(os.path.join(dir_path, fname))


def load_mnist(path, mean=MNIST_MEAN, std=MNIST_STD, name="mnist"):
    """Load the four canonical IDX files from a directory.

    Images magic 0x00000803, labels 0x00000801, big-endian dimensions;
    pixels are scaled to [0,1] then standardized with the given constants.
    """
    arrays = {}
    for key, fname in MNIST_FILES.items():
        arr = read_idx(_find(path, fname))
        want = 3 if key.endswith("images") else 1
        if arr.ndim != want:
            raise DataFormatError(f"{fname}: expected {want}-D payload, got {arr.ndim}-D")
        arrays[key] = arr
    if arrays["train_images"].shape[0] != arrays["train_labels"].shape[0]:
        raise DataFormatError("train image/label counts differ")
    if arrays["test_images"].shape[0] != arrays["test_labels"].shape[0]:
        raise DataFormatError("test image/label counts differ")
    tr = arrays["train_images"][:, None, :, :]
    te = arrays["test_images"][:, None, :, :]
    return Dataset(
        name=name,
        train_x=tr,
        train_y=arrays["train_labels"].astype(np.int64),
        test_x=te,
        test_y=arrays["test_labels"].astype(np.int64),
        mean=mean,
        std=std,
        scale=255.0,
    )


# ---------------------------------------------------------------------------
# Gaussian blobs


def make_synthetic(n, classes, dim, seed, separation=3.0, test_fraction=0.2):
    """Gaussian-blob classification data, deterministic per seed.

    Class means are placed at distance `separation` from the origin; unit
    isotropic noise is added. Class priors are uniform up to integer
    rounding. The test split has max(classes, n*test_fraction) items.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 7001)))
    means = rng.normal(size=(classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    def split(count, tag):
        r = np.random.default_rng(np.random.SeedSequence((int(seed), 7001, tag)))
        y = np.arange(count) % classes
        r.shuffle(y)
        x = means[y] + r.normal(size=(count, dim))
        return x, y.astype(np.int64)

    n_test = max(classes, int(round(n * test_fraction)))
    tr_x, tr_y = split(n, 0)
    te_x, te_y = split(n_test, 1)
    return Dataset(name=f"blobs{classes}d{dim}", train_x=tr_x, train_y=tr_y, test_x=te_x, test_y=te_y)


# ---------------------------------------------------------------------------
# rendered digits (MNIST stand-in when IDX files are unavailable)


def _arc(cx, cy, rx, ry, t0, t1, n=14):
    t = np.linspace(t0, t1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _digit_strokes():
    """Polyline skeletons per digit in a unit box, y pointing down."""
    pi = np.pi
    return {
        0: [_arc(0.50, 0.50, 0.30, 0.40, 0, 2 * pi, 22)],
        1: [np.array([[0.32, 0.28], [0.54, 0.10]]), np.array([[0.54, 0.10], [0.54, 0.92]])],
        2: [
            np.concatenate([
                _arc(0.50, 0.30, 0.27, 0.20, pi, 2 * pi),
                np.array([[0.77, 0.30], [0.22, 0.88], [0.80, 0.88]]),
            ])
        ],
        3: [_arc(0.45, 0.29, 0.27, 0.20, 1.20 * pi, 2.35 * pi), _arc(0.45, 0.68, 0.28, 0.22, 1.65 * pi, 2.85 * pi)],
        4: [np.array([[0.68, 0.08], [0.18, 0.62], [0.85, 0.62]]), np.array([[0.68, 0.08], [0.68, 0.92]])],
        5: [
            np.array([[0.76, 0.10], [0.28, 0.10], [0.26, 0.46]]),
            _arc(0.45, 0.66, 0.28, 0.24, 1.25 * pi, 2.85 * pi),
        ],
        6: [
            np.array([[0.66, 0.08], [0.50, 0.28], [0.40, 0.50], [0.36, 0.66]]),
            _arc(0.47, 0.68, 0.22, 0.20, pi, 3 * pi, 20),
        ],
        7: [np.array([[0.20, 0.12], [0.80, 0.12], [0.42, 0.90]])],
        8: [_arc(0.50, 0.30, 0.21, 0.19, 0, 2 * pi, 18), _arc(0.50, 0.69, 0.25, 0.21, 0, 2 * pi, 18)],
        9: [_arc(0.52, 0.32, 0.22, 0.20, 0, 2 * pi, 18), np.array([[0.74, 0.34], [0.72, 0.55], [0.60, 0.90]])],
    }


_STROKES = _digit_strokes()
_CANVAS = 56  # rendered at 2x, then downsampled to 28


def render_digit(digit, rng, size=28):
    """One noisy 28x28 uint8 image of `digit`.

    Stroke-point jitter, a random affine warp, stroke-width/intensity
    variation, pixel noise, and occasional clutter strokes give the task
    handwritten-digit-like difficulty (a dense MLP reaches the mid-90s in a
    few epochs rather than saturating).
    """
    from PIL import Image, ImageDraw

    angle = rng.uniform(-0.38, 0.38)
    shear = rng.uniform(-0.30, 0.30)
    sx, sy = rng.uniform(0.58, 1.06, size=2)
    tx, ty = rng.uniform(-0.09, 0.09, size=2)
    jitter = rng.uniform(0.02, 0.06)
    width = int(rng.integers(2, 7))
    intensity = rng.uniform(0.45, 1.0)
    noise = rng.uniform(0.05, 0.16)

    cos_a, sin_a = np.cos(angle), np.sin(angle)
    rot = np.array([[cos_a, -sin_a], [sin_a, cos_a]])
    shear_m = np.array([[1.0, shear], [0.0, 1.0]])
    scale_m = np.diag([sx, sy])
    affine = rot @ shear_m @ scale_m

    img = Image.new("L", (_CANVAS, _CANVAS), 0)
    draw = ImageDraw.Draw(img)
    for stroke in _STROKES[digit]:
        pts = stroke + rng.normal(0.0, jitter, size=stroke.shape)
        pts = (pts - 0.5) @ affine.T + 0.5 + np.array([tx, ty])
        px = [(float(x) * (_CANVAS - 1), float(y) * (_CANVAS - 1)) for x, y in pts]
        draw.line(px, fill=255, width=width, joint="curve")
    if rng.random() < 0.5:
        p0 = rng.uniform(0.05, 0.95, 2)
        p1 = np.clip(p0 + rng.uniform(-0.3, 0.3, 2), 0.0, 1.0)
        draw.line(
            [tuple(p0 * (_CANVAS - 1)), tuple(p1 * (_CANVAS - 1))],
            fill=int(rng.integers(90, 255)),
            width=int(rng.integers(1, 4)),
        )
    small = img.resize((size, size), Image.LANCZOS)
    arr = np.asarray(small, dtype=float) / 255.0 * intensity
    arr = np.clip(arr + rng.normal(0.0, noise, size=arr.shape), 0.0, 1.0)
    return (arr * 255).astype(np.uint8)


def render_digit_split(count, seed, tag, size=28):
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 8002, tag)))
    y = np.arange(count) % 10
    rng.shuffle(y)
    x = np.empty((count, size, size), dtype=np.uint8)
    for i in range(count):
        x[i] = render_digit(int(y[i]), rng, size)
    return x, y.astype(np.int64)


def make_digits(dir_path, n_train=20000, n_test=4000, seed=0):
    """Render the digit dataset into IDX files under `dir_path`; returns the directory.

    Re-renders only when the files are missing, so repeated calls are cheap
    and deterministic.
    """
    os.makedirs(dir_path, exist_ok=True)
    paths = {k: os.path.join(dir_path, v) for k, v in MNIST_FILES.items()}
    if not all(os.path.exists(p) for p in paths.values()):
        _log.info("rendering digit dataset (%d train / %d test) into %s", n_train, n_test, dir_path)
        tr_x, tr_y = render_digit_split(n_train, seed, 0)
        te_x, te_y = render_digit_split(n_test, seed, 1)
        write_idx(paths["train_images"], tr_x)
        write_idx(paths["train_labels"], tr_y)
        write_idx(paths["test_images"], te_x)
        write_idx(paths["test_labels"], te_y)
    return dir_path


def load_digits(dir_path, n_train=20000, n_test=4000, seed=0):
    """Rendered-digit dataset via the IDX loader, standardized with its own stats."""
    make_digits(dir_path, n_train, n_test, seed)
    ds = load_mnist(dir_path, mean=0.0, std=1.0, name="digits")
    pixels = ds.train_x.astype(float) / 255.0
    ds.mean = float(pixels.mean())
    ds.std = float(pixels.std())
    return ds


def default_data_dir():
    return os.environ.get("SPARSEFLOW_DATA", os.path.join(os.getcwd(), "data"))


def resolve_dataset(name, data_dir=None, **kwargs):
    """'mnist' (with automatic digits fallback), 'digits', or 'blobs'."""
    data_dir = data_dir or default_data_dir()
    if name == "mnist":
        try:
            return load_mnist(data_dir)
        except FileNotFoundError:
            _log.warning("MNIST IDX files not found under %s; using rendered digits", data_dir)
            return load_digits(os.path.join(data_dir, "digits"), **kwargs)
    if name == "digits":
        return load_digits(os.path.join(data_dir, "digits"), **kwargs)
    if name == "blobs":
        return make_synthetic(kwargs.pop("n", 2000), kwargs.pop("classes", 4), kwargs.pop("dim", 16), kwargs.pop("seed", 0), **kwargs)
    raise DataFormatError(f"unknown dataset {name!r}")
