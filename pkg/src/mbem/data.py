"""Data acquisition and preprocessing for the experiment protocols.

Covers IDX image ingestion (plain or gzip), constant-pixel filtering, PCA
projection, labeled-CSV template fitting, the randomized-partition
initializer, and a Lloyd k-means baseline.
"""

from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IdxFormatError, InitializationError, InvalidInputError
from .families import Gaussian, MixtureParams

# IDX container layout (big endian):
#   u8  0x00 0x00   | reserved
#   u8  type code   | 0x08 = unsigned byte
#   u8  ndim        | 3 for image sets, 1 for label sets
#   u32 x ndim      | dimension sizes
#   u8  payload     | row-major data
_IDX_UBYTE = 0x08
_MAX_ELEMENTS = 1 << 40  # dimension-overflow guard


@dataclass(frozen=True)
class IdxImageSet:
    """Parsed IDX image set: n x (rows*cols) pixel bytes plus optional labels."""

    pixels: np.ndarray
    rows: int
    cols: int
    labels: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.pixels.shape[0]


def _open_idx(src) -> io.BufferedIOBase:
    if isinstance(src, (str, Path)):
        raw = open(src, "rb")
        if raw.read(2) == b"\x1f\x8b":
            raw.close()
            return gzip.open(src, "rb")
        raw.seek(0)
        return raw
    # caller-supplied stream: sniff without assuming seekability
    head = src.read(2)
    if head == b"\x1f\x8b":
        return gzip.GzipFile(fileobj=io.BytesIO(head + src.read()))
    return io.BufferedReader(_Prefixed(head, src))


class _Prefixed(io.RawIOBase):
    """Raw stream that replays sniffed bytes before the underlying stream."""

    def __init__(self, head: bytes, stream):
        self._head = head
        self._stream = stream

    def readable(self):
        return True

    def readinto(self, b):
        if self._head:
            k = min(len(b), len(self._head))
            b[:k] = self._head[:k]
            self._head = self._head[k:]
            return k
        chunk = self._stream.read(len(b))
        b[: len(chunk)] = chunk
        return len(chunk)


def _read_exact(f, count: int, offset: int) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise IdxFormatError(
            f"truncated stream: wanted {count} bytes at offset {offset}, got {len(buf)}"
        )
    return buf


def _read_idx_tensor(f) -> np.ndarray:
    magic = _read_exact(f, 4, 0)
    if magic[0] != 0 or magic[1] != 0:
        raise IdxFormatError(f"bad magic bytes {magic[:2].hex()} at offset 0")
    if magic[2] != _IDX_UBYTE:
        raise IdxFormatError(f"unsupported type code 0x{magic[2]:02x} at offset 2")
    ndim = magic[3]
    if ndim < 1:
        raise IdxFormatError("zero-dimensional tensor at offset 3")
    dims = []
    for k in range(ndim):
        offset = 4 + 4 * k
        (size,) = struct.unpack(">I", _read_exact(f, 4, offset))
        dims.append(size)
    total = 1
    for size in dims:
        total *= size
    if total > _MAX_ELEMENTS:
        raise IdxFormatError(f"dimension overflow: {dims} at offset 4")
    payload_offset = 4 + 4 * ndim
    payload = _read_exact(f, total, payload_offset)
    if f.read(1):
        raise IdxFormatError(f"trailing bytes after offset {payload_offset + total}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx(images, labels=None) -> IdxImageSet:
    """Parse an IDX image file (and optionally its label file).

    Accepts paths or binary streams; gzip-compressed inputs are detected by
    their magic bytes.  Format violations raise :class:`IdxFormatError` with
    the byte offset of the problem.
    """
    with _open_idx(images) as f:
        tensor = _read_idx_tensor(f)
    if tensor.ndim != 3:
        raise IdxFormatError(f"image set must have 3 dimensions, found {tensor.ndim} at offset 3")
    n, rows, cols = tensor.shape
    pixels = tensor.reshape(n, rows * cols)
    label_vec = None
    if labels is not None:
        with _open_idx(labels) as f:
            label_vec = _read_idx_tensor(f)
        if label_vec.ndim != 1:
            raise IdxFormatError(
                f"label set must have 1 dimension, found {label_vec.ndim} at offset 3"
            )
        if label_vec.shape[0] != n:
            raise IdxFormatError(
                f"label count {label_vec.shape[0]} does not match image count {n}"
            )
    return IdxImageSet(pixels=pixels, rows=rows, cols=cols, labels=label_vec)


def write_idx(dataset: IdxImageSet, images_path, labels_path=None) -> None:
    """Write an image set (and optionally its labels) back to IDX files."""
    n = dataset.n
    with open(images_path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, _IDX_UBYTE, 3))
        f.write(struct.pack(">III", n, dataset.rows, dataset.cols))
        f.write(np.ascontiguousarray(dataset.pixels, dtype=np.uint8).tobytes())
    if labels_path is not None:
        if dataset.labels is None:
            raise InvalidInputError("dataset has no labels to write")
        with open(labels_path, "wb") as f:
            f.write(struct.pack(">BBBB", 0, 0, _IDX_UBYTE, 1))
            f.write(struct.pack(">I", n))
            f.write(np.ascontiguousarray(dataset.labels, dtype=np.uint8).tobytes())


def drop_constant_pixels(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Remove columns that are identical across all rows.

    Returns the reduced matrix and the (strictly increasing) kept column
    indices for reproducibility.
    """
    images = np.asarray(images)
    if images.shape[0] < 1:
        raise InvalidInputError("need at least one row")
    keep = np.flatnonzero(images.min(axis=0) != images.max(axis=0))
    return images[:, keep], keep


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    """Centering vector, orthonormal projection columns, and top eigenvalues."""

    mean: np.ndarray
    components: np.ndarray  # (d, d_pc), orthonormal columns
    eigenvalues: np.ndarray  # (d_pc,), descending


_CHUNK_ROWS = 4096


def fit_pca(data: np.ndarray, d_pc: int) -> PcaModel:
    """Eigendecomposition of the sample covariance of column-centered data.

    Sign convention: each component column has its largest-magnitude entry
    positive.  The covariance is accumulated in fixed-size row chunks so
    integer pixel matrices never need a full float copy.
    """
    n, d = data.shape
    if not 1 <= d_pc <= d:
        raise InvalidInputError(f"component count {d_pc} outside [1, {d}]")
    if d > n:
        raise InvalidInputError(f"need at least d={d} observations, got {n}")
    mean = np.zeros(d)
    for start in range(0, n, _CHUNK_ROWS):
        mean += np.asarray(data[start : start + _CHUNK_ROWS], dtype=float).sum(axis=0)
    mean /= n
    scatter = np.zeros((d, d))
    for start in range(0, n, _CHUNK_ROWS):
        chunk = np.asarray(data[start : start + _CHUNK_ROWS], dtype=float) - mean
        scatter += chunk.T @ chunk
    cov = scatter / (n - 1) if n > 1 else scatter
    cov = (cov + cov.T) / 2.0
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:d_pc]
    vals = np.maximum(vals[order], 0.0)
    vecs = vecs[:, order]
    for j in range(d_pc):
        peak = np.argmax(np.abs(vecs[:, j]))
        if vecs[peak, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return PcaModel(mean=mean, components=vecs, eigenvalues=vals)


def project(model: PcaModel, data: np.ndarray) -> np.ndarray:
    """Project rows of ``data`` onto the model's principal directions."""
    n = data.shape[0]
    out = np.empty((n, model.components.shape[1]))
    for start in range(0, n, _CHUNK_ROWS):
        chunk = np.asarray(data[start : start + _CHUNK_ROWS], dtype=float) - model.mean
        out[start : start + _CHUNK_ROWS] = chunk @ model.components
    return out


# ---------------------------------------------------------------------------
# initialization and baseline clustering
# ---------------------------------------------------------------------------

def random_partition_init(
    data: np.ndarray,
    g: int,
    rng: np.random.Generator,
    max_retries: int = 100,
    return_labels: bool = False,
):
    """Mixture start from a uniformly random partition of the data.

    Each observation gets an independent uniform label; block weights, means,
    and full covariances become the initial parameters.  Draws a fresh
    partition (up to ``max_retries``) whenever some block has fewer than d+1
    points or a singular covariance.  With ``return_labels`` the accepted
    partition is returned too, so baselines can start from the same split.
    """
    data = np.asarray(data, dtype=float)
    n, d = data.shape
    if n < g * (d + 2):
        raise InvalidInputError(f"need at least g*(d+2)={g * (d + 2)} observations, got {n}")
    for _ in range(max_retries):
        labels = rng.integers(0, g, size=n)
        counts = np.bincount(labels, minlength=g)
        if np.any(counts < d + 1):
            continue
        comps = []
        for z in range(g):
            block = data[labels == z]
            mean = block.mean(axis=0)
            centered = block - mean
            cov = centered.T @ centered / counts[z]
            cov = (cov + cov.T) / 2.0
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                comps = None
                break
            comps.append(Gaussian(mean, cov))
        if comps is not None:
            params = MixtureParams(counts / n, tuple(comps))
            return (params, labels) if return_labels else params
    raise InitializationError(f"no valid random partition after {max_retries} attempts")


def kmeans(
    data: np.ndarray,
    g: int,
    epochs: int,
    init_labels: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations with farthest-point reseeding of empty clusters.

    Runs at most ``epochs`` assignment/update sweeps, stopping early at a
    fixed point.  The within-cluster sum of squares is asserted nonincreasing
    after every sweep.
    """
    data = np.asarray(data, dtype=float)
    n, d = data.shape
    if g > n:
        raise InvalidInputError(f"cannot place {g} clusters on {n} points")
    if init_labels is not None:
        labels = np.asarray(init_labels).copy()
        if labels.shape[0] != n:
            raise InvalidInputError("initial labels do not match the data")
    elif rng is not None:
        labels = rng.integers(0, g, size=n)
    else:
        raise InvalidInputError("supply init_labels or a generator")

    centers = np.zeros((g, d))
    counts = np.bincount(labels, minlength=g)
    grand_mean = data.mean(axis=0)
    for z in range(g):
        centers[z] = data[labels == z].mean(axis=0) if counts[z] > 0 else grand_mean

    sq_norms = (data * data).sum(axis=1)
    prev_wcss = np.inf
    for _ in range(epochs):
        dist = sq_norms[:, None] - 2.0 * (data @ centers.T) + (centers * centers).sum(axis=1)
        new_labels = np.argmin(dist, axis=1)
        point_cost = dist[np.arange(n), new_labels]
        empty = np.flatnonzero(np.bincount(new_labels, minlength=g) == 0)
        for z in empty:
            far = int(np.argmax(point_cost))
            centers[z] = data[far]
            new_labels[far] = z
            point_cost[far] = 0.0
        for z in range(g):
            members = new_labels == z
            if np.any(members):
                centers[z] = data[members].mean(axis=0)
        wcss = float(((data - centers[new_labels]) ** 2).sum())
        assert wcss <= prev_wcss + 1e-8 * max(1.0, abs(prev_wcss)), "WCSS increased"
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        prev_wcss = wcss
    return labels, centers


# ---------------------------------------------------------------------------
# labeled-CSV templates
# ---------------------------------------------------------------------------

def read_labeled_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a header + numeric-features + final-integer-class CSV."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise InvalidInputError(f"{path}: empty CSV")
        rows = [row for row in reader if row]
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    try:
        table = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise InvalidInputError(f"{path}: non-numeric cell: {exc}") from exc
    return table[:, :-1], table[:, -1].astype(int)


def template_from_labeled_data(features: np.ndarray, classes: np.ndarray) -> MixtureParams:
    """Fit one Gaussian per class with equal mixing weights.

    The per-class covariance is the maximum-likelihood (biased) estimate, the
    same convention the EM M-step uses.
    """
    features = np.asarray(features, dtype=float)
    ids = np.unique(classes)
    comps = []
    for cid in ids:
        block = features[classes == cid]
        if block.shape[0] < features.shape[1] + 1:
            raise InvalidInputError(f"class {cid} has too few rows to fit a covariance")
        mean = block.mean(axis=0)
        centered = block - mean
        cov = centered.T @ centered / block.shape[0]
        cov = (cov + cov.T) / 2.0
        comps.append(Gaussian(mean, cov))
    g = len(ids)
    return MixtureParams(np.full(g, 1.0 / g), tuple(comps))
