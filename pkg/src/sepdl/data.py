"""Datasets: patch extraction, sharding, synthetic generation, file formats.

Grayscale images are plain 2-D float64 arrays with intensities nominally
in [0, 255]; noisy images produced by :func:`add_gaussian_noise` are
deliberately left unclipped, so values outside that range are legal at
operation boundaries (PGM output clips and rounds).

The on-disk container (``.sdl``) is a single UTF-8 JSON header line
terminated by a newline, followed by a raw little-endian float64 payload
in C (row-major) order.  Round trips are bit exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .linalg import ShapeMismatch
from .update import DictionaryPair, DictMode

FORMAT_VERSION = 1


class MalformedFile(ValueError):
    """File does not parse as the expected format."""


class UnsupportedMaxVal(MalformedFile):
    """PGM maxval other than 255."""


class VersionMismatch(MalformedFile):
    """Container written by an incompatible format version."""


class ImageTooSmall(ValueError):
    """Image smaller than the requested patch size."""


class TooManyNodes(ValueError):
    """More shards requested than samples available."""


class InvalidSparsity(ValueError):
    """Requested sparsity is outside [1, n1*n2]."""


@dataclass(frozen=True)
class PatchSet:
    """N square patches stored as a read-only (count, m, m) float64 array."""

    patches: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.patches, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise ShapeMismatch(f"patches must be (count, m, m), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("a patch set needs at least one patch")
        if not np.all(np.isfinite(arr)):
            raise ValueError("patches contain non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "patches", arr)

    @property
    def count(self) -> int:
        return self.patches.shape[0]

    @property
    def m(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True)
class Shard:
    """One worker's slice of a patch set: ordered global sample indices."""

    node_id: int
    sample_indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.sample_indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeMismatch("sample_indices must be 1-D")
        object.__setattr__(self, "sample_indices", idx)

    def __len__(self) -> int:
        return self.sample_indices.shape[0]


def extract_patches(img, m: int, stride: int) -> PatchSet:
    """All m x m patches on a stride grid, enumerated in row-major order."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"image must be 2-D, got shape {a.shape}")
    h, w = a.shape
    if m > min(h, w):
        raise ImageTooSmall(f"{h}x{w} image cannot hold {m}x{m} patches")
    if not 1 <= stride <= m:
        raise ValueError(f"stride must be in [1, m], got {stride}")
    windows = np.lib.stride_tricks.sliding_window_view(a, (m, m))
    grid = windows[::stride, ::stride]
    return PatchSet(grid.reshape(-1, m, m).copy())


def shard_dataset(pset: PatchSet, p: int, seed: int) -> list[Shard]:
    """Shuffle sample indices (seeded) and split them as evenly as possible.

    Shard sizes differ by at most one; together the shards partition
    [0, N).  Deterministic for a fixed seed and independent of p in the
    sense that different p values split the same shuffled sequence.
    """
    n = pset.count
    if not 1 <= p <= n:
        raise TooManyNodes(f"cannot split {n} samples across {p} nodes")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n).astype(np.int64)
    bounds = [(i * n) // p for i in range(p + 1)]
    return [Shard(i, perm[bounds[i]:bounds[i + 1]]) for i in range(p)]


def synth_separable(
    seed: int,
    count: int,
    m: int,
    n1: int,
    n2: int,
    s: int,
    noise_sigma: float,
    *,
    orthonormal: bool = False,
):
    """Synthetic separable dataset with known ground truth.

    Draws seeded Gaussian dictionaries (unit columns; orthonormalized via
    the polar factor when ``orthonormal``), codes with exactly ``s``
    nonzeros at uniformly drawn distinct positions and standard normal
    values, and patches ``left @ X @ right.T`` plus optional Gaussian
    noise.  Returns ``(PatchSet, DictionaryPair, list[SparseCode])``.
    """
    from .coding import SparseCode
    from .linalg import polar_factor

    if not 1 <= s <= n1 * n2:
        raise InvalidSparsity(f"s={s} not in [1, {n1 * n2}]")
    if orthonormal and not (n1 == m and n2 == m):
        raise ShapeMismatch("orthonormal ground truth requires n1 = n2 = m")
    rng = np.random.default_rng(seed)
    d1 = rng.standard_normal((m, n1))
    d2 = rng.standard_normal((m, n2))
    if orthonormal:
        d1, d2 = polar_factor(d1), polar_factor(d2)
        pair = DictionaryPair(DictMode.ORTHONORMAL, d1, d2)
    else:
        d1 /= np.linalg.norm(d1, axis=0)
        d2 /= np.linalg.norm(d2, axis=0)
        pair = DictionaryPair(DictMode.GENERAL, d1, d2)

    codes = []
    patches = np.empty((count, m, m))
    for k in range(count):
        flat = rng.choice(n1 * n2, size=s, replace=False)
        vals = rng.standard_normal(s)
        while np.any(vals == 0.0):  # standard normal, so essentially never
            vals = rng.standard_normal(s)
        rows, cols = np.divmod(flat, n2)
        code = SparseCode(n1, n2, rows, cols, vals)
        codes.append(code)
        patches[k] = d1 @ code.to_dense() @ d2.T
    if noise_sigma > 0:
        patches += noise_sigma * rng.standard_normal(patches.shape)
    return PatchSet(patches), pair, codes


def add_gaussian_noise(img, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) per pixel.  Deliberately not clipped."""
    a = np.asarray(img, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return a.copy()
    rng = np.random.default_rng(seed)
    return a + sigma * rng.standard_normal(a.shape)


# ---------------------------------------------------------------------------
# PGM (binary P5, 8-bit only)

def load_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5) file as a float64 image."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] not in (0x0A, 0x0D):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedFile("truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise MalformedFile(f"not a binary PGM: magic {fields[0]!r}")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise MalformedFile("non-numeric PGM header field") from exc
    if maxval != 255:
        raise UnsupportedMaxVal(f"only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise MalformedFile("empty image")
    pos += 1  # single whitespace after maxval
    payload = data[pos:pos + width * height]
    if len(payload) != width * height:
        raise MalformedFile(
            f"payload holds {len(payload)} bytes, expected {width * height}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64)


def save_pgm(img, path) -> None:
    """Write a float image as binary 8-bit PGM, rounding and clipping."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"image must be 2-D, got shape {a.shape}")
    pixels = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))


# ---------------------------------------------------------------------------
# .sdl container: one JSON header line + raw little-endian float64 payload

def _write_container(path, header: dict, arrays: list[np.ndarray]) -> None:
    header = {"format": "sdl", "version": FORMAT_VERSION, **header}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C"))


def _read_container(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"bad container header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != "sdl":
        raise MalformedFile("missing sdl header")
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"container version {header.get('version')}, expected {FORMAT_VERSION}"
        )
    if len(payload) % 8 != 0:
        raise MalformedFile("payload is not a whole number of float64 values")
    return header, np.frombuffer(payload, dtype="<f8")


def save_patchset(pset: PatchSet, path) -> None:
    _write_container(
        path,
        {"kind": "patchset", "dtype": "<f8", "order": "C",
         "shape": [pset.count, pset.m, pset.m]},
        [pset.patches],
    )


def load_patchset(path) -> PatchSet:
    header, flat = _read_container(path)
    if header.get("kind") != "patchset":
        raise MalformedFile(f"expected a patchset container, got {header.get('kind')!r}")
    shape = header.get("shape")
    if (
        not isinstance(shape, list) or len(shape) != 3
        or any(not isinstance(v, int) or v < 1 for v in shape)
    ):
        raise MalformedFile(f"bad patchset shape {shape!r}")
    if flat.size != shape[0] * shape[1] * shape[2]:
        raise ShapeMismatch(
            f"payload holds {flat.size} values, header says {shape}"
        )
    return PatchSet(flat.reshape(shape))


def save_dict(pair: DictionaryPair, path) -> None:
    _write_container(
        path,
        {"kind": "dictionary_pair", "mode": pair.mode.value,
         "dtype": "<f8", "order": "C",
         "shape_left": [pair.m, pair.n1], "shape_right": [pair.m, pair.n2]},
        [pair.left, pair.right],
    )


def load_dict(path) -> DictionaryPair:
    header, flat = _read_container(path)
    if header.get("kind") != "dictionary_pair":
        raise MalformedFile(
            f"expected a dictionary container, got {header.get('kind')!r}"
        )
    try:
        mode = DictMode(header.get("mode"))
    except ValueError as exc:
        raise MalformedFile(f"unknown dictionary mode {header.get('mode')!r}") from exc
    sl, sr = header.get("shape_left"), header.get("shape_right")
    for shape in (sl, sr):
        if (
            not isinstance(shape, list) or len(shape) != 2
            or any(not isinstance(v, int) or v < 1 for v in shape)
        ):
            raise MalformedFile(f"bad dictionary shape {shape!r}")
    n_left = sl[0] * sl[1]
    if flat.size != n_left + sr[0] * sr[1]:
        raise ShapeMismatch(
            f"payload holds {flat.size} values, header says {sl} + {sr}"
        )
    left = flat[:n_left].reshape(sl)
    right = flat[n_left:].reshape(sr)
    return DictionaryPair(mode, left, right)
