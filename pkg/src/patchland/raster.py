"""Raster cubes, label maps, and patch extraction.

Arrays are always laid out ``[row][col][band]``. Cubes are stored as
float32, label maps as uint16 with 0 meaning "no reference class".
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from patchland.errors import DataError

CUBE_MAGIC = "cube1"
LABEL_MAGIC = "lbl1"
_CUBE_DTYPE = np.dtype("<f4")
_LABEL_DTYPE = np.dtype("<u2")


@dataclass(frozen=True)
class RasterCube:
    """A rows x cols x bands grid of reflectance values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise DataError(f"cube must be 3-D (rows, cols, bands), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("cube contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class ids; 0 marks pixels without reference information."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise DataError(f"label map must be 2-D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > np.iinfo(np.uint16).max):
            raise DataError("labels must fit in an unsigned 16-bit integer")
        lab = lab.astype(np.uint16)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]

    @property
    def class_ids(self) -> tuple[int, ...]:
        ids = np.unique(self.labels)
        return tuple(int(c) for c in ids if c != 0)


class BorderPolicy(str, Enum):
    SKIP = "skip"
    MIRROR = "mirror"


@dataclass(frozen=True)
class PatchSpec:
    p: int
    border_policy: BorderPolicy = BorderPolicy.SKIP

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1 or self.p % 2 == 0:
            raise DataError(f"patch size must be an odd positive integer, got {self.p}")
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "border_policy", BorderPolicy(self.border_policy))

    @property
    def half(self) -> int:
        return self.p // 2


@dataclass(frozen=True)
class Patch:
    values: np.ndarray
    center_label: int
    coord: tuple[int, int]

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class PatchDataset:
    """Patches stacked as an (n, p, p, bands) array with their center labels.

    ``coords`` holds the (row, col) of each patch center in the source image.
    ``class_ids`` is the sorted label set of the population the dataset was
    drawn from, so splits keep the full class list even if a subset is small.
    """

    patches: np.ndarray
    labels: np.ndarray
    coords: np.ndarray
    class_ids: tuple[int, ...]

    def __post_init__(self):
        if self.patches.ndim != 4:
            raise DataError("patches must be an (n, p, p, bands) array")
        n = self.patches.shape[0]
        if self.labels.shape != (n,) or self.coords.shape != (n, 2):
            raise DataError("patches, labels and coords disagree on sample count")

    def __len__(self) -> int:
        return self.patches.shape[0]

    def __getitem__(self, i: int) -> Patch:
        return Patch(self.patches[i], int(self.labels[i]), (int(self.coords[i, 0]), int(self.coords[i, 1])))

    @property
    def p(self) -> int:
        return self.patches.shape[1]

    @property
    def bands(self) -> int:
        return self.patches.shape[3]

    @property
    def class_count(self) -> int:
        return len(self.class_ids)

    def features(self) -> np.ndarray:
        """Flattened (n, p*p*bands) matrix for the SVM and MLP paths."""
        return self.patches.reshape(len(self), -1)

    def subset(self, idx: np.ndarray) -> "PatchDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return PatchDataset(self.patches[idx], self.labels[idx], self.coords[idx], self.class_ids)


@dataclass(frozen=True)
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray
    constant: np.ndarray = field(init=False)

    def __post_init__(self):
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DataError("minimum and maximum must be 1-D arrays of equal length")
        if np.any(hi < lo):
            raise DataError("band maximum below minimum")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)
        object.__setattr__(self, "constant", hi == lo)

    @property
    def bands(self) -> int:
        return self.minimum.shape[0]

    def to_json(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "NormalizationStats":
        return cls(np.array(doc["min"], dtype=np.float64), np.array(doc["max"], dtype=np.float64))


# --- file formats -----------------------------------------------------------


def _write_container(path, magic: str, shape: tuple[int, int, int], dtype: str, payload: bytes) -> None:
    rows, cols, bands = shape
    header = {"magic": magic, "rows": rows, "cols": cols, "bands": bands, "dtype": dtype}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def _read_container(path, magic: str, dtype: str) -> tuple[dict, bytes]:
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise DataError(f"{path}: expected magic {magic!r}")
    if header.get("dtype") != dtype:
        raise DataError(f"{path}: expected dtype {dtype!r}, got {header.get('dtype')!r}")
    for key in ("rows", "cols", "bands"):
        val = header.get(key)
        if not isinstance(val, int) or isinstance(val, bool) or val < 0:
            raise DataError(f"{path}: header field {key!r} must be a non-negative integer")
    return header, blob[nl + 1:]


def write_cube(path, cube: RasterCube) -> None:
    payload = np.ascontiguousarray(cube.values, dtype=_CUBE_DTYPE).tobytes()
    _write_container(path, CUBE_MAGIC, cube.shape, "f32le", payload)


def load_cube(path) -> RasterCube:
    header, payload = _read_container(path, CUBE_MAGIC, "f32le")
    shape = (header["rows"], header["cols"], header["bands"])
    expected = shape[0] * shape[1] * shape[2] * _CUBE_DTYPE.itemsize
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype=_CUBE_DTYPE).reshape(shape)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: cube contains non-finite values")
    return RasterCube(values.astype(np.float32))


def write_labels(path, labels: LabelMap) -> None:
    payload = np.ascontiguousarray(labels.labels, dtype=_LABEL_DTYPE).tobytes()
    _write_container(path, LABEL_MAGIC, (labels.rows, labels.cols, 1), "u16le", payload)


def load_labels(path) -> LabelMap:
    header, payload = _read_container(path, LABEL_MAGIC, "u16le")
    if header["bands"] != 1:
        raise DataError(f"{path}: label maps must have bands=1")
    shape = (header["rows"], header["cols"])
    expected = shape[0] * shape[1] * _LABEL_DTYPE.itemsize
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    return LabelMap(np.frombuffer(payload, dtype=_LABEL_DTYPE).reshape(shape))


# --- preprocessing ----------------------------------------------------------


def parse_band_ranges(text: str) -> list[tuple[int, int]]:
    """Parse ``"1-5,196-207,285-320"`` into inclusive 1-based ranges."""
    ranges = []
    for part in filter(None, (s.strip() for s in text.split(","))):
        m = re.fullmatch(r"(\d+)(?:\s*-\s*(\d+))?", part)
        if not m:
            raise DataError(f"bad band range {part!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) else lo
        ranges.append((lo, hi))
    return ranges


def exclude_bands(cube: RasterCube, drop: Iterable[Sequence[int]]) -> RasterCube:
    """Remove 1-based inclusive band ranges, keeping surviving bands in order."""
    drop = sorted((int(lo), int(hi)) for lo, hi in drop)
    mask = np.ones(cube.bands, dtype=bool)
    prev_hi = 0
    for lo, hi in drop:
        if lo < 1 or hi > cube.bands or lo > hi:
            raise DataError(f"band range {lo}-{hi} outside 1..{cube.bands}")
        if lo <= prev_hi:
            raise DataError(f"band range {lo}-{hi} overlaps a previous range")
        mask[lo - 1:hi] = False
        prev_hi = hi
    if not mask.any():
        raise DataError("every band would be dropped")
    if mask.all():
        return cube
    return RasterCube(cube.values[:, :, mask])


def _check_dims(cube: RasterCube, labels: LabelMap) -> None:
    if (cube.rows, cube.cols) != (labels.rows, labels.cols):
        raise DataError(
            f"cube is {cube.rows}x{cube.cols} but label map is {labels.rows}x{labels.cols}"
        )


def compute_stats(cube: RasterCube, labels: LabelMap) -> NormalizationStats:
    """Per-band min/max over pixels with a non-zero label."""
    _check_dims(cube, labels)
    mask = labels.labels != 0
    if not mask.any():
        raise DataError("label map has no labeled pixels")
    pix = cube.values[mask].astype(np.float64)
    return NormalizationStats(pix.min(axis=0), pix.max(axis=0))


def normalize_array(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Min-max scale along the last (band) axis and clamp to [0, 1]."""
    values = np.asarray(values)
    if values.shape[-1] != stats.bands:
        raise DataError(f"expected {stats.bands} bands, got {values.shape[-1]}")
    span = np.where(stats.constant, 1.0, stats.maximum - stats.minimum)
    out = (values.astype(np.float64) - stats.minimum) / span
    out = np.clip(out, 0.0, 1.0)
    out[..., stats.constant] = 0.0
    return out.astype(np.float32)


def normalize(cube: RasterCube, stats: NormalizationStats) -> RasterCube:
    return RasterCube(normalize_array(cube.values, stats))


# --- patches ----------------------------------------------------------------


def pad_cube(values: np.ndarray, half: int) -> np.ndarray:
    """Mirror-pad the spatial axes; the edge pixel is repeated (``abc|cba``)."""
    if half == 0:
        return values
    return np.pad(values, ((half, half), (half, half), (0, 0)), mode="symmetric")


def _windows(values: np.ndarray, p: int) -> np.ndarray:
    # (rows-p+1, cols-p+1, bands, p, p) view -> index [r, c] gives window at top-left (r, c)
    return np.lib.stride_tricks.sliding_window_view(values, (p, p), axis=(0, 1))


def window_at(padded: np.ndarray, row: int, col: int, p: int) -> np.ndarray:
    return padded[row:row + p, col:col + p, :]


def extract_patches(cube: RasterCube, labels: LabelMap, spec: PatchSpec) -> PatchDataset:
    """Cut one p x p x bands patch around every labeled pixel.

    With ``skip`` only centers whose full window lies inside the image are
    used; with ``mirror`` every labeled pixel is used and the image is
    mirror-padded. Patches come out in row-major order of their centers.
    """
    _check_dims(cube, labels)
    h = spec.half
    lab = labels.labels
    valid = lab != 0
    if spec.border_policy is BorderPolicy.SKIP:
        inner = np.zeros_like(valid)
        inner[h:lab.shape[0] - h, h:lab.shape[1] - h] = True
        valid &= inner
        padded, offset = cube.values, -h
    else:
        padded, offset = pad_cube(cube.values, h), 0
    rows, cols = np.nonzero(valid)
    if rows.size == 0:
        raise DataError(f"no labeled pixel admits a {spec.p}x{spec.p} patch")
    win = _windows(padded, spec.p)[rows + offset, cols + offset]
    patches = np.ascontiguousarray(win.transpose(0, 2, 3, 1), dtype=np.float32)
    return PatchDataset(
        patches=patches,
        labels=lab[rows, cols].astype(np.int64),
        coords=np.stack([rows, cols], axis=1).astype(np.int64),
        class_ids=labels.class_ids,
    )


def all_patches(values: np.ndarray, p: int, rows: np.ndarray) -> np.ndarray:
    """Mirror-padded patches for every pixel of the given image rows.

    Returns an array of shape (len(rows) * cols, p, p, bands).
    """
    h = p // 2
    padded = pad_cube(values, h)
    win = _windows(padded, p)[rows]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2).reshape(-1, p, p, values.shape[2]))


def flatten_patch(patch: Patch | np.ndarray) -> np.ndarray:
    values = patch.values if isinstance(patch, Patch) else np.asarray(patch)
    return values.reshape(-1)


def unflatten_patch(vector: np.ndarray, p: int, bands: int) -> np.ndarray:
    return np.asarray(vector).reshape(p, p, bands)


def split_dataset(ds: PatchDataset, train_fraction: float, seed: int) -> tuple[PatchDataset, PatchDataset]:
    """Stratified random split.

    Each class contributes ``max(1, floor(train_fraction * n_c))`` samples to
    the training side. Both halves keep the source ordering.
    """
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in sorted(set(int(v) for v in ds.labels)):
        members = np.flatnonzero(ds.labels == c)
        if members.size < 2:
            raise DataError(f"class {c} has {members.size} sample(s); at least 2 are needed to split")
        n_train = max(1, int(np.floor(train_fraction * members.size)))
        perm = rng.permutation(members)
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return ds.subset(train), ds.subset(test)


def label_subset(labels: LabelMap, coords: np.ndarray) -> LabelMap:
    """Label map keeping only the given pixel coordinates, everything else 0."""
    out = np.zeros_like(labels.labels)
    coords = np.asarray(coords)
    out[coords[:, 0], coords[:, 1]] = labels.labels[coords[:, 0], coords[:, 1]]
    return LabelMap(out)
