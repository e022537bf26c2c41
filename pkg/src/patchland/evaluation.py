"""Accuracy assessment and classified-map production."""

from __future__ import annotations

import colorsys
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from patchland.errors import DataError
from patchland.raster import LabelMap, PatchSpec, RasterCube, all_patches


class PatchClassifier(Protocol):
    def predict_patches(self, patches: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are reference classes, columns predicted classes."""

    counts: np.ndarray
    class_ids: tuple[int, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_recall(self) -> dict[int, float]:
        rows = self.counts.sum(axis=1)
        return {
            c: (float(self.counts[i, i] / rows[i]) if rows[i] else float("nan"))
            for i, c in enumerate(self.class_ids)
        }

    def to_json(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def confusion(predictions: Sequence[int], truth: Sequence[int], class_ids: Sequence[int] | None = None) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    ref = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != ref.shape:
        raise DataError(f"{pred.size} predictions for {ref.size} reference labels")
    if class_ids is None:
        class_ids = np.unique(np.concatenate([pred, ref]))
    class_ids = tuple(int(c) for c in class_ids)
    lut = {c: i for i, c in enumerate(class_ids)}
    unknown = set(np.unique(np.concatenate([pred, ref])).tolist()) - set(lut)
    if unknown:
        raise DataError(f"labels {sorted(unknown)} are not among class ids {class_ids}")
    k = len(class_ids)
    ri = np.array([lut[v] for v in ref.tolist()], dtype=np.int64)
    pi = np.array([lut[v] for v in pred.tolist()], dtype=np.int64)
    counts = np.bincount(ri * k + pi, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts, class_ids)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Percentage of samples on the diagonal."""
    total = cm.total
    if total == 0:
        raise DataError("overall accuracy of an empty confusion matrix is undefined")
    return 100.0 * float(np.trace(cm.counts)) / total


def classify_scene(cube: RasterCube, model: PatchClassifier, spec: PatchSpec, threads: int = 1, chunk_rows: int = 8) -> LabelMap:
    """Classify every pixel using a mirror-padded p x p window around it."""
    rows = np.arange(cube.rows)
    chunks = [rows[i:i + chunk_rows] for i in range(0, cube.rows, chunk_rows)]

    def run(chunk):
        patches = all_patches(cube.values, spec.p, chunk)
        return np.asarray(model.predict_patches(patches)).reshape(len(chunk), cube.cols)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    out = np.concatenate(parts, axis=0)
    if np.any(out == 0):
        raise DataError("classifier produced the reserved label 0")
    return LabelMap(out)


# --- palettes and PPM ---------------------------------------------------------

Palette = dict[int, tuple[int, int, int]]


def default_palette(class_ids: Sequence[int]) -> Palette:
    """Golden-ratio hue stepping per class id; 0 is black."""
    pal: Palette = {0: (0, 0, 0)}
    for c in sorted(int(c) for c in class_ids if c != 0):
        hue = (c * 0.618033988749895) % 1.0
        value = 0.95 if c % 2 else 0.75
        r, g, b = colorsys.hsv_to_rgb(hue, 0.8, value)
        pal[c] = (round(r * 255), round(g * 255), round(b * 255))
    colors = list(pal.values())
    if len(set(colors)) != len(colors):
        raise DataError("default palette produced duplicate colors; supply a palette file")
    return pal


def read_palette(path) -> Palette:
    pal: Palette = {0: (0, 0, 0)}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].strip().startswith("#"):
                continue
            if row[0].strip() == "class_id":
                continue
            try:
                c, r, g, b = (int(v) for v in row)
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected 'class_id,r,g,b'") from None
            if not all(0 <= v <= 255 for v in (r, g, b)):
                raise DataError(f"{path}:{lineno}: color components must be 0..255")
            pal[c] = (r, g, b)
    return pal


def write_palette(path, palette: Palette) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for c in sorted(palette):
            w.writerow([c, *palette[c]])


def render_map(labels: LabelMap, palette: Palette) -> bytes:
    """Binary PPM (P6, maxval 255) of a label map."""
    present = np.unique(labels.labels)
    missing = [int(c) for c in present if int(c) not in palette]
    if missing:
        raise DataError(f"palette has no color for classes {missing}")
    lut = np.zeros((int(present.max()) + 1, 3), dtype=np.uint8)
    for c in present:
        lut[int(c)] = palette[int(c)]
    pixels = lut[labels.labels]
    header = f"P6\n{labels.cols} {labels.rows}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def metrics_document(classifier: str, p: int, seed: int, cm: ConfusionMatrix, train_size: int, test_size: int) -> dict:
    return {
        "classifier": classifier,
        "p": p,
        "seed": seed,
        "overall_accuracy": overall_accuracy(cm),
        "confusion": cm.to_json(),
        "class_ids": list(cm.class_ids),
        "train_size": train_size,
        "test_size": test_size,
    }
