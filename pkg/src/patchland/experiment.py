"""Train/test pipeline shared by the CLI and the patch-size sweep.

Normalization statistics come from the training split only and travel with
the trained model, so scoring a scene never sees test-set statistics.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from patchland.cnn import CnnModel, train_cnn
from patchland.config import RunConfig
from patchland.errors import ConfigError, DataError
from patchland.evaluation import confusion, metrics_document
from patchland.nn import MlpModel, train_mlp
from patchland.raster import (
    LabelMap,
    NormalizationStats,
    PatchDataset,
    PatchSpec,
    RasterCube,
    compute_stats,
    exclude_bands,
    extract_patches,
    label_subset,
    normalize_array,
    split_dataset,
)
from patchland.svm import SvmModel, train_ovo

logger = logging.getLogger(__name__)

MODEL_FORMAT = "patchland-model1"
SWEEP_HEADER = ["classifier", "patch_size", "accuracy_pct", "train_n", "test_n", "seed", "seconds"]


@dataclass
class TrainedModel:
    """A classifier together with everything needed to score raw patches."""

    kind: str
    model: SvmModel | MlpModel | CnnModel
    patch_size: int
    bands: int
    stats: NormalizationStats
    exclude_bands: list[tuple[int, int]]
    seed: int
    train_fraction: float
    class_ids: tuple[int, ...]

    def prepare_cube(self, cube: RasterCube) -> RasterCube:
        cube = exclude_bands(cube, self.exclude_bands) if self.exclude_bands else cube
        if cube.bands != self.bands:
            raise DataError(f"model expects {self.bands} bands, cube has {cube.bands}")
        return cube

    def predict_patches(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches)
        if patches.shape[1:] != (self.patch_size, self.patch_size, self.bands):
            raise DataError(
                f"model expects {self.patch_size}x{self.patch_size}x{self.bands} patches, got {patches.shape[1:]}"
            )
        return self.model.predict_patches(normalize_array(patches, self.stats))

    def to_json(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "kind": self.kind,
            "patch_size": self.patch_size,
            "bands": self.bands,
            "exclude_bands": [list(r) for r in self.exclude_bands],
            "stats": self.stats.to_json(),
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "class_ids": list(self.class_ids),
            "model": self.model.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainedModel":
        if doc.get("format") != MODEL_FORMAT:
            raise DataError(f"not a {MODEL_FORMAT} document")
        loaders = {"svm": SvmModel.from_json, "nn": MlpModel.from_json, "cnn": CnnModel.from_json}
        kind = doc["kind"]
        if kind not in loaders:
            raise DataError(f"unknown model kind {kind!r}")
        return cls(
            kind=kind,
            model=loaders[kind](doc["model"]),
            patch_size=int(doc["patch_size"]),
            bands=int(doc["bands"]),
            stats=NormalizationStats.from_json(doc["stats"]),
            exclude_bands=[(int(a), int(b)) for a, b in doc["exclude_bands"]],
            seed=int(doc["seed"]),
            train_fraction=float(doc["train_fraction"]),
            class_ids=tuple(int(c) for c in doc["class_ids"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"no such model file: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: {exc}") from None
        return cls.from_json(doc)


@dataclass
class Prepared:
    train: PatchDataset
    test: PatchDataset
    stats: NormalizationStats


def prepare(cube: RasterCube, labels: LabelMap, spec: PatchSpec, train_fraction: float, seed: int) -> Prepared:
    """Extract patches from the raw cube, split, and derive scaling from training centers."""
    ds = extract_patches(cube, labels, spec)
    train, test = split_dataset(ds, train_fraction, seed)
    stats = compute_stats(cube, label_subset(labels, train.coords))
    return Prepared(train, test, stats)


def fit(cfg: RunConfig, kind: str, prep: Prepared, exclude: list[tuple[int, int]] | None = None) -> TrainedModel:
    train = prep.train
    X = normalize_array(train.patches, prep.stats)
    class_ids = train.class_ids
    if kind == "svm":
        model = train_ovo(X.reshape(len(train), -1), train.labels, cfg.svm, cfg.seed, cfg.threads, class_ids)
    elif kind == "nn":
        model, _ = train_mlp(
            X.reshape(len(train), -1), train.labels, cfg.nn.hidden, cfg.nn.train, class_ids, max_steps=cfg.max_steps
        )
    elif kind == "cnn":
        model, _ = train_cnn(X, train.labels, cfg.cnn.train, cfg.cnn.arch, class_ids, max_steps=cfg.max_steps)
    else:
        raise ConfigError(f"unknown classifier {kind!r}")
    return TrainedModel(
        kind=kind,
        model=model,
        patch_size=train.p,
        bands=train.bands,
        stats=prep.stats,
        exclude_bands=list(exclude if exclude is not None else cfg.exclude_bands),
        seed=cfg.seed,
        train_fraction=cfg.train_fraction,
        class_ids=class_ids,
    )


def evaluate(tm: TrainedModel, ds: PatchDataset, train_size: int) -> dict:
    pred = tm.predict_patches(ds.patches)
    cm = confusion(pred, ds.labels, tm.class_ids)
    return metrics_document(tm.kind, tm.patch_size, tm.seed, cm, train_size, len(ds))


# --- patch-size sweep -------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    classifier: str
    patch_size: int
    accuracy_pct: float
    train_n: int
    test_n: int
    seed: int
    seconds: float

    def as_csv(self) -> list[str]:
        return [
            self.classifier,
            str(self.patch_size),
            repr(self.accuracy_pct),
            str(self.train_n),
            str(self.test_n),
            str(self.seed),
            repr(self.seconds),
        ]

    @classmethod
    def from_csv(cls, row: dict) -> "SweepRow":
        return cls(
            classifier=row["classifier"],
            patch_size=int(row["patch_size"]),
            accuracy_pct=float(row["accuracy_pct"]),
            train_n=int(row["train_n"]),
            test_n=int(row["test_n"]),
            seed=int(row["seed"]),
            seconds=float(row["seconds"]),
        )


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_HEADER)
            for r in self.rows:
                w.writerow(r.as_csv())

    @classmethod
    def read_csv(cls, path) -> "SweepResult":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != SWEEP_HEADER:
                raise DataError(f"{path}: unexpected sweep header {reader.fieldnames}")
            return cls([SweepRow.from_csv(r) for r in reader])

    def best(self) -> dict[str, SweepRow]:
        """Highest-accuracy row per classifier (first p wins ties)."""
        out: dict[str, SweepRow] = {}
        for r in self.rows:
            if r.classifier not in out or r.accuracy_pct > out[r.classifier].accuracy_pct:
                out[r.classifier] = r
        return out

    def spread(self) -> dict[str, float]:
        """Max minus min accuracy across patch sizes, per classifier."""
        acc: dict[str, list[float]] = {}
        for r in self.rows:
            acc.setdefault(r.classifier, []).append(r.accuracy_pct)
        return {k: max(v) - min(v) for k, v in acc.items()}



def sweep_patch_sizes(
    cube: RasterCube,
    labels: LabelMap,
    cfg: RunConfig,
    classifiers: Iterable[str],
    p_list: Iterable[int],
    on_result: Callable[[SweepRow, dict], None] | None = None,
) -> SweepResult:
    """Train and test every classifier at every patch size.

    For a given p all classifiers see the same seeded split. ``on_result``
    is called after each (classifier, p) run with its row and metrics.
    """
    classifiers = list(classifiers)
    rows = []
    for p in p_list:
        prep = prepare(cube, labels, PatchSpec(p, cfg.border_policy), cfg.train_fraction, cfg.seed)
        for kind in classifiers:
            t0 = time.perf_counter()
            tm = fit(cfg, kind, prep)
            metrics = evaluate(tm, prep.test, len(prep.train))
            row = SweepRow(
                classifier=kind,
                patch_size=p,
                accuracy_pct=metrics["overall_accuracy"],
                train_n=len(prep.train),
                test_n=len(prep.test),
                seed=cfg.seed,
                seconds=time.perf_counter() - t0,
            )
            logger.info("%s p=%d: %.2f%%", kind, p, row.accuracy_pct)
            rows.append(row)
            if on_result is not None:
                on_result(row, metrics)
    return SweepResult(rows)

