"""Run configuration and the published per-dataset parameter sets.

A run is described by one JSON document. ``"preset"`` pulls in a named
parameter set; explicit keys in the document override it, and ``--set``
overrides on the command line win over both.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from patchland.cnn import CnnArch
from patchland.errors import ConfigError
from patchland.nn import TrainConfig
from patchland.raster import BorderPolicy, PatchSpec, parse_band_ranges
from patchland.svm import SvmHyperparams

CLASSIFIERS = ("svm", "nn", "cnn")

# Bands dropped from the 425-band AVIRIS-NG cube because of striping.
AVIRIS_NG_BAD_BANDS = "1-5,196-207,285-320"

_NN_COMMON = {
    "hidden": [500, 350, 150],
    "learning_rate": 0.001,
    "batch_size": 128,
    "epochs": 2000,
    "optimizer": "adagrad",
}

PRESETS: dict[str, dict] = {
    "etm+": {
        "svm": {"C": 10.0, "gamma": 0.3},
        "nn": dict(_NN_COMMON),
        "cnn": {
            "filters": [500, 100],
            "fc_sizes": [200, 84],
            "kernel": 5,
            "learning_rate": 0.001,
            "batch_size": 128,
            "epochs": 2000,
            "optimizer": "adagrad",
        },
        # best patch size per classifier on this dataset
        "patch_sizes": {"cnn": 9, "svm": 5, "nn": 5},
    },
    "aviris-ng": {
        "svm": {"C": 30.0, "gamma": 3.0},
        "nn": dict(_NN_COMMON),
        "cnn": {
            "filters": [300, 200],
            "fc_sizes": [200, 84],
            "kernel": 5,
            "learning_rate": 0.001,
            "batch_size": 128,
            "epochs": 2000,
            "optimizer": "adagrad",
        },
        "patch_sizes": {"cnn": 7, "svm": 5, "nn": 5},
    },
}


@dataclass
class NnSettings:
    hidden: tuple[int, ...] = (500, 350, 150)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class CnnSettings:
    arch: CnnArch = field(default_factory=CnnArch)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class RunConfig:
    cube: str | None = None
    labels: str | None = None
    model: str | None = None
    out: str = "."
    palette: str | None = None
    classifier: str = "svm"
    classifiers: tuple[str, ...] = ()
    patch_size: int | None = None
    p_list: tuple[int, ...] = ()
    border_policy: BorderPolicy = BorderPolicy.SKIP
    train_fraction: float = 0.75
    seed: int = 0
    threads: int = 1
    exclude_bands: list[tuple[int, int]] = field(default_factory=list)
    max_steps: int | None = None
    preset: str | None = None
    svm: SvmHyperparams = field(default_factory=SvmHyperparams)
    nn: NnSettings = field(default_factory=NnSettings)
    cnn: CnnSettings = field(default_factory=CnnSettings)
    patch_sizes: dict = field(default_factory=dict)

    def patch_spec(self, classifier: str | None = None) -> PatchSpec:
        classifier = classifier or self.classifier
        p = self.patch_size if self.patch_size is not None else self.patch_sizes.get(classifier)
        if p is None:
            raise ConfigError("no patch_size given and the preset has none for " + classifier)
        return PatchSpec(p, self.border_policy)


_TOP_KEYS = {
    "cube", "labels", "model", "out", "palette", "classifier", "classifiers", "patch_size",
    "p_list", "border_policy", "train_fraction", "seed", "threads", "exclude_bands",
    "max_steps", "preset", "svm", "nn", "cnn", "patch_sizes",
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(doc: dict, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {part} is not a section")
    node[parts[-1]] = value


def _train_config(section: dict, seed: int, where: str) -> TrainConfig:
    allowed = {"learning_rate", "batch_size", "epochs", "optimizer", "adagrad_epsilon"}
    kwargs = {k: section[k] for k in allowed if k in section}
    try:
        return TrainConfig(seed=seed, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def build_config(doc: dict, base_dir: str | os.PathLike | None = None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    preset = doc.get("preset")
    if preset is not None:
        key = str(preset).lower()
        if key not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        doc = _deep_merge(PRESETS[key], doc)
    _check_keys(doc, _TOP_KEYS, "run config")

    def path(key):
        val = doc.get(key)
        if val is None:
            return None
        if base_dir is not None and not os.path.isabs(val):
            return str(Path(base_dir) / val)
        return str(val)

    try:
        seed = int(doc.get("seed", 0))
        svm_doc = doc.get("svm", {})
        _check_keys(svm_doc, {"C", "gamma", "tol", "max_passes"}, "svm")
        nn_doc = doc.get("nn", {})
        _check_keys(nn_doc, {"hidden", "learning_rate", "batch_size", "epochs", "optimizer", "adagrad_epsilon"}, "nn")
        cnn_doc = doc.get("cnn", {})
        _check_keys(
            cnn_doc,
            {"filters", "fc_sizes", "kernel", "learning_rate", "batch_size", "epochs", "optimizer", "adagrad_epsilon"},
            "cnn",
        )
        exclude = doc.get("exclude_bands", [])
        if isinstance(exclude, str):
            exclude = parse_band_ranges(exclude)
        cfg = RunConfig(
            cube=path("cube"),
            labels=path("labels"),
            model=path("model"),
            out=path("out") or ".",
            palette=path("palette"),
            classifier=str(doc.get("classifier", "svm")).lower(),
            classifiers=tuple(str(c).lower() for c in doc.get("classifiers", ())),
            patch_size=None if doc.get("patch_size") is None else int(doc["patch_size"]),
            p_list=tuple(int(p) for p in doc.get("p_list", ())),
            border_policy=BorderPolicy(doc.get("border_policy", "skip")),
            train_fraction=float(doc.get("train_fraction", 0.75)),
            seed=seed,
            threads=int(doc.get("threads", 1)),
            exclude_bands=[(int(a), int(b)) for a, b in exclude],
            max_steps=None if doc.get("max_steps") is None else int(doc["max_steps"]),
            preset=preset,
            svm=SvmHyperparams(**{k: (int(v) if k == "max_passes" else float(v)) for k, v in svm_doc.items()}),
            nn=NnSettings(
                hidden=tuple(int(h) for h in nn_doc.get("hidden", (500, 350, 150))),
                train=_train_config(nn_doc, seed, "nn"),
            ),
            cnn=CnnSettings(
                arch=CnnArch(
                    filters=tuple(int(f) for f in cnn_doc.get("filters", (500, 100))),
                    fc_sizes=tuple(int(s) for s in cnn_doc.get("fc_sizes", (200, 84))),
                    kernel=int(cnn_doc.get("kernel", 5)),
                ),
                train=_train_config(cnn_doc, seed, "cnn"),
            ),
            patch_sizes={str(k): int(v) for k, v in doc.get("patch_sizes", {}).items()},
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from None

    for c in (cfg.classifier, *cfg.classifiers):
        if c not in CLASSIFIERS:
            raise ConfigError(f"unknown classifier {c!r}; choose from {CLASSIFIERS}")
    if not 0.0 < cfg.train_fraction < 1.0:
        raise ConfigError("train_fraction must lie in (0, 1)")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    for p in cfg.p_list:
        if p < 1 or p % 2 == 0:
            raise ConfigError(f"patch sizes must be odd positive integers, got {p}")
    if cfg.patch_size is not None and (cfg.patch_size < 1 or cfg.patch_size % 2 == 0):
        raise ConfigError(f"patch_size must be an odd positive integer, got {cfg.patch_size}")
    return cfg


def load_config(path, overrides: list[str] = ()) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for o in overrides:
        apply_override(doc, o)
    return build_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))
