"""Seeded synthetic scenes: rectangular fields of known class on a background.

Each labeled pixel gets its class mean spectrum plus Gaussian noise. A
``salt_pepper_rate`` fraction of labeled pixels instead receives the spectrum
of a different class while keeping its true label, which is the situation
where a pixel's neighbourhood carries more evidence than the pixel itself.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from patchland.errors import ConfigError, DataError
from patchland.raster import LabelMap, RasterCube, write_cube, write_labels


@dataclass
class SceneSpec:
    rows: int = 64
    cols: int = 64
    bands: int = 8
    class_count: int = 4
    field_count: int = 12
    class_means: list[list[float]] | None = None
    noise_sigma: float = 0.05
    salt_pepper_rate: float = 0.0
    seed: int = 0
    min_field: int | None = None
    max_field: int | None = None
    max_retries: int = 2000

    def __post_init__(self):
        if min(self.rows, self.cols, self.bands) < 1:
            raise ConfigError("rows, cols and bands must be positive")
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if self.field_count < self.class_count:
            raise ConfigError("field_count must be >= class_count so every class owns a field")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0.0 <= self.salt_pepper_rate < 1.0:
            raise ConfigError("salt_pepper_rate must lie in [0, 1)")
        if self.salt_pepper_rate > 0 and self.class_count < 2:
            raise ConfigError("spectrum swapping needs at least two classes")
        side = min(self.rows, self.cols)
        if self.min_field is None:
            self.min_field = max(1, side // 8)
        if self.max_field is None:
            self.max_field = max(self.min_field, side // 3)
        if not 1 <= self.min_field <= self.max_field:
            raise ConfigError("need 1 <= min_field <= max_field")
        if self.class_means is not None:
            means = np.asarray(self.class_means, dtype=np.float64)
            if means.shape != (self.class_count, self.bands):
                raise ConfigError(f"class_means must be {self.class_count}x{self.bands}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SceneSpec":
        doc = {k: v for k, v in doc.items() if k != "placement"}
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown scene fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class Field:
    top: int
    left: int
    height: int
    width: int
    class_id: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def overlaps(self, other: "Field") -> bool:
        return not (
            self.top + self.height <= other.top
            or other.top + other.height <= self.top
            or self.left + self.width <= other.left
            or other.left + other.width <= self.left
        )


@dataclass
class SyntheticScene:
    cube: RasterCube
    labels: LabelMap
    fields: list[Field]
    class_means: np.ndarray
    swapped: np.ndarray = field(repr=False)  # bool mask of spectrum-swapped pixels


def _place_fields(spec: SceneSpec, rng: np.random.Generator) -> list[Field]:
    placed: list[Field] = []
    for i in range(spec.field_count):
        cls = i + 1 if i < spec.class_count else int(rng.integers(1, spec.class_count + 1))
        for _ in range(spec.max_retries):
            h = int(rng.integers(spec.min_field, min(spec.max_field, spec.rows) + 1))
            w = int(rng.integers(spec.min_field, min(spec.max_field, spec.cols) + 1))
            cand = Field(int(rng.integers(0, spec.rows - h + 1)), int(rng.integers(0, spec.cols - w + 1)), h, w, cls)
            if not any(cand.overlaps(f) for f in placed):
                placed.append(cand)
                break
        else:
            raise DataError(f"could not place field {i + 1} of {spec.field_count} without overlap")
    return placed


def synthesize(spec: SceneSpec) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    K, B = spec.class_count, spec.bands
    # always draw, so that explicit means leave the rest of the stream unchanged
    means = rng.uniform(0.1, 0.9, size=(K, B))
    if spec.class_means is not None:
        means = np.asarray(spec.class_means, dtype=np.float64)
    background = rng.uniform(0.1, 0.9, size=B)

    fields = _place_fields(spec, rng)
    labels = np.zeros((spec.rows, spec.cols), dtype=np.uint16)
    for f in fields:
        labels[f.top:f.top + f.height, f.left:f.left + f.width] = f.class_id

    source = labels.astype(np.int64)  # class whose spectrum a pixel shows; 0 = background
    labeled = labels > 0
    swapped = np.zeros_like(labeled)
    if spec.salt_pepper_rate > 0:
        swapped = labeled & (rng.random(labels.shape) < spec.salt_pepper_rate)
        # shift by 1..K-1 so the donor class always differs from the true one
        shift = rng.integers(1, K, size=labels.shape)
        donor = (source - 1 + shift) % K + 1
        source = np.where(swapped, donor, source)

    table = np.vstack([background, means])
    values = table[source]
    if spec.noise_sigma > 0:
        values = values + rng.normal(0.0, spec.noise_sigma, size=values.shape)
    return SyntheticScene(RasterCube(values.astype(np.float32)), LabelMap(labels), fields, means, swapped)


def generate_scene(spec: SceneSpec) -> tuple[RasterCube, LabelMap]:
    scene = synthesize(spec)
    return scene.cube, scene.labels


def write_scene(scene: SyntheticScene, spec: SceneSpec, cube_path, labels_path, sidecar_path) -> None:
    write_cube(cube_path, scene.cube)
    write_labels(labels_path, scene.labels)
    doc = spec.to_json()
    doc["class_means"] = scene.class_means.tolist()
    doc["placement"] = [asdict(f) for f in scene.fields]
    with open(sidecar_path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
