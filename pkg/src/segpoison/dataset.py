"""Segmentation datasets: in-memory representation, PNG/JSON I/O and a synthetic street-scene generator."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image


class DatasetError(ValueError):
    """Raised when a dataset on disk or in memory violates its invariants."""


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassTable:
    entries: tuple[ClassInfo, ...]

    def __post_init__(self) -> None:
        ids = [e.id for e in self.entries]
        if ids != list(range(len(ids))):
            raise DatasetError(f"class ids must be contiguous from 0, got {ids}")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DatasetError("class names must be unique")
        for e in self.entries:
            if len(e.color) != 3 or not all(0 <= c <= 255 for c in e.color):
                raise DatasetError(f"bad display color for class {e.name!r}: {e.color}")
        if len(ids) > 256:
            raise DatasetError("at most 256 classes fit an 8-bit mask")

    @classmethod
    def from_names(cls, names_colors: Iterable[tuple[str, tuple[int, int, int]]]) -> "ClassTable":
        return cls(tuple(ClassInfo(i, n, tuple(c)) for i, (n, c) in enumerate(names_colors)))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def id_of(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.id
        raise KeyError(name)

    def colors(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.uint8)

    def to_json(self) -> list[dict]:
        return [{"id": e.id, "name": e.name, "color": list(e.color)} for e in self.entries]

    @classmethod
    def from_json(cls, data: list[dict]) -> "ClassTable":
        try:
            entries = sorted(
                (ClassInfo(int(d["id"]), str(d["name"]), tuple(int(c) for c in d["color"])) for d in data),
                key=lambda e: e.id,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed class table: {exc}") from exc
        return cls(tuple(entries))


@dataclass(frozen=True)
class Sample:
    """One (image, mask) pair. ``image`` is HxWx3 uint8, ``mask`` is HxW uint8 class ids."""

    id: str
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"sample {self.id}: image must be HxWx3, got {self.image.shape}")
        if self.mask.ndim != 2 or self.mask.shape != self.image.shape[:2]:
            raise DatasetError(
                f"sample {self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} sizes differ"
            )
        if self.mask.size == 0:
            raise DatasetError(f"sample {self.id}: empty mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class DatasetManifest:
    classes: ClassTable
    samples: tuple[Sample, ...]
    root: Path | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        seen: set[str] = set()
        n = len(self.classes)
        for s in self.samples:
            if s.id in seen:
                raise DatasetError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.mask.size and int(s.mask.max()) >= n:
                raise DatasetError(
                    f"sample {s.id}: mask value {int(s.mask.max())} outside class table of {n} classes"
                )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        lookup = self.by_id()
        return DatasetManifest(self.classes, tuple(lookup[i] for i in ids))

    def slice(self, start: int, stop: int | None = None) -> "DatasetManifest":
        return DatasetManifest(self.classes, self.samples[start:stop])

    def replace_samples(self, samples: Iterable[Sample]) -> "DatasetManifest":
        return DatasetManifest(self.classes, tuple(samples))


# ---------------------------------------------------------------------------
# I/O


def _read_png(path: Path, mode: str, sample_id: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"sample {sample_id}: missing file {path}")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise DatasetError(f"sample {sample_id}: {path.name} has mode {im.mode}, expected {mode}")
            return np.array(im, dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"sample {sample_id}: cannot decode {path}: {exc}") from exc


def load_manifest(path: str | Path) -> DatasetManifest:
    root = Path(path)
    manifest_file = root / "manifest.json"
    if not manifest_file.is_file():
        raise DatasetError(f"missing {manifest_file}")
    try:
        data = json.loads(manifest_file.read_text())
        classes = ClassTable.from_json(data["classes"])
        entries = list(data["samples"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"malformed manifest {manifest_file}: {exc}") from exc

    samples = []
    for entry in entries:
        try:
            sid, img_rel, mask_rel = str(entry["id"]), entry["image"], entry["mask"]
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"malformed sample entry {entry!r}") from exc
        image = _read_png(root / img_rel, "RGB", sid)
        mask = _read_png(root / mask_rel, "L", sid)
        if int(mask.max()) >= len(classes):
            raise DatasetError(
                f"sample {sid}: mask value {int(mask.max())} outside class table of {len(classes)} classes"
            )
        samples.append(Sample(sid, image, mask))
    return DatasetManifest(classes, tuple(samples), root=root)


def write_dataset(manifest: DatasetManifest, path: str | Path) -> None:
    """Write ``manifest`` under ``path``; raises OSError on I/O failure."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in manifest.samples:
        img_rel, mask_rel = f"images/{s.id}.png", f"masks/{s.id}.png"
        Image.fromarray(np.ascontiguousarray(s.image, dtype=np.uint8), mode="RGB").save(root / img_rel)
        Image.fromarray(np.ascontiguousarray(s.mask, dtype=np.uint8), mode="L").save(root / mask_rel)
        entries.append({"id": s.id, "image": img_rel, "mask": mask_rel})
    doc = {"classes": manifest.classes.to_json(), "samples": entries}
    (root / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n")


def class_pixel_histogram(manifest: DatasetManifest) -> dict[int, int]:
    counts = np.zeros(256, dtype=np.int64)
    for s in manifest.samples:
        counts += np.bincount(s.mask.ravel(), minlength=256)
    return {int(c): int(counts[c]) for c in np.flatnonzero(counts)}


def sample_rng(seed: int, key: str | int, *purpose: int) -> np.random.Generator:
    """Independent generator for (seed, key); string keys are hashed with CRC32 so streams are stable."""
    k = key if isinstance(key, int) else zlib.crc32(key.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k, *purpose)))


# ---------------------------------------------------------------------------
# synthetic street scenes

BACKGROUND, ROAD, SIDEWALK, CAR, RIDER, BUILDING, VEGETATION, MOTORBIKE = range(8)

STREET_CLASSES = ClassTable.from_names(
    [
        ("background", (120, 170, 230)),
        ("road", (96, 96, 104)),
        ("sidewalk", (180, 150, 140)),
        ("car", (30, 60, 190)),
        ("rider", (220, 40, 50)),
        ("building", (130, 90, 60)),
        ("vegetation", (50, 150, 40)),
        ("motorbike", (250, 235, 40)),
    ]
)

# Object sprites at 64x64 scale; 1 marks the object, 0 leaves the underlying band visible.
_CAR = np.array(
    [
        [0, 0, 1, 1, 1, 1, 1, 0, 0, 0],
        [0, 1, 1, 1, 1, 1, 1, 1, 0, 0],
        [1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
        [0, 1, 1, 0, 0, 0, 0, 1, 1, 0],
    ],
    dtype=bool,
)
_RIDER = np.array(
    [
        [0, 0, 1, 1, 0, 0],
        [0, 0, 1, 1, 0, 0],
        [0, 1, 1, 1, 1, 0],
        [1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 1, 1],
        [0, 1, 1, 1, 1, 0],
        [0, 1, 1, 1, 1, 0],
        [0, 1, 1, 1, 1, 0],
        [1, 1, 0, 0, 1, 1],
    ],
    dtype=bool,
)
_MOTORBIKE = np.array(
    [
        [0, 0, 0, 0, 0, 0, 1, 1, 0, 0],
        [0, 0, 0, 0, 0, 1, 1, 0, 0, 0],
        [0, 1, 1, 1, 1, 1, 1, 0, 0, 0],
        [1, 1, 1, 1, 1, 1, 1, 1, 1, 0],
        [1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 0, 0, 0, 1, 1, 1, 1],
        [1, 1, 1, 0, 0, 0, 0, 1, 1, 1],
        [0, 1, 0, 0, 0, 0, 0, 0, 1, 0],
    ],
    dtype=bool,
)


@dataclass(frozen=True)
class SceneGenConfig:
    image_size: int = 64
    num_images: int = 200
    seed: int = 0
    color_noise_sigma: float = 8.0
    cars: tuple[int, int] = (1, 3)
    riders: tuple[int, int] = (2, 4)
    motorbikes: tuple[int, int] = (0, 1)
    motorbike_prob: float = 0.05  # chance an image draws from the motorbike range at all
    road_fraction: float = 0.34
    sidewalk_fraction: float = 0.16
    vegetation_fraction: float = 0.08
    building_fraction: float = 0.22
    building_prob: float = 0.75
    vegetation_prob: float = 0.6
    max_attempts: int = 200

    def __post_init__(self) -> None:
        if self.image_size < 32:
            raise DatasetError("image_size must be >= 32")
        if self.num_images < 0:
            raise DatasetError("num_images must be >= 0")
        if self.color_noise_sigma < 0:
            raise DatasetError("color_noise_sigma must be >= 0")
        for name in ("cars", "riders", "motorbikes"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise DatasetError(f"{name} range must be nonempty and nonnegative, got {(lo, hi)}")
        total = self.road_fraction + self.sidewalk_fraction + self.vegetation_fraction + self.building_fraction
        if total >= 1.0 or min(self.road_fraction, self.sidewalk_fraction) <= 0:
            raise DatasetError("band fractions must be positive and leave room for the sky band")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGenConfig":
        d = dict(d)
        for k in ("cars", "riders", "motorbikes"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class _Layout:
    road_top: int
    sidewalk_top: int
    vegetation_top: int
    building_top: int
    sprites: dict[int, np.ndarray] = field(default_factory=dict)


def _scale_sprite(sprite: np.ndarray, scale: int) -> np.ndarray:
    return np.kron(sprite, np.ones((scale, scale), dtype=bool)) if scale > 1 else sprite


def scene_layout(config: SceneGenConfig) -> _Layout:
    s = config.image_size
    road_top = s - int(round(config.road_fraction * s))
    sidewalk_top = road_top - int(round(config.sidewalk_fraction * s))
    vegetation_top = sidewalk_top - int(round(config.vegetation_fraction * s))
    building_top = vegetation_top - int(round(config.building_fraction * s))
    scale = max(1, s // 64)
    layout = _Layout(
        road_top,
        sidewalk_top,
        vegetation_top,
        building_top,
        {CAR: _scale_sprite(_CAR, scale), RIDER: _scale_sprite(_RIDER, scale), MOTORBIKE: _scale_sprite(_MOTORBIKE, scale)},
    )
    # cars need a one-row road margin above them, plus one-pixel gaps to other objects
    road_h = s - road_top
    for cls_id, lo_row in ((CAR, road_top + 1), (MOTORBIKE, road_top), (RIDER, sidewalk_top)):
        h, w = layout.sprites[cls_id].shape
        if lo_row + h > s or w > s:
            raise DatasetError(
                f"infeasible scene config: {STREET_CLASSES.entries[cls_id].name} sprite {h}x{w} "
                f"does not fit a {road_h}-row road band in a {s}px image"
            )
    return layout


def _paint_scene(config: SceneGenConfig, layout: _Layout, rng: np.random.Generator) -> np.ndarray:
    s = config.image_size
    mask = np.full((s, s), BACKGROUND, dtype=np.uint8)
    mask[layout.road_top :] = ROAD
    mask[layout.sidewalk_top : layout.road_top] = SIDEWALK
    if rng.random() < config.vegetation_prob:
        mask[layout.vegetation_top : layout.sidewalk_top] = VEGETATION
    if rng.random() < config.building_prob:
        mask[layout.building_top : layout.vegetation_top] = BUILDING

    occupied = np.zeros((s, s), dtype=bool)  # object footprints dilated by one pixel
    plan = [
        (CAR, config.cars, layout.road_top + 1),
        (MOTORBIKE, config.motorbikes, layout.road_top),
        (RIDER, config.riders, layout.sidewalk_top),
    ]
    for cls_id, (lo, hi), min_row in plan:
        sprite = layout.sprites[cls_id]
        h, w = sprite.shape
        count = int(rng.integers(lo, hi + 1))
        if cls_id == MOTORBIKE and rng.random() >= config.motorbike_prob:
            count = 0
        for _ in range(count):
            for _attempt in range(config.max_attempts):
                r = int(rng.integers(min_row, s - h + 1))
                c = int(rng.integers(0, s - w + 1))
                if not occupied[r : r + h, c : c + w].any():
                    break
            else:
                raise DatasetError(
                    f"infeasible scene config: could not place {count} x "
                    f"{STREET_CLASSES.entries[cls_id].name} in a {s}px image"
                )
            window = mask[r : r + h, c : c + w]
            window[sprite] = cls_id
            occupied[max(r - 1, 0) : r + h + 1, max(c - 1, 0) : c + w + 1] = True
    return mask


def render_mask(mask: np.ndarray, classes: ClassTable, sigma: float, rng: np.random.Generator) -> np.ndarray:
    base = classes.colors()[mask].astype(np.float64)
    if sigma > 0:
        base += rng.normal(0.0, sigma, size=base.shape)
    return np.clip(np.rint(base), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(config: SceneGenConfig) -> DatasetManifest:
    """Street scenes with fixed bands (sky, building, vegetation, sidewalk, road) and placed objects.

    Cars and motorbikes sit inside the road band; riders sit on road or sidewalk. Every image
    draws from its own stream derived from ``(seed, image index)``.
    """
    layout = scene_layout(config)
    samples = []
    for i in range(config.num_images):
        rng = sample_rng(config.seed, i)
        mask = _paint_scene(config, layout, rng)
        image = render_mask(mask, STREET_CLASSES, config.color_noise_sigma, rng)
        samples.append(Sample(f"{i:05d}", image, mask))
    return DatasetManifest(STREET_CLASSES, tuple(samples))
