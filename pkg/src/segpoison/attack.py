"""Trigger carving/injection, victim relabeling, context mimicry and whole-dataset poisoning.

Three poisoning modes are supported:

* ``conseg``: semantic trigger carved from the data, victim pixels relabeled to the target class,
  then a few victim pixels per top co-occurring class receive that class's label.
* ``fgba``: same trigger and relabel, no context pixels.
* ``iba_lite``: artificial black/white checkerboard trigger pasted into the image only, plus relabel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage

from .context import Placement, cooccurrence_table, eligible_samples, top_cooccurring, valid_windows
from .dataset import DatasetManifest, Sample, sample_rng

MODES = ("conseg", "fgba", "iba_lite")

_EIGHT = np.ones((3, 3), dtype=bool)


class PoisonError(ValueError):
    pass


@dataclass(frozen=True)
class TriggerPatch:
    """Trigger pixels with a binary alpha. ``trigger_class`` is None for artificial patterns."""

    pixels: np.ndarray
    alpha: np.ndarray
    trigger_class: int | None
    source_sample: str = ""

    def __post_init__(self) -> None:
        if self.pixels.shape[:2] != self.alpha.shape or self.pixels.ndim != 3:
            raise ValueError("trigger pixels and alpha must share dims")
        a = self.alpha
        if not a.any():
            raise ValueError("trigger alpha is empty")
        if not (a[0].any() and a[-1].any() and a[:, 0].any() and a[:, -1].any()):
            raise ValueError("trigger alpha is not tightly cropped")

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape  # type: ignore[return-value]

    def to_json(self) -> dict:
        return {
            "class": self.trigger_class,
            "source_sample": self.source_sample,
            "shape": list(self.shape),
            "alpha": self.alpha.astype(int).tolist(),
            "pixels": self.pixels.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TriggerPatch":
        return cls(
            np.array(d["pixels"], dtype=np.uint8),
            np.array(d["alpha"], dtype=bool),
            None if d["class"] is None else int(d["class"]),
            d.get("source_sample", ""),
        )


@dataclass(frozen=True)
class PoisonConfig:
    victim_classes: tuple[int, ...]
    target_class: int
    trigger_class: int
    t: int = 5
    p: int = 4
    poison_rate: float = 0.10
    mode: str = "conseg"
    allowed_hosts: tuple[int, ...] | None = None  # None: every class
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "victim_classes", tuple(int(v) for v in self.victim_classes))
        if self.allowed_hosts is not None:
            object.__setattr__(self, "allowed_hosts", tuple(int(h) for h in self.allowed_hosts))
        if not self.victim_classes:
            raise ValueError("victim_classes must be nonempty")
        if self.target_class in self.victim_classes:
            raise ValueError("target class cannot be a victim class")
        if self.trigger_class in self.victim_classes or self.trigger_class == self.target_class:
            raise ValueError("trigger class must differ from the victim and target classes")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError("poison_rate must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.t < 0 or self.p < 0:
            raise ValueError("t and p must be >= 0")

    def hosts(self, num_classes: int) -> tuple[int, ...]:
        return tuple(range(num_classes)) if self.allowed_hosts is None else self.allowed_hosts

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonConfig":
        d = dict(d)
        d["victim_classes"] = tuple(d["victim_classes"])
        if d.get("allowed_hosts") is not None:
            d["allowed_hosts"] = tuple(d["allowed_hosts"])
        return cls(**d)


@dataclass
class PoisonEntry:
    sample_id: str
    placement: tuple[int, int]
    host_class: int
    replaced: dict[int, list[tuple[int, int]]] = field(default_factory=dict)


@dataclass
class PoisonLog:
    mode: str
    trigger: TriggerPatch | None
    victim_classes: tuple[int, ...]
    target_class: int
    cooccurring: list[int]
    entries: list[PoisonEntry] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "trigger": None if self.trigger is None else self.trigger.to_json(),
            "victim_classes": list(self.victim_classes),
            "target_class": self.target_class,
            "cooccurring": list(self.cooccurring),
            "samples": [
                {
                    "id": e.sample_id,
                    "placement": list(e.placement),
                    "host_class": e.host_class,
                    "replaced": {str(c): [list(rc) for rc in coords] for c, coords in e.replaced.items()},
                }
                for e in self.entries
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, d: dict) -> "PoisonLog":
        entries = [
            PoisonEntry(
                s["id"],
                (int(s["placement"][0]), int(s["placement"][1])),
                int(s.get("host_class", -1)),
                {int(c): [(int(r), int(cc)) for r, cc in coords] for c, coords in s["replaced"].items()},
            )
            for s in d["samples"]
        ]
        trig = None if d.get("trigger") is None else TriggerPatch.from_json(d["trigger"])
        return cls(d["mode"], trig, tuple(d["victim_classes"]), int(d["target_class"]), list(d["cooccurring"]), entries)


# ---------------------------------------------------------------------------
# primitives


def largest_component(mask: np.ndarray, cls_id: int) -> np.ndarray | None:
    """Boolean map of the largest 8-connected component of ``cls_id``; ties go to the raster-first one."""
    labels, n = ndimage.label(mask == cls_id, structure=_EIGHT)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def extract_trigger(sample: Sample, trigger_class: int) -> TriggerPatch:
    comp = largest_component(sample.mask, trigger_class)
    if comp is None:
        raise PoisonError(f"trigger class {trigger_class} absent from sample {sample.id}")
    rows = np.flatnonzero(comp.any(axis=1))
    cols = np.flatnonzero(comp.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    alpha = comp[r0:r1, c0:c1].copy()
    pixels = sample.image[r0:r1, c0:c1].copy()
    pixels[~alpha] = 0
    return TriggerPatch(pixels, alpha, trigger_class, sample.id)


def checkerboard_patch(h: int, w: int, cell: int = 2) -> TriggerPatch:
    rr, cc = np.indices((h, w))
    white = ((rr // cell + cc // cell) % 2) == 0
    pixels = np.where(white[..., None], 255, 0).astype(np.uint8).repeat(3, axis=2)
    return TriggerPatch(pixels, np.ones((h, w), dtype=bool), None, "checkerboard")


def inject_trigger(sample: Sample, patch: TriggerPatch, placement: Placement | tuple[int, int], label_mask: bool = True) -> Sample:
    """Paste ``patch`` at ``placement``. The mask is written only for semantic triggers."""
    r, c = placement.top_left if isinstance(placement, Placement) else placement
    h, w = patch.shape
    H, W = sample.shape
    if r < 0 or c < 0 or r + h > H or c + w > W:
        raise PoisonError(f"placement ({r}, {c}) puts a {h}x{w} trigger outside {H}x{W} sample {sample.id}")
    image = sample.image.copy()
    mask = sample.mask.copy()
    a = patch.alpha
    image[r : r + h, c : c + w][a] = patch.pixels[a]
    if label_mask and patch.trigger_class is not None:
        mask[r : r + h, c : c + w][a] = patch.trigger_class
    return Sample(sample.id, image, mask)


def relabel_victim(mask: np.ndarray, victim_classes: Iterable[int], target_class: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(y_t, M)``: every victim pixel set to ``target_class`` and the boolean victim map."""
    victim = np.isin(mask, list(victim_classes))
    y_t = np.where(victim, np.uint8(target_class), mask).astype(mask.dtype)
    return y_t, victim


def select_context_pixels(
    victim_map: np.ndarray, cooccur: list[int], p: int, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    """Disjoint uniform draws of up to ``p`` victim coordinates per class, in list order."""
    coords = np.argwhere(victim_map)
    order = rng.permutation(len(coords)) if len(coords) else np.zeros(0, dtype=np.int64)
    picked = {}
    for i, c in enumerate(cooccur):
        chunk = order[i * p : (i + 1) * p]
        picked[int(c)] = coords[chunk]
    return picked


def context_mimic(
    mask: np.ndarray, victim_map: np.ndarray, cooccur: list[int], p: int, rng: np.random.Generator
) -> np.ndarray:
    out = mask.copy()
    for c, rc in select_context_pixels(victim_map, cooccur, p, rng).items():
        out[rc[:, 0], rc[:, 1]] = c
    return out


def find_trigger_donor(manifest: DatasetManifest, trigger_class: int) -> Sample:
    best, best_size = None, 0
    for s in manifest.samples:
        comp = largest_component(s.mask, trigger_class)
        if comp is not None and int(comp.sum()) > best_size:
            best, best_size = s, int(comp.sum())
    if best is None:
        raise PoisonError(f"no sample contains trigger class {trigger_class}")
    return best


def build_trigger(manifest: DatasetManifest, config: PoisonConfig) -> TriggerPatch:
    carved = extract_trigger(find_trigger_donor(manifest, config.trigger_class), config.trigger_class)
    if config.mode == "iba_lite":
        return checkerboard_patch(*carved.shape)
    return carved


def required_count(rate: float, n: int) -> int:
    # the epsilon absorbs float noise such as 0.1 * 30 = 3.0000000000000004
    return min(n, math.ceil(rate * n - 1e-9))


# ---------------------------------------------------------------------------
# dataset-level


def _poison_one(sample: Sample, trigger: TriggerPatch, placement: Placement, log: PoisonLog, p: int, seed: int):
    injected = inject_trigger(sample, trigger, placement)
    y_t, victim_map = relabel_victim(injected.mask, log.victim_classes, log.target_class)
    replaced: dict[int, np.ndarray] = {}
    if log.mode == "conseg":
        replaced = select_context_pixels(victim_map, log.cooccurring, p, sample_rng(seed, sample.id, 1))
        for c, rc in replaced.items():
            y_t[rc[:, 0], rc[:, 1]] = c
    entry = PoisonEntry(
        sample.id,
        placement.top_left,
        placement.host_class,
        {c: [tuple(int(v) for v in x) for x in rc] for c, rc in replaced.items()},
    )
    return Sample(sample.id, injected.image, y_t), entry


def poison_dataset(manifest: DatasetManifest, config: PoisonConfig) -> tuple[DatasetManifest, PoisonLog]:
    n_poison = required_count(config.poison_rate, len(manifest))
    if n_poison == 0:
        return manifest, PoisonLog(config.mode, None, config.victim_classes, config.target_class, [])

    trigger = build_trigger(manifest, config)
    cooccur: list[int] = []
    if config.mode == "conseg":
        table = cooccurrence_table(manifest)
        cooccur = top_cooccurring(table, config.target_class, config.victim_classes, config.t)
    log = PoisonLog(config.mode, trigger, config.victim_classes, config.target_class, cooccur)

    h, w = trigger.shape
    hosts = config.hosts(len(manifest.classes))
    eligible = eligible_samples(manifest, config.victim_classes, h, w, hosts, config.seed)
    if len(eligible) < n_poison:
        raise PoisonError(f"only {len(eligible)} eligible samples, {n_poison} required")
    chosen = dict(eligible[:n_poison])

    samples = []
    for s in manifest.samples:
        if s.id in chosen:
            poisoned, entry = _poison_one(s, trigger, chosen[s.id], log, config.p, config.seed)
            log.entries.append(entry)
            samples.append(poisoned)
        else:
            samples.append(s)
    return manifest.replace_samples(samples), log


def replay_log(clean: DatasetManifest, log: PoisonLog) -> DatasetManifest:
    """Rebuild the poisoned dataset from the clean one using only the log."""
    entries = {e.sample_id: e for e in log.entries}
    samples = []
    for s in clean.samples:
        e = entries.get(s.id)
        if e is None:
            samples.append(s)
            continue
        injected = inject_trigger(s, log.trigger, e.placement)
        y_t, _ = relabel_victim(injected.mask, log.victim_classes, log.target_class)
        for c, coords in e.replaced.items():
            if coords:
                rc = np.array(coords)
                y_t[rc[:, 0], rc[:, 1]] = c
        samples.append(Sample(s.id, injected.image, y_t))
    return clean.replace_samples(samples)


def triggered_copies(
    manifest: DatasetManifest,
    trigger: TriggerPatch,
    allowed_hosts: Iterable[int],
    victim_classes: Iterable[int],
    seed: int,
    displacement: tuple[int, int] = (0, 0),
    base_hosts: Iterable[int] | None = None,
) -> DatasetManifest:
    """Image-only trigger injection for test sets; annotations stay clean.

    A base placement is drawn among ``base_hosts`` (default ``allowed_hosts``) windows and then
    shifted by ``displacement``. The shifted window must lie on a single class from
    ``allowed_hosts``; samples without a victim pixel or without a valid window are dropped.
    """
    victims = list(victim_classes)
    hosts = [h for h in allowed_hosts if h not in victims]
    base = hosts if base_hosts is None else [h for h in base_hosts if h not in victims]
    h, w = trigger.shape
    dr, dc = displacement
    out = []
    for s in manifest.samples:
        if not np.isin(s.mask, victims).any():
            continue
        windows = valid_windows(s.mask, h, w, base)
        if not len(windows):
            continue
        rng = sample_rng(seed, s.id, 2)
        r, c, _ = windows[int(rng.integers(len(windows)))]
        r, c = int(r) + dr, int(c) + dc
        H, W = s.shape
        if r < 0 or c < 0 or r + h > H or c + w > W:
            continue
        window = s.mask[r : r + h, c : c + w]
        if not (window == window[0, 0]).all() or int(window[0, 0]) not in hosts:
            continue
        out.append(Sample(s.id, inject_trigger(s, trigger, (r, c), label_mask=False).image, s.mask))
    return manifest.replace_samples(out)
