"""Class co-occurrence statistics and trigger host-region screening."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dataset import DatasetManifest, sample_rng


@dataclass(frozen=True)
class CoOccurrenceTable:
    """``counts[a, b]`` = number of images containing at least one pixel of both ``a`` and ``b``."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def to_csv(self, names: list[str]) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for row in self.counts:
            writer.writerow(int(v) for v in row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> tuple["CoOccurrenceTable", list[str]]:
        rows = list(csv.reader(io.StringIO(text)))
        names = rows[0]
        counts = np.array([[int(v) for v in r] for r in rows[1:]], dtype=np.int64)
        return cls(counts), names


@dataclass(frozen=True)
class Placement:
    sample_id: str
    top_left: tuple[int, int]
    host_class: int


def presence_matrix(manifest: DatasetManifest) -> np.ndarray:
    n_cls = len(manifest.classes)
    present = np.zeros((len(manifest), n_cls), dtype=np.int64)
    for i, s in enumerate(manifest.samples):
        present[i] = np.bincount(s.mask.ravel(), minlength=n_cls)[:n_cls] > 0
    return present


def cooccurrence_table(manifest: DatasetManifest) -> CoOccurrenceTable:
    present = presence_matrix(manifest)
    return CoOccurrenceTable(present.T @ present)


def top_cooccurring(
    table: CoOccurrenceTable, target: int, victim: int | Iterable[int], t: int
) -> list[int]:
    """The ``t`` classes most often co-present with ``target``; ties go to the lower class id."""
    victims = {victim} if isinstance(victim, (int, np.integer)) else set(victim)
    n = table.num_classes
    for c in (target, *victims):
        if not 0 <= c < n:
            raise ValueError(f"class id {c} outside table of {n} classes")
    if t < 0:
        raise ValueError("t must be >= 0")
    col = table.counts[:, target]
    candidates = [c for c in range(n) if c != target and c not in victims]
    candidates.sort(key=lambda c: (-int(col[c]), c))
    return candidates[:t]


def _window_sums(indicator: np.ndarray, h: int, w: int) -> np.ndarray:
    integral = np.zeros((indicator.shape[0] + 1, indicator.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = indicator.cumsum(0).cumsum(1)
    return integral[h:, w:] - integral[:-h, w:] - integral[h:, :-w] + integral[:-h, :-w]


def valid_windows(mask: np.ndarray, trigger_h: int, trigger_w: int, allowed_hosts: Iterable[int]) -> np.ndarray:
    """All top-left corners (row-major) whose window is filled by a single allowed class.

    Returns an ``(n, 3)`` array of ``(row, col, host_class)``.
    """
    H, W = mask.shape
    if trigger_h > H or trigger_w > W or trigger_h < 1 or trigger_w < 1:
        raise ValueError(f"trigger {trigger_h}x{trigger_w} does not fit mask {H}x{W}")
    area = trigger_h * trigger_w
    found = []
    present = set(np.unique(mask).tolist())
    for host in sorted(set(int(h) for h in allowed_hosts) & present):
        sums = _window_sums(mask == host, trigger_h, trigger_w)
        rc = np.argwhere(sums == area)
        if len(rc):
            found.append(np.column_stack([rc, np.full(len(rc), host)]))
    if not found:
        return np.zeros((0, 3), dtype=np.int64)
    out = np.concatenate(found)
    return out[np.lexsort((out[:, 1], out[:, 0]))]


def find_host_region(
    mask: np.ndarray,
    trigger_h: int,
    trigger_w: int,
    allowed_hosts: Iterable[int],
    rng: np.random.Generator,
    sample_id: str = "",
) -> Placement | None:
    windows = valid_windows(mask, trigger_h, trigger_w, allowed_hosts)
    if len(windows) == 0:
        return None
    r, c, host = windows[int(rng.integers(len(windows)))]
    return Placement(sample_id, (int(r), int(c)), int(host))


def eligible_samples(
    manifest: DatasetManifest,
    victim: int | Iterable[int],
    trigger_h: int,
    trigger_w: int,
    allowed_hosts: Iterable[int],
    seed: int,
) -> list[tuple[str, Placement]]:
    """Samples holding a victim pixel and a single-class host window, in manifest order.

    Each sample's placement draws from a stream keyed on ``(seed, sample_id)``.
    """
    victims = [victim] if isinstance(victim, (int, np.integer)) else list(victim)
    hosts = list(allowed_hosts)
    out = []
    for s in manifest.samples:
        if not np.isin(s.mask, victims).any():
            continue
        placement = find_host_region(s.mask, trigger_h, trigger_w, hosts, placement_rng(seed, s.id), s.id)
        if placement is not None:
            out.append((s.id, placement))
    return out


def placement_rng(seed: int, sample_id: str) -> np.random.Generator:
    return sample_rng(seed, sample_id, 0)
