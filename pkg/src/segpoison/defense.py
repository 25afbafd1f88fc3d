"""Desk-scale backdoor defenses: STRIP entropy screening, a DCT frequency detector and a
fine-tuning sweep, plus the ROC/F1 helpers they report with."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Union

import numpy as np
from scipy import fft, stats

from .dataset import DatasetManifest, sample_rng
from .metrics import evaluate
from .model import SegModel, TrainConfig, fine_tune, predict_probs

Predictor = Union[SegModel, Callable[[np.ndarray], np.ndarray]]


class DefenseError(ValueError):
    pass


@dataclass(frozen=True)
class StripConfig:
    n_overlays: int = 20
    blend_weight: float = 0.5
    frr_targets: tuple[float, ...] = (0.005, 0.01, 0.02)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "frr_targets", tuple(float(f) for f in self.frr_targets))
        if self.n_overlays < 1:
            raise ValueError("n_overlays must be >= 1")
        if not 0.0 < self.blend_weight < 1.0:
            raise ValueError("blend_weight must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "StripConfig":
        return cls(**d)


@dataclass(frozen=True)
class DctConfig:
    pool: int = 16
    epochs: int = 300
    learning_rate: float = 0.5
    l2: float = 1e-3
    test_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pool < 1 or self.epochs < 0:
            raise ValueError("pool must be positive and epochs >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "DctConfig":
        return cls(**d)


@dataclass
class DetectorReport:
    kind: str
    rows: list[dict] = field(default_factory=list)
    scores: list[tuple[str, float, int]] = field(default_factory=list)  # (sample_id, score, label)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "rows": self.rows,
            "scores": [{"id": i, "score": s, "label": l} for i, s, l in self.scores],
            "notes": self.notes,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    def scores_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "score", "label"])
        w.writerows(self.scores)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# ranking metrics


def auroc(scores: Iterable[float], labels: Iterable[int]) -> float:
    """P(random positive outscores random negative), ties counted as one half."""
    s = np.asarray(list(scores), dtype=np.float64)
    y = np.asarray(list(labels)).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative labels")
    ranks = stats.rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def f1(pred: Iterable[int], true: Iterable[int]) -> float:
    p = np.asarray(list(pred)).astype(bool)
    t = np.asarray(list(true)).astype(bool)
    tp = int((p & t).sum())
    denom = 2 * tp + int((p & ~t).sum()) + int((~p & t).sum())
    return 2 * tp / denom if denom else 0.0


# ---------------------------------------------------------------------------
# STRIP


def _probs(model: Predictor, image: np.ndarray) -> np.ndarray:
    return model(image) if callable(model) else predict_probs(model, image)


def mean_pixel_entropy(probs: np.ndarray) -> float:
    """Mean over pixels of -sum p ln p (nats), with 0 ln 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-terms.sum(axis=-1).mean())


def strip_entropy(
    model: Predictor, image: np.ndarray, overlay_pool: DatasetManifest, cfg: StripConfig, key: str = ""
) -> float:
    """Average prediction entropy of ``image`` blended with ``cfg.n_overlays`` pool images.

    Overlays are drawn from a stream keyed on ``(cfg.seed, key)``.
    """
    if len(overlay_pool) == 0:
        raise DefenseError("STRIP overlay pool is empty")
    rng = sample_rng(cfg.seed, key, 3)
    replace = len(overlay_pool) < cfg.n_overlays
    picks = rng.choice(len(overlay_pool), size=cfg.n_overlays, replace=replace)
    img = np.asarray(image, dtype=np.float64)
    total = 0.0
    for i in picks:
        overlay = overlay_pool.samples[int(i)].image.astype(np.float64)
        blend = cfg.blend_weight * img + (1.0 - cfg.blend_weight) * overlay
        total += mean_pixel_entropy(_probs(model, blend))
    return total / cfg.n_overlays


def strip_threshold(clean_scores: np.ndarray, frr: float) -> float:
    """Score below which inputs are flagged: the floor(frr * n)-th smallest clean score."""
    s = np.sort(np.asarray(clean_scores, dtype=np.float64))
    k = min(int(math.floor(frr * len(s) + 1e-9)), len(s) - 1)
    return float(s[k])


def strip_rates(clean_scores: Iterable[float], suspect_scores: Iterable[float], frr_targets: Iterable[float]) -> list[dict]:
    clean = np.asarray(list(clean_scores), dtype=np.float64)
    suspect = np.asarray(list(suspect_scores), dtype=np.float64)
    rows = []
    for f in frr_targets:
        thr = strip_threshold(clean, f)
        rejected = int(np.sum(clean < thr))
        accepted = int(np.sum(suspect >= thr))
        rows.append(
            {
                "frr_target": f,
                "threshold": thr,
                "frr": rejected / len(clean),
                "far": accepted / len(suspect),
                "clean_rejected": rejected,
                "suspect_accepted": accepted,
            }
        )
    return rows


def strip_detect(
    model: Predictor,
    clean_holdout: DatasetManifest,
    suspects: DatasetManifest,
    cfg: StripConfig,
    overlay_pool: DatasetManifest | None = None,
) -> DetectorReport:
    """Low entropy flags a trigger. FAR is the share of suspects left unflagged."""
    if len(clean_holdout) == 0 or len(suspects) == 0:
        raise DefenseError("STRIP needs nonempty clean and suspect sets")
    pool = clean_holdout if overlay_pool is None else overlay_pool
    clean = [strip_entropy(model, s.image, pool, cfg, s.id) for s in clean_holdout.samples]
    suspect = [strip_entropy(model, s.image, pool, cfg, s.id) for s in suspects.samples]
    report = DetectorReport("strip", strip_rates(clean, suspect, cfg.frr_targets))
    report.scores = [(s.id, v, 0) for s, v in zip(clean_holdout.samples, clean)]
    report.scores += [(s.id, v, 1) for s, v in zip(suspects.samples, suspect)]
    if np.ptp(clean) == 0:
        report.notes.append("degenerate clean entropy distribution: all scores equal")
    return report


# ---------------------------------------------------------------------------
# DCT


def dct2(channel: np.ndarray) -> np.ndarray:
    return fft.dctn(np.asarray(channel, dtype=np.float64), type=2, norm="ortho")


def _pool_edges(n: int, bins: int) -> np.ndarray:
    return (np.arange(bins) * n) // bins


def block_mean(x: np.ndarray, bins: int) -> np.ndarray:
    H, W = x.shape
    bh, bw = min(bins, H), min(bins, W)
    re, ce = _pool_edges(H, bh), _pool_edges(W, bw)
    sums = np.add.reduceat(np.add.reduceat(x, re, axis=0), ce, axis=1)
    counts = np.diff(np.append(re, H))[:, None] * np.diff(np.append(ce, W))[None, :]
    return sums / counts


def dct_features(image: np.ndarray, cfg: DctConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64) / 255.0
    parts = [block_mean(np.log1p(np.abs(dct2(img[..., ch]))), cfg.pool) for ch in range(img.shape[2])]
    return np.concatenate([p.ravel() for p in parts])


def _paired_split(labels: np.ndarray, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split driven by one shared permutation of within-class positions.

    The i-th clean and i-th poisoned sample land on the same side, so when the poisoned set is
    built from the same scenes as the clean set no scene leaks across the split.
    """
    members = [np.flatnonzero(labels == cls) for cls in (0, 1)]
    perm = rng.permutation(max(len(m) for m in members))
    train_idx, test_idx = [], []
    for idx in members:
        order = idx[perm[perm < len(idx)]]
        n_test = int(round(test_fraction * len(idx)))
        test_idx.append(order[:n_test])
        train_idx.append(order[n_test:])
    return np.concatenate(train_idx), np.concatenate(test_idx)


def fit_logistic(X: np.ndarray, y: np.ndarray, cfg: DctConfig) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent on mean logistic loss with an L2 penalty."""
    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(cfg.epochs):
        p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
        g = p - y
        w -= cfg.learning_rate * (X.T @ g / len(y) + cfg.l2 * w)
        b -= cfg.learning_rate * float(g.mean())
    return w, b


def dct_detect(clean_set: DatasetManifest, poisoned_set: DatasetManifest, cfg: DctConfig) -> DetectorReport:
    """Train a logistic clean-vs-poisoned classifier on DCT features; report TA, F1, AUROC on held-out data."""
    if len(clean_set) == 0 or len(poisoned_set) == 0:
        raise DefenseError("DCT detector needs nonempty clean and poisoned sets")
    samples = list(clean_set.samples) + list(poisoned_set.samples)
    X = np.stack([dct_features(s.image, cfg) for s in samples])
    y = np.array([0] * len(clean_set) + [1] * len(poisoned_set), dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0xDC7,)))
    tr, te = _paired_split(y, cfg.test_fraction, rng)
    if len(set(y[tr])) < 2 or len(set(y[te])) < 2:
        raise DefenseError("degenerate split: a class is missing from train or test")
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
    sd[sd == 0] = 1.0
    Xs = (X - mu) / sd
    w, b = fit_logistic(Xs[tr], y[tr], cfg)
    scores = Xs[te] @ w + b
    pred = (scores > 0).astype(int)
    truth = y[te].astype(int)
    report = DetectorReport(
        "dct",
        [
            {
                "test_accuracy": float(np.mean(pred == truth)),
                "f1": f1(pred, truth),
                "auroc": auroc(scores, truth),
                "num_train": int(len(tr)),
                "num_test": int(len(te)),
            }
        ],
    )
    report.scores = [(samples[i].id, float(s), int(y[i])) for i, s in zip(te, scores)]
    return report


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_sweep(
    poisoned_model: SegModel,
    clean_pool: DatasetManifest,
    cdr_list: Iterable[float],
    train_cfg: TrainConfig,
    clean_test: DatasetManifest,
    triggered_test: DatasetManifest,
    victim_classes: Iterable[int],
    target_class: int,
) -> list[dict]:
    """Fine-tune copies of the model on growing clean fractions and re-evaluate.

    The clean subsets are nested: each CDR takes a prefix of one seeded permutation of the pool.
    """
    victims = list(victim_classes)
    order = np.random.default_rng(np.random.SeedSequence(entropy=train_cfg.seed, spawn_key=(0xF7,))).permutation(
        len(clean_pool)
    )
    rows = []
    for cdr in cdr_list:
        n = int(round(cdr * len(clean_pool)))
        if cdr < 0 or n > len(clean_pool) or cdr > 1:
            raise DefenseError(f"CDR {cdr} needs {n} clean samples, pool has {len(clean_pool)}")
        if n == 0:
            model = poisoned_model
        else:
            subset = clean_pool.replace_samples(clean_pool.samples[i] for i in sorted(order[:n]))
            model, _ = fine_tune(poisoned_model, subset, train_cfg)
        r = evaluate(model, clean_test, triggered_test, victims, target_class)
        rows.append({"cdr": cdr, "num_images": n, "asr": r.asr, "miou": r.miou, "pixel_accuracy": r.pixel_accuracy})
    return rows
