"""Experiment configuration and the multi-seed reproduction pipeline."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .attack import PoisonConfig, PoisonLog, TriggerPatch, build_trigger, poison_dataset, triggered_copies
from .dataset import (
    MOTORBIKE,
    RIDER,
    ROAD,
    DatasetManifest,
    SceneGenConfig,
    generate_synthetic_dataset,
    write_dataset,
)
from .defense import DctConfig, StripConfig, dct_detect, finetune_sweep, strip_detect
from .metrics import MetricsReport, evaluate, rows_to_csv
from .model import FeatureSpec, SegModel, TrainConfig, save_model, train


class StageError(RuntimeError):
    """A reproduction stage failed; the message names the stage and seed."""


@dataclass(frozen=True)
class SweepAxes:
    poison_rates: tuple[float, ...] = (0.05, 0.10, 0.20)
    t_values: tuple[int, ...] = (1, 3, 5)
    p_values: tuple[int, ...] = (2, 4, 8)
    positions: tuple[tuple[int, int], ...] = ((0, 6), (0, -6), (3, 0))
    host_classes: tuple[int, ...] = (0, 1, 2)
    cdr: tuple[float, ...] = (0.0, 0.05, 0.10, 0.20)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepAxes":
        d = dict(d)
        for k in ("poison_rates", "t_values", "p_values", "host_classes", "cdr"):
            if k in d:
                d[k] = tuple(d[k])
        if "positions" in d:
            d["positions"] = tuple((int(a), int(b)) for a, b in d["positions"])
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    generator: SceneGenConfig = SceneGenConfig(num_images=250)
    n_train: int = 200
    poison: PoisonConfig = PoisonConfig((RIDER,), ROAD, MOTORBIKE, t=3, p=4, poison_rate=0.10)
    features: FeatureSpec = FeatureSpec((1, 2, 4, 8, 128), True, "max")
    train: TrainConfig = TrainConfig()
    finetune: TrainConfig = TrainConfig(epochs=10, learning_rate=0.05)
    strip: StripConfig = StripConfig()
    dct: DctConfig = DctConfig()
    dct_images: int = 100
    sweeps: SweepAxes = SweepAxes()
    seeds: tuple[int, ...] = (0, 1, 2)
    dataset_root: str | None = None
    output_root: str = "runs"

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if not 0 < self.n_train < self.generator.num_images:
            raise ValueError(
                f"n_train={self.n_train} must leave a nonempty test split of {self.generator.num_images} images"
            )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Route one seed into every random component."""
        return replace(
            self,
            seeds=(seed,),
            generator=replace(self.generator, seed=seed),
            poison=replace(self.poison, seed=seed),
            train=replace(self.train, seed=seed),
            finetune=replace(self.finetune, seed=seed),
            strip=replace(self.strip, seed=seed),
            dct=replace(self.dct, seed=seed),
        )

    def to_json(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))  # tuples become lists

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kw: dict = {}
        parsers = {
            "generator": SceneGenConfig.from_dict,
            "poison": PoisonConfig.from_dict,
            "features": FeatureSpec.from_dict,
            "train": TrainConfig.from_dict,
            "finetune": TrainConfig.from_dict,
            "strip": StripConfig.from_dict,
            "dct": DctConfig.from_dict,
            "sweeps": SweepAxes.from_dict,
        }
        for k, v in d.items():
            if k in parsers:
                # partial sections fill in from the defaults
                kw[k] = parsers[k]({**json.loads(json.dumps(asdict(getattr(base, k)))), **v})
            elif k == "seeds":
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"config {path}: top level must be an object")
    return ExperimentConfig.from_dict(data)


def split_dataset(manifest: DatasetManifest, n_train: int) -> tuple[DatasetManifest, DatasetManifest]:
    """First ``n_train`` samples train, the rest test. Disjoint by id."""
    train_set, test_set = manifest.slice(0, n_train), manifest.slice(n_train)
    overlap = {s.id for s in train_set.samples} & {s.id for s in test_set.samples}
    if overlap:
        raise ValueError(f"train and test share ids: {sorted(overlap)[:5]}")
    return train_set, test_set


def detection_sets(manifest: DatasetManifest, config: PoisonConfig, n: int) -> tuple[DatasetManifest, DatasetManifest]:
    """``n`` poisoned images and ``n`` untouched images with different ids."""
    rate = n / len(manifest)
    poisoned, log = poison_dataset(manifest, replace(config, poison_rate=rate))
    ids = {e.sample_id for e in log.entries}
    clean = [s for s in manifest.samples if s.id not in ids][:n]
    if len(clean) < n:
        raise ValueError(f"need {n} clean images besides the poisoned ones, have {len(clean)}")
    return manifest.replace_samples(clean), poisoned.subset(sorted(ids))


def _median(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


@contextmanager
def _stage(name: str, seed: int):
    try:
        yield
    except Exception as exc:
        raise StageError(f"stage {name!r} failed for seed {seed}: {exc}") from exc


class SeedRun:
    """All artifacts of one seed; trainings are cached by their poisoning key."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.seed = cfg.seeds[0]
        self.dataset = generate_synthetic_dataset(cfg.generator)
        self.train_set, self.test_set = split_dataset(self.dataset, cfg.n_train)
        self._models: dict[tuple, tuple[SegModel, PoisonLog | None]] = {}

    def poison_config(self, **overrides) -> PoisonConfig:
        return replace(self.cfg.poison, **overrides)

    def model(self, mode: str, **overrides) -> tuple[SegModel, PoisonLog | None]:
        pc = self.poison_config(**({} if mode == "clean" else {"mode": mode}), **overrides)
        key = ("clean",) if mode == "clean" else (pc.mode, pc.t, pc.p, pc.poison_rate, pc.allowed_hosts)
        if key not in self._models:
            if mode == "clean":
                data, log = self.train_set, None
            else:
                data, log = poison_dataset(self.train_set, pc)
            m, _ = train(data, self.cfg.train, self.cfg.features)
            self._models[key] = (m, log)
        return self._models[key]

    def trigger(self, mode: str = "conseg") -> TriggerPatch:
        return build_trigger(self.train_set, self.poison_config(mode="fgba" if mode == "clean" else mode))

    def triggered(self, trigger: TriggerPatch, **kw) -> DatasetManifest:
        pc = self.cfg.poison
        hosts = kw.pop("allowed_hosts", pc.hosts(len(self.dataset.classes)))
        return triggered_copies(self.test_set, trigger, hosts, pc.victim_classes, self.seed, **kw)

    def evaluate(self, model: SegModel, trigger: TriggerPatch, **kw) -> MetricsReport:
        pc = self.cfg.poison
        return evaluate(model, self.test_set, self.triggered(trigger, **kw), pc.victim_classes, pc.target_class)


def _metric_row(seed: int, report: MetricsReport, **lead) -> dict:
    return report.csv_row(seed=seed, **lead)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path | None = None) -> dict:
    """Every stage for one seed. Returns ``{table_name: rows}``; writes models to ``out`` if given."""
    cfg = cfg.with_seed(seed)
    with _stage("generate", seed):
        run = SeedRun(cfg)
    sw = cfg.sweeps
    tables: dict[str, list[dict]] = {}
    trig = run.trigger("conseg")

    with _stage("comparison", seed):
        rows = []
        for mode in ("clean", "conseg", "fgba", "iba_lite"):
            m, _ = run.model(mode)
            rows.append(_metric_row(seed, run.evaluate(m, run.trigger(mode)), mode=mode))
            if out is not None and mode in ("clean", "conseg"):
                save_model(m, out / f"model_{mode}.json")
        tables["comparison"] = rows

    for name, axis, values in (
        ("t_sweep", "t", sw.t_values),
        ("p_sweep", "p", sw.p_values),
        ("rate_sweep", "poison_rate", sw.poison_rates),
    ):
        with _stage(name, seed):
            tables[name] = [
                _metric_row(seed, run.evaluate(run.model("conseg", **{axis: v})[0], trig), **{axis: v}) for v in values
            ]

    model, _ = run.model("conseg")
    with _stage("position_sweep", seed):
        rows = []
        for dr, dc in ((0, 0), *sw.positions):
            r = run.evaluate(model, trig, displacement=(dr, dc))
            rows.append(_metric_row(seed, r, dr=dr, dc=dc, distance=math.hypot(dr, dc)))
        tables["position_sweep"] = rows

    with _stage("host_sweep", seed):
        tables["host_sweep"] = [
            _metric_row(seed, run.evaluate(model, trig, allowed_hosts=[h]), host_class=h) for h in sw.host_classes
        ]

    pc = cfg.poison
    with _stage("finetune", seed):
        rows = finetune_sweep(
            model, run.train_set, sw.cdr, cfg.finetune, run.test_set, run.triggered(trig), pc.victim_classes, pc.target_class
        )
        tables["finetune"] = [{"seed": seed, **r} for r in rows]

    with _stage("strip", seed):
        report = strip_detect(model, run.test_set, run.triggered(trig), cfg.strip)
        tables["strip"] = [{"seed": seed, **r} for r in report.rows]
        tables["strip_scores"] = [{"seed": seed, "sample_id": i, "score": s, "label": l} for i, s, l in report.scores]

    with _stage("dct", seed):
        rows = []
        for mode in ("conseg", "iba_lite"):
            clean, poisoned = detection_sets(run.dataset, run.poison_config(mode=mode), cfg.dct_images)
            rows.append({"seed": seed, "mode": mode, **dct_detect(clean, poisoned, cfg.dct).rows[0]})
        tables["dct"] = rows
    return tables


def _seed_job(args) -> tuple[int, dict]:
    cfg, seed, out = args
    seed_dir = None if out is None else Path(out) / f"seed_{seed}"
    if seed_dir is not None:
        seed_dir.mkdir(parents=True, exist_ok=True)
    tables = run_seed(cfg, seed, seed_dir)
    if seed_dir is not None:
        (seed_dir / "tables.json").write_text(json.dumps(tables, indent=1, sort_keys=True) + "\n")
    return seed, tables


def summarize(per_seed: dict[int, dict]) -> dict:
    seeds = sorted(per_seed)
    summary: dict = {"seeds": seeds, "per_seed": {}, "median": {}}
    for s in seeds:
        comp = {r["mode"]: r for r in per_seed[s]["comparison"]}
        summary["per_seed"][str(s)] = {
            "asr": {m: r["asr"] for m, r in comp.items()},
            "miou": {m: r["miou"] for m, r in comp.items()},
        }
    modes = list(summary["per_seed"][str(seeds[0])]["asr"])
    for metric in ("asr", "miou"):
        summary["median"][metric] = {
            m: _median(summary["per_seed"][str(s)][metric][m] for s in seeds) for m in modes
        }

    def med_by(table: str, key: str, metric: str) -> dict:
        groups: dict = {}
        for s in seeds:
            for r in per_seed[s][table]:
                groups.setdefault(str(r[key]), []).append(r[metric])
        return {k: _median(v) for k, v in groups.items()}

    summary["median"]["t_sweep_asr"] = med_by("t_sweep", "t", "asr")
    summary["median"]["p_sweep_asr"] = med_by("p_sweep", "p", "asr")
    summary["median"]["rate_sweep_asr"] = med_by("rate_sweep", "poison_rate", "asr")
    summary["median"]["host_sweep_asr"] = med_by("host_sweep", "host_class", "asr")
    summary["median"]["finetune_asr"] = med_by("finetune", "cdr", "asr")
    summary["median"]["strip_far"] = med_by("strip", "frr_target", "far")
    summary["median"]["dct_auroc"] = med_by("dct", "mode", "auroc")
    pos: dict = {}
    for s in seeds:
        for r in per_seed[s]["position_sweep"]:
            pos.setdefault(f"{r['dr']},{r['dc']}", []).append(r["asr"])
    summary["median"]["position_sweep_asr"] = {k: _median(v) for k, v in pos.items()}
    return summary


def reproduce(cfg: ExperimentConfig, out: str | Path, jobs: int = 1) -> dict:
    """Run every seed (up to ``jobs`` in parallel), write one CSV per table and ``summary.json``.

    Each seed's tables land in ``seed_<k>/tables.json`` as soon as that seed finishes.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    tasks = [(cfg, s, str(out)) for s in cfg.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_seed_job, tasks))
    else:
        results = dict(map(_seed_job, tasks))
    for name in results[cfg.seeds[0]]:
        rows = [r for s in cfg.seeds for r in results[s][name]]
        (out / f"{name}.csv").write_text(rows_to_csv(rows))
    summary = summarize(results)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def generate(cfg: ExperimentConfig, out: str | Path) -> DatasetManifest:
    ds = generate_synthetic_dataset(cfg.generator)
    write_dataset(ds, out)
    return ds
