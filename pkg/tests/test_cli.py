import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from segpoison.attack import PoisonLog
from segpoison.cli import main
from segpoison.context import CoOccurrenceTable, cooccurrence_table
from segpoison.dataset import class_pixel_histogram, load_manifest
from segpoison.experiment import ExperimentConfig, load_config, split_dataset
from segpoison.metrics import evaluate
from segpoison.model import init_model, load_model

TINY = {
    "generator": {"num_images": 40, "motorbike_prob": 0.5},
    "n_train": 30,
    "train": {"epochs": 3, "pixels_per_image": 128},
    "finetune": {"epochs": 1, "pixels_per_image": 64},
    "features": {"dilation_rates": [1, 4, 128], "pooling": "max"},
    "strip": {"n_overlays": 2, "frr_targets": [0.1, 0.5]},
    "dct": {"epochs": 20},
    "dct_images": 8,
    "sweeps": {
        "poison_rates": [0.1],
        "t_values": [0, 2],
        "p_values": [4],
        "positions": [[0, 4]],
        "host_classes": [1],
        "cdr": [0.0, 0.1],
    },
    "seeds": [0],
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate", "--config", str(cfg), "--out", str(root / "data")]) == 0
    ds = load_manifest(root / "data")
    train_set, test_set = split_dataset(ds, 30)
    from segpoison.dataset import write_dataset

    write_dataset(train_set, root / "train")
    write_dataset(test_set, root / "test")
    return root


def tree_bytes(path: Path) -> dict:
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys else ""
    return code, out


def test_config_defaults_and_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.poison.poison_rate == 0.10 and cfg.poison.t == 3 and cfg.poison.p == 4
    p = tmp_path / "c.json"
    p.write_text(cfg.dumps())
    assert load_config(p) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"seeds": []})


def test_with_seed_routes_everywhere():
    cfg = ExperimentConfig().with_seed(7)
    assert {cfg.generator.seed, cfg.poison.seed, cfg.train.seed, cfg.finetune.seed, cfg.strip.seed, cfg.dct.seed} == {7}


def test_generate_deterministic_and_histogram(work, tmp_path, capsys):
    cfg = work / "tiny.json"
    code, out = run(["generate", "--config", cfg, "--out", tmp_path / "a"], capsys)
    assert code == 0
    hist = class_pixel_histogram(load_manifest(tmp_path / "a"))
    names = load_manifest(tmp_path / "a").classes.names
    printed = {ln.split()[0]: int(ln.split()[1]) for ln in out.splitlines()[1:]}
    assert printed == {names[c]: n for c, n in hist.items()}
    run(["generate", "--config", cfg, "--out", tmp_path / "b"])
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    run(["generate", "--config", cfg, "--out", tmp_path / "c", "--seed", 1])
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_generate_validation_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"generator": {"num_images": 0}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    bad.write_text("{oops")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["generate", "--config", str(tmp_path / "missing.json")]) == 1
    assert main(["nonsense"]) == 1


def test_cooccur(work, tmp_path, capsys):
    code, out = run(["cooccur", "--dataset", work / "train", "--target", "road", "--victim", "rider", "--t", 3, "--out", tmp_path / "co.csv"], capsys)
    assert code == 0
    top = out.strip().splitlines()[-1]
    assert "sidewalk" in top and "car" in top and "rider" not in top
    table, names = CoOccurrenceTable.from_csv((tmp_path / "co.csv").read_text())
    assert np.array_equal(table.counts, cooccurrence_table(load_manifest(work / "train")).counts)
    code, out = run(["cooccur", "--dataset", work / "train", "--target", "road", "--t", 0], capsys)
    assert out.strip().splitlines()[-1] == "top:"
    assert main(["cooccur", "--dataset", str(work / "train"), "--target", "plane"]) == 1


def test_poison_modes(work, tmp_path):
    cfg = work / "tiny.json"
    assert main(["poison", "--config", str(cfg), "--dataset", str(work / "train"), "--out", str(tmp_path / "p0"), "--rate", "0"]) == 0
    clean = load_manifest(work / "train")
    p0 = load_manifest(tmp_path / "p0")
    assert all(np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask) for a, b in zip(clean, p0))
    assert json.loads((tmp_path / "p0" / "poison_log.json").read_text())["samples"] == []
    assert main(["poison", "--config", str(cfg), "--dataset", str(work / "train"), "--out", str(tmp_path / "fg"), "--mode", "fgba"]) == 0
    log = json.loads((tmp_path / "fg" / "poison_log.json").read_text())
    assert log["samples"] and all(s["replaced"] == {} for s in log["samples"])
    assert main(["poison", "--config", str(cfg), "--dataset", str(work / "train"), "--out", str(tmp_path / "bad"), "--rate", "2"]) == 1


@pytest.fixture(scope="module")
def trained(work):
    cfg = work / "tiny.json"
    assert main(["poison", "--config", str(cfg), "--dataset", str(work / "train"), "--out", str(work / "pois")]) == 0
    assert main(["train", "--config", str(cfg), "--dataset", str(work / "pois"), "--out", str(work / "m.json")]) == 0
    return work


def test_poison_log_replays(trained):
    from segpoison.attack import replay_log

    log = PoisonLog.from_json(json.loads((trained / "pois" / "poison_log.json").read_text()))
    again = replay_log(load_manifest(trained / "train"), log)
    pois = load_manifest(trained / "pois")
    assert all(a.mask.tobytes() == b.mask.tobytes() and a.image.tobytes() == b.image.tobytes() for a, b in zip(again, pois))


def test_train_eval_deterministic(trained, tmp_path):
    cfg = trained / "tiny.json"
    assert main(["train", "--config", str(cfg), "--dataset", str(trained / "pois"), "--out", str(tmp_path / "m2.json")]) == 0
    assert (tmp_path / "m2.json").read_bytes() == (trained / "m.json").read_bytes()
    args = ["eval", "--model", str(trained / "m.json"), "--test", str(trained / "test"), "--log", str(trained / "pois" / "poison_log.json")]
    assert main(args + ["--out", str(tmp_path / "r1.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2.json")]) == 0
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    report = json.loads((tmp_path / "r1.json").read_text())
    assert {"miou", "pixel_accuracy", "asr", "per_class_iou", "num_images"} <= set(report)
    assert 0 <= report["miou"] <= 1 and 0 <= report["asr"] <= 1


def test_trained_beats_random_init(trained):
    model = load_model(trained / "m.json")
    test = load_manifest(trained / "test")
    rand = init_model(model.spec, 8, model.hidden, 0)
    assert evaluate(model, test, test, [4], 1).miou > evaluate(rand, test, test, [4], 1).miou


def test_defend_kinds(trained, tmp_path):
    cfg = trained / "tiny.json"
    common = ["--config", str(cfg), "--model", str(trained / "m.json"), "--test", str(trained / "test"), "--log", str(trained / "pois" / "poison_log.json")]
    assert main(["defend", "strip", *common, "--out", str(tmp_path / "s.json"), "--scores", str(tmp_path / "s.csv")]) == 0
    s = json.loads((tmp_path / "s.json").read_text())
    assert s["kind"] == "strip" and len(s["rows"]) == 2
    assert next(csv.reader(io.StringIO((tmp_path / "s.csv").read_text()))) == ["sample_id", "score", "label"]
    assert main(["defend", "finetune", *common, "--clean", str(trained / "train"), "--out", str(tmp_path / "f.csv")]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "f.csv").read_text())))
    assert [float(r["cdr"]) for r in rows] == [0.0, 0.1]
    assert main(["eval", "--model", str(trained / "m.json"), "--test", str(trained / "test"), "--log", str(trained / "pois" / "poison_log.json"), "--out", str(tmp_path / "e.json")]) == 0
    e = json.loads((tmp_path / "e.json").read_text())
    assert float(rows[0]["asr"]) == pytest.approx(e["asr"], abs=1e-12) and float(rows[0]["miou"]) == pytest.approx(e["miou"], abs=1e-12)
    assert main(["defend", "dct", "--config", str(cfg), "--clean", str(trained / "test"), "--suspect", str(trained / "pois"), "--out", str(tmp_path / "d.json")]) == 0
    d = json.loads((tmp_path / "d.json").read_text())
    assert {"test_accuracy", "f1", "auroc"} <= set(d["rows"][0])
    assert main(["defend", "teco", *common]) == 1
    assert main(["defend", "strip", "--config", str(cfg)]) == 1


def test_reproduce(work, tmp_path):
    cfg = work / "tiny.json"
    assert main(["reproduce", "--config", str(cfg), "--out", str(tmp_path / "r1")]) == 0
    summary = json.loads((tmp_path / "r1" / "summary.json").read_text())
    assert set(summary["per_seed"]["0"]["asr"]) == {"clean", "conseg", "fgba", "iba_lite"}
    t_rows = list(csv.DictReader(io.StringIO((tmp_path / "r1" / "t_sweep.csv").read_text())))
    assert [int(r["t"]) for r in t_rows] == [0, 2]
    for name in ("comparison", "p_sweep", "rate_sweep", "position_sweep", "host_sweep", "finetune", "strip", "dct", "strip_scores"):
        assert (tmp_path / "r1" / f"{name}.csv").is_file()
    assert (tmp_path / "r1" / "seed_0" / "model_conseg.json").is_file()
    assert main(["reproduce", "--config", str(cfg), "--out", str(tmp_path / "r2")]) == 0
    a, b = tree_bytes(tmp_path / "r1"), tree_bytes(tmp_path / "r2")
    assert a == b


def test_split_disjoint():
    cfg = ExperimentConfig.from_dict(TINY)
    from segpoison.dataset import generate_synthetic_dataset

    tr, te = split_dataset(generate_synthetic_dataset(cfg.generator), cfg.n_train)
    assert not {s.id for s in tr} & {s.id for s in te} and len(tr) == 30 and len(te) == 10
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**TINY, "n_train": 40})


def test_reproduce_parallel_matches_serial(tmp_path):
    cfg = tmp_path / "two.json"
    cfg.write_text(json.dumps({**TINY, "seeds": [0, 1]}))
    assert main(["reproduce", "--config", str(cfg), "--out", str(tmp_path / "serial")]) == 0
    assert main(["reproduce", "--config", str(cfg), "--out", str(tmp_path / "par"), "--jobs", "2"]) == 0
    assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "par")
