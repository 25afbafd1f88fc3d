import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from segpoison.dataset import ClassTable, DatasetManifest, Sample

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_classes(n: int) -> ClassTable:
    return ClassTable.from_names((f"c{i}", (i * 30 % 256, i * 70 % 256, i * 110 % 256)) for i in range(n))


def manifest_from_masks(masks, n_classes: int, seed: int = 0) -> DatasetManifest:
    """Dataset whose images are the class colors plus a little seeded noise."""
    classes = make_classes(n_classes)
    rng = np.random.default_rng(seed)
    samples = []
    for i, m in enumerate(masks):
        m = np.asarray(m, dtype=np.uint8)
        img = np.clip(classes.colors()[m].astype(int) + rng.integers(-3, 4, size=m.shape + (3,)), 0, 255)
        samples.append(Sample(f"s{i:03d}", img.astype(np.uint8), m))
    return DatasetManifest(classes, tuple(samples))


@pytest.fixture
def classes4():
    return make_classes(4)


# acceptance criteria record their verdicts here; printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
