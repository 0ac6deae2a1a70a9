import numpy as np
import pytest
from PIL import Image

from fade import toy_backbone


@pytest.fixture(scope="session")
def toy():
    return toy_backbone(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("FADE_CACHE_DIR", str(tmp_path / "fade-cache"))


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_mvtec(root, category="bottle", n_train=4, n_good=2, n_bad=2, size=16, seed=0):
    """Tiny MVTec-layout dataset with a bright square defect on noisy backgrounds."""
    rng = np.random.default_rng(seed)
    cat = root / category

    def noise():
        return rng.integers(90, 110, (size, size, 3), dtype=np.uint8)

    for sub in ("train/good", "test/good", "test/crack", "ground_truth/crack"):
        (cat / sub).mkdir(parents=True, exist_ok=True)
    for i in range(n_train):
        Image.fromarray(noise()).save(cat / "train" / "good" / f"{i:03d}.png")
    for i in range(n_good):
        Image.fromarray(noise()).save(cat / "test" / "good" / f"{i:03d}.png")
    for i in range(n_bad):
        img = noise()
        mask = np.zeros((size, size), dtype=np.uint8)
        y, x = 2 + 3 * i, 4 + i
        img[y : y + 5, x : x + 5] = 255
        mask[y : y + 5, x : x + 5] = 255
        Image.fromarray(img).save(cat / "test" / "crack" / f"{i:03d}.png")
        Image.fromarray(mask).save(cat / "ground_truth" / "crack" / f"{i:03d}_mask.png")
    return root


# -- acceptance report ---------------------------------------------------------
# Tests marked ``criterion("...")`` get one PASS / FAIL / NOT RUN line in the
# terminal summary.

_CRITERIA: dict[str, tuple[str, str, str]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args[0]))


def pytest_runtest_logreport(report):
    label = dict(report.user_properties).get("criterion")
    if label is None or not (report.when == "call" or report.outcome != "passed"):
        return
    outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "NOT RUN"}[report.outcome]
    detail = ""
    if report.skipped and isinstance(report.longrepr, tuple):
        detail = report.longrepr[2].removeprefix("Skipped: ")
    elif report.failed:
        detail = report.longreprtext.strip().splitlines()[-1][:200]
    _CRITERIA[report.nodeid] = (label, outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome, detail in _CRITERIA.values():
        terminalreporter.write_line(f"{outcome:<8} {label}" + (f"  ({detail})" if detail else ""))
