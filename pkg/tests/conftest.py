import os
from pathlib import Path

import numpy as np
import pytest

from fastnet.data import find_cifar_files
from fastnet.network import ArchitectureSpec

# Same topology as FastNet (4 groups, 12 3x3 cells, three 1x1 cells) at 1/8 width.
NARROW_SPEC = ArchitectureSpec(
    groups=((8, 16, 16, 16), (16, 16, 16), (16, 16, 16), (16, 16)),
    head=(16, 16, 10),
    num_classes=10,
)


def synthetic_pixels(n, num_classes=10, seed=0, noise=40.0, labels=None):
    """Class-prototype images plus noise: a learnable stand-in for CIFAR."""
    rng = np.random.default_rng(seed)
    protos = rng.integers(30, 226, (num_classes, 3, 8, 8)).astype(np.float64)
    protos = protos.repeat(4, axis=2).repeat(4, axis=3)
    if labels is None:
        labels = rng.integers(0, num_classes, n)
    img = protos[labels] + rng.normal(0, noise, (n, 3, 32, 32))
    return np.clip(img, 0, 255).astype(np.uint8), np.asarray(labels)


def cifar_bytes(pixels, labels, variant="c10", coarse=None):
    n = len(labels)
    flat = pixels.reshape(n, 3072)
    if variant == "c10":
        head = np.asarray(labels, np.uint8)[:, None]
    else:
        coarse = np.zeros(n, np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
        head = np.stack([coarse, np.asarray(labels, np.uint8)], axis=1)
    return np.concatenate([head, flat], axis=1).tobytes()


def write_cifar10_dir(root, n_train=200, n_test=100, seed=0):
    """A miniature extracted cifar-10-batches-bin directory."""
    d = Path(root) / "cifar-10-batches-bin"
    d.mkdir(parents=True, exist_ok=True)
    pix, lab = synthetic_pixels(n_train + n_test, seed=seed)
    per = -(-n_train // 5)
    for i in range(5):
        sl = slice(i * per, min(n_train, (i + 1) * per))
        (d / f"data_batch_{i + 1}.bin").write_bytes(cifar_bytes(pix[sl], lab[sl]))
    (d / "test_batch.bin").write_bytes(cifar_bytes(pix[n_train:], lab[n_train:]))
    return Path(root)


@pytest.fixture(scope="session")
def synthetic_cifar_dir(tmp_path_factory):
    return write_cifar10_dir(tmp_path_factory.mktemp("cifar"))


def real_cifar10_dir():
    """Directory holding the real CIFAR-10 binary archive, or None.

    Looked up from $FASTNET_CIFAR10_DIR, then ./data under the repo root.
    """
    candidates = [os.environ.get("FASTNET_CIFAR10_DIR"), Path(__file__).resolve().parents[1] / "data"]
    for c in filter(None, candidates):
        try:
            find_cifar_files(c, "c10", "train")
            find_cifar_files(c, "c10", "test")
            return Path(c)
        except FileNotFoundError:
            continue
    return None


# --- per-criterion pass/fail report ---------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        prev = _criteria.get(number, (title, True))
        _criteria[number] = (title, prev[1] and report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
