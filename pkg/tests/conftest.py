import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ftk.data import encode_ppm  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def build_ppm_tree(root: Path, class_counts: dict, size: int = 8, seed: int = 0) -> Path:
    """Write a class-per-directory tree of random PPM images."""
    gen = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for cls, n in class_counts.items():
        d = root / cls
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            img = gen.random((3, size, size)).astype(np.float32)
            (d / f"{i:04d}.ppm").write_bytes(encode_ppm(img))
    return root


@pytest.fixture
def ppm_tree(tmp_path):
    def _build(class_counts, size=8, seed=0, name="data"):
        return build_ppm_tree(tmp_path / name, class_counts, size=size, seed=seed)

    return _build


def criterion(name):
    """Tag an acceptance test so the reporting hook prints its pass/fail line."""

    def wrap(fn):
        fn._criterion = name
        return fn

    return wrap


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        name = getattr(item.function, "_criterion", None)
        if name:
            verdict = "PASS" if rep.passed else "FAIL"
            print(f"\n[{verdict}] {name} ({rep.duration:.1f}s)")
