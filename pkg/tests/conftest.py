import math

import numpy as np
import pytest

from illumnorm.dataset import DatasetManifest, Label, SceneRecord
from illumnorm.synthgen import GenConfig, generate_split


@pytest.fixture(scope="session")
def small_gen_config():
    return GenConfig(size=32, train_scenes=24, test_scenes=12, variants=4, seed=11)


@pytest.fixture(scope="session")
def small_train(small_gen_config):
    return generate_split(small_gen_config, "train")


@pytest.fixture(scope="session")
def small_test(small_gen_config):
    return generate_split(small_gen_config, "test")


def make_manifest(labels, n=3, size=16, seed=0, split="train"):
    """In-memory manifest of random images with the given labels."""
    rng = np.random.default_rng(seed)
    scenes = [
        SceneRecord(k, lb if isinstance(lb, Label) else Label(seats=lb), list(rng.random((n, size, size, 1)).astype(np.float32)))
        for k, lb in enumerate(labels)
    ]
    return DatasetManifest(None, split, scenes)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


ALL_SEAT_LABELS = [(a, b, c) for a in range(4) for b in range(4) for c in range(4)]


def brute_force_ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Literal per-window SSIM, written independently of the library."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    half = window_size // 2
    w = np.empty((window_size, window_size))
    for i in range(window_size):
        for j in range(window_size):
            w[i, j] = math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma**2))
    w /= w.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    h, wd, ch = a.shape
    per_channel = []
    for c in range(ch):
        vals = []
        for y in range(h - window_size + 1):
            for x in range(wd - window_size + 1):
                pa = a[y : y + window_size, x : x + window_size, c]
                pb = b[y : y + window_size, x : x + window_size, c]
                ma = (w * pa).sum()
                mb = (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                vals.append(
                    ((2 * ma * mb + c1) * (2 * cov + c2))
                    / ((ma**2 + mb**2 + c1) * (va + vb + c2))
                )
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))
