"""Shared fixtures and scene builders for the test suite."""
from __future__ import annotations

import numpy as np
import pytest

from boxprompt.segmenter import MockScene, _orthonormal_rows

# Filled by the acceptance module; printed after the run so each criterion
# gets one visible pass/fail line even under output capture.
ACCEPTANCE_RESULTS: list[tuple[str, str, float]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, seconds in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status:4s}  {name}  ({seconds:.2f}s)")


def rect_class_map(size: int, rects) -> np.ndarray:
    """Class map with one axis-aligned rectangle per (class_id, top, left, h, w)."""
    class_map = np.zeros((size, size), dtype=np.uint8)
    for class_id, top, left, height, width in rects:
        class_map[top:top + height, left:left + width] = class_id
    return class_map


def uniform_probs(class_map: np.ndarray, num_classes: int,
                  confidence: float = 0.9) -> np.ndarray:
    """Posterior map: ``confidence`` on the true class, rest spread evenly."""
    height, width = class_map.shape
    probs = np.full((height, width, num_classes),
                    (1.0 - confidence) / (num_classes - 1), dtype=np.float32)
    rows, cols = np.indices(class_map.shape)
    probs[rows, cols, class_map] = confidence
    return probs


def class_features(class_map: np.ndarray, dim: int = 8, seed: int = 99) -> np.ndarray:
    """Per-pixel features equal to an orthonormal base vector of the class."""
    bases = _orthonormal_rows(int(class_map.max()) + 1, dim,
                              np.random.default_rng(seed))
    return bases[class_map].astype(np.float32)


@pytest.fixture
def single_object_scene():
    """One 12x12 rectangle of class 1 inside a 32x32 image."""
    class_map = rect_class_map(32, [(1, 10, 10, 12, 12)])
    return MockScene(class_map, seed=3)
