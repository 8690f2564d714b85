"""Shared fixtures: synthetic CSV builders, datasets and cascades."""

import numpy as np
import pytest

from fer_forge.data import LabeledDataset


def make_fer_csv(rows, header="emotion,pixels,Usage"):
    """Assemble CSV text from (emotion, pixel-iterable, usage) triples."""
    lines = [header]
    for emotion, pixels, usage in rows:
        pixel_str = " ".join(str(int(p)) for p in pixels)
        if usage is None:
            lines.append(f"{emotion},{pixel_str}")
        else:
            lines.append(f"{emotion},{pixel_str},{usage}")
    return "\n".join(lines) + "\n"


def random_rows(n, seed=0, usage_cycle=("Training", "PublicTest", "PrivateTest")):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        usage = usage_cycle[i % len(usage_cycle)] if usage_cycle else None
        rows.append((i % 7, rng.integers(0, 256, 2304), usage))
    return rows


def synthetic_dataset(n, seed=0) -> LabeledDataset:
    """Random images with labels cycling through the 7 classes."""
    rng = np.random.default_rng(seed)
    images = rng.random((n, 1, 48, 48)).astype(np.float32)
    labels = (np.arange(n) % 7).astype(np.int64)
    onehots = np.zeros((n, 7), dtype=np.float32)
    onehots[np.arange(n), labels] = 1.0
    return LabeledDataset(images, labels, onehots)


def accept_all_cascade_doc(window=24):
    """Single stage that can never fail; the stump's rects cancel exactly."""
    return {
        "window_width": window,
        "window_height": window,
        "stages": [
            {
                "threshold": -1e9,
                "stumps": [
                    {
                        "rects": [[0, 0, window, window, 1.0], [0, 0, window, window, -1.0]],
                        "threshold": 0.0,
                        "left": 0.0,
                        "right": 0.0,
                    }
                ],
            }
        ],
    }


def reject_all_cascade_doc(window=24, stages=2):
    """First stage threshold is unreachable; later stages prove short-circuit."""
    stage = {
        "threshold": 1e9,
        "stumps": [
            {
                "rects": [[0, 0, window, window, 1.0], [0, 0, window, window, -1.0]],
                "threshold": 0.0,
                "left": 0.0,
                "right": 0.0,
            }
        ],
    }
    return {
        "window_width": window,
        "window_height": window,
        "stages": [dict(stage) for _ in range(stages)],
    }


def dark_top_cascade_doc(window=24):
    """One stump firing on dark-top/bright-bottom windows.

    The feature is (bottom weight +2 over half) + (full weight -1): positive
    when the bottom half is brighter. Windows with the feature above the
    stump threshold score +1 and pass the 0.5 stage threshold; others score
    -1 and fail.
    """
    half = window // 2
    return {
        "window_width": window,
        "window_height": window,
        "stages": [
            {
                "threshold": 0.5,
                "stumps": [
                    {
                        "rects": [[0, 0, window, window, -1.0], [0, half, window, half, 2.0]],
                        "threshold": 1.0,
                        "left": -1.0,
                        "right": 1.0,
                    }
                ],
            }
        ],
    }


@pytest.fixture
def tiny_dataset():
    return synthetic_dataset(12, seed=7)
