"""Occlusion attention maps for single beats."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class AttentionMap:
    intensities: np.ndarray
    beat: np.ndarray
    window: int
    provenance: str = ""
    p0: float = float("nan")

    def __len__(self) -> int:
        return self.intensities.size

    def to_csv(self, path) -> None:
        """One row per sample: position, beat value, attention intensity."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "sample", "intensity"])
            for i, (v, a) in enumerate(zip(self.beat, self.intensities)):
                w.writerow([i, repr(float(v)), repr(float(a))])


def occlusion_spans(length: int, window: int) -> list[tuple[int, int]]:
    """Half-open span zeroed when the window is centred on each position."""
    half = window // 2
    lo_off = half
    hi_off = window - half - 1
    return [(max(0, i - lo_off), min(length, i + hi_off + 1)) for i in range(length)]


def occlusion_map(model, beat, window: int = 5, provenance: str = "") -> AttentionMap:
    """Probability drop when a window around each position is zeroed, scaled to [0, 1].

    ``model`` needs a ``predict(x[B,1,L]) -> probs[B]`` method; all occluded
    copies run as one inference batch.
    """
    x = np.asarray(beat, dtype=np.float64).reshape(-1)
    L = x.size
    if window < 1:
        raise ValueError("occlusion window must be >= 1")
    if window >= L:
        raise ValueError(f"occlusion window {window} must be shorter than the beat ({L} samples)")
    p0 = float(model.predict(x[None, None, :])[0])
    batch = np.repeat(x[None, :], L, axis=0)
    for i, (lo, hi) in enumerate(occlusion_spans(L, window)):
        batch[i, lo:hi] = 0.0
    p = np.asarray(model.predict(batch[:, None, :]), dtype=np.float64)
    drop = np.maximum(0.0, p0 - p)
    top = drop.max()
    intensities = drop / top if top > 0 else np.zeros(L)
    return AttentionMap(intensities, x, window, provenance, p0)
