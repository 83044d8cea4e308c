"""Beat-record files, splits, batching, the multi-database schedule and synthetic data.

A beat-record file holds one JSON object per line::

    {"id": "...", "db": "...", "fs": 360.0, "label": 0, "samples": [...]}

Files ending in ``.gz`` are gzip-compressed. Every record in a file shares
one sampling rate and its sample count must equal ``window_length(fs)``.
"""

from __future__ import annotations

import gzip
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .preprocess import BeatWindow, normalize, pre_samples, window_length

log = logging.getLogger(__name__)

FIELDS = ("id", "db", "fs", "label", "samples")


class FormatError(ValueError):
    """A beat-record file is malformed."""


@dataclass
class BeatRecord:
    id: str
    db: str
    fs: float
    label: int
    samples: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "db": self.db, "fs": float(self.fs), "label": int(self.label),
                           "samples": [float(v) for v in self.samples]})

    @classmethod
    def from_window(cls, beat: BeatWindow) -> "BeatRecord":
        db, rec, r = beat.provenance
        return cls(f"{db}/{rec}/{r}", db, beat.fs, beat.label, beat.samples)


@dataclass
class DatabaseSet:
    name: str
    fs: float
    records: list[BeatRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def length(self) -> int:
        return window_length(self.fs)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def matrix(self) -> np.ndarray:
        """All beats stacked as ``[N, 1, L]``."""
        if not self.records:
            return np.zeros((0, 1, self.length))
        return np.stack([r.samples for r in self.records])[:, None, :]

    def subset(self, indices) -> "DatabaseSet":
        return DatabaseSet(self.name, self.fs, [self.records[i] for i in indices])

    def find(self, beat_id: str) -> BeatRecord:
        for r in self.records:
            if r.id == beat_id:
                return r
        raise KeyError(f"beat {beat_id!r} not found in {self.name}")


# ---------------------------------------------------------------------------
# file format


def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        if "w" in mode:
            # fixed mtime keeps compressed output byte-reproducible
            raw = open(path, "wb")
            return io.TextIOWrapper(gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename=""),
                                    encoding="utf-8", newline="\n")
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, mode, encoding="utf-8", newline="\n" if "w" in mode else None)


def parse_record(line: str, lineno: int) -> BeatRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"line {lineno}: not valid JSON ({exc.msg})") from None
    if not isinstance(obj, dict) or any(k not in obj for k in FIELDS):
        raise FormatError(f"line {lineno}: expected fields {', '.join(FIELDS)}")
    try:
        fs = float(obj["fs"])
        label = int(obj["label"])
        samples = np.asarray(obj["samples"], dtype=np.float64)
    except (TypeError, ValueError):
        raise FormatError(f"line {lineno}: fs, label or samples have the wrong type") from None
    if label not in (0, 1):
        raise FormatError(f"line {lineno}: label must be 0 or 1, got {label}")
    if samples.ndim != 1:
        raise FormatError(f"line {lineno}: samples must be a flat list")
    if fs <= 0:
        raise FormatError(f"line {lineno}: fs must be positive")
    expected = window_length(fs)
    if samples.size != expected:
        raise FormatError(
            f"line {lineno}: {samples.size} samples at fs {fs:g} Hz; "
            f"rate-scaled window length expects {expected} (150 * fs / 360)"
        )
    if not np.all(np.isfinite(samples)):
        raise FormatError(f"line {lineno}: non-finite sample values")
    return BeatRecord(str(obj["id"]), str(obj["db"]), fs, label, samples)


def load(path) -> DatabaseSet:
    path = Path(path)
    records: list[BeatRecord] = []
    with _open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            records.append(parse_record(line, lineno))
    if not records:
        log.warning("%s holds no records", path)
        return DatabaseSet(path.stem.split(".")[0], 0.0, [])
    rates = {r.fs for r in records}
    if len(rates) > 1:
        raise FormatError(f"{path}: mixed sampling rates {sorted(rates)} in one file")
    names = {r.db for r in records}
    name = records[0].db if len(names) == 1 else path.stem.split(".")[0]
    return DatabaseSet(name, records[0].fs, records)


def save(dataset: DatabaseSet, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open_text(path, "w") as fh:
        for r in dataset.records:
            fh.write(r.to_json())
            fh.write("\n")


# ---------------------------------------------------------------------------
# splits and batches


@dataclass
class Split:
    train: list[int]
    val: list[int]


def split(dataset: DatabaseSet, val_fraction: float = 0.2, seed: int = 0) -> Split:
    """Stratified, seeded train/validation split of record indices."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty set")
    if n == 1:
        log.warning("%s has a single record; validation split is empty", dataset.name)
        return Split([0], [])
    rng = np.random.default_rng(seed)
    labels = dataset.labels()
    train, val = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(val_fraction * idx.size))
        val.extend(int(i) for i in idx[:n_val])
        train.extend(int(i) for i in idx[n_val:])
    return Split(sorted(train), sorted(val))


def batches(dataset: DatabaseSet, batch_size: int = 100, seed: int = 0,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x[B,1,L], y[B])`` in an order reshuffled per epoch; the last batch may be short."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot batch an empty set")
    x = dataset.matrix()
    y = dataset.labels()
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        sel = order[start : start + batch_size]
        yield x[sel], y[sel]


# ---------------------------------------------------------------------------
# multi-database schedule


@dataclass
class DbProgress:
    best_val: float = math.inf
    active: bool = True
    rounds: int = 0


@dataclass
class ScheduleState:
    """Round-robin visiting order with per-database discard on stalled validation loss."""

    names: list[str]
    epochs_per_round: int = 20
    tolerance: float = 1e-4
    progress: dict[str, DbProgress] = field(default_factory=dict)
    round: int = 0
    cursor: int = 0

    def __post_init__(self):
        if not self.names:
            raise ValueError("schedule needs at least one database")
        for n in self.names:
            self.progress.setdefault(n, DbProgress())

    @property
    def active(self) -> list[str]:
        return [n for n in self.names if self.progress[n].active]

    @property
    def done(self) -> bool:
        return not self.active

    def next_database(self) -> str | None:
        """Next active database in round-robin order, or ``None`` when all are discarded."""
        if self.done:
            return None
        k = len(self.names)
        for step in range(k):
            name = self.names[(self.cursor + step) % k]
            if self.progress[name].active:
                self.cursor = (self.cursor + step + 1) % k
                return name
        return None

    def report(self, name: str, val_loss: float) -> bool:
        """Record the validation loss after a round; returns False if the database is discarded."""
        p = self.progress[name]
        p.rounds += 1
        self.round += 1
        if not p.best_val - val_loss > self.tolerance:
            p.active = False
            p.best_val = min(p.best_val, val_loss)
            log.info("database %s discarded after round %d (val loss %.6f)", name, p.rounds, val_loss)
            return False
        p.best_val = val_loss
        return True

    def to_dict(self) -> dict:
        return {"names": list(self.names), "epochs_per_round": self.epochs_per_round,
                "tolerance": self.tolerance, "round": self.round, "cursor": self.cursor,
                "progress": {k: asdict(v) for k, v in self.progress.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleState":
        prog = {k: DbProgress(**v) for k, v in d["progress"].items()}
        return cls(d["names"], d["epochs_per_round"], d["tolerance"], prog, d["round"], d["cursor"])


def schedule_step(state: ScheduleState, last: str | None = None,
                  val_loss: float | None = None) -> str | None:
    """Report the finished round of ``last`` (if any) and pick the next database."""
    if last is not None:
        state.report(last, val_loss)
    return state.next_database()


# ---------------------------------------------------------------------------
# synthetic beats


@dataclass
class SyntheticConfig:
    """Surrogate beats with textbook morphology.

    Non-PVC: narrow upright complex, small upright T deflection after it.
    PVC: complex at least ``pvc_width_factor`` times wider and an inverted
    T deflection. ``jitter`` scales per-beat amplitude/width variation;
    ``noise`` is the std of additive white noise before normalization.
    """

    per_class: int = 400
    rates: list[float] = field(default_factory=lambda: [360.0, 250.0, 128.0])
    pvc_ratio: float = 1.0
    qrs_sigma: float = 0.010
    pvc_width_factor: float = 2.2
    t_delay: float = 0.19
    t_sigma: float = 0.035
    t_amplitude: float = 0.3
    pvc_t_amplitude: float = -0.45
    jitter: float = 0.1
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if not self.rates or any(r <= 100 for r in self.rates):
            raise ValueError("synthetic sampling rates must all exceed 100 Hz")
        if self.per_class <= 0 or self.pvc_ratio <= 0:
            raise ValueError("per_class and pvc_ratio must be positive")
        if self.pvc_width_factor < 1.8:
            raise ValueError("pvc_width_factor must be at least 1.8")
        if not 0 <= self.jitter < 1 or self.noise < 0:
            raise ValueError("jitter must lie in [0, 1) and noise must be non-negative")


def beat_template(fs: float, pvc: bool, cfg: SyntheticConfig, amp: float = 1.0,
                  width: float = 1.0, t_amp: float = 1.0) -> np.ndarray:
    n = window_length(fs)
    t = (np.arange(n) - pre_samples(fs)) / fs
    sigma = cfg.qrs_sigma * width * (cfg.pvc_width_factor if pvc else 1.0)
    qrs = amp * np.exp(-0.5 * (t / sigma) ** 2)
    # small trailing S dip
    qrs -= 0.2 * amp * np.exp(-0.5 * ((t - 2.5 * sigma) / (0.8 * sigma)) ** 2)
    t_peak = cfg.pvc_t_amplitude if pvc else cfg.t_amplitude
    twave = t_amp * t_peak * np.exp(-0.5 * ((t - cfg.t_delay) / cfg.t_sigma) ** 2)
    return qrs + twave


def synthesize(cfg: SyntheticConfig) -> list[DatabaseSet]:
    """One database per sampling rate, beats normalized to [-1, 1]."""
    cfg.validate()
    sets = []
    n_pvc = max(1, int(round(cfg.per_class * cfg.pvc_ratio)))
    for k, fs in enumerate(cfg.rates):
        rng = np.random.default_rng([cfg.seed, k])
        name = f"syn{int(fs) if float(fs).is_integer() else fs}"
        labels = np.array([1] * n_pvc + [0] * cfg.per_class)
        labels = labels[rng.permutation(labels.size)]
        records = []
        for i, lab in enumerate(labels):
            j = cfg.jitter
            amp, width, t_amp = 1.0 + j * rng.uniform(-1, 1, size=3)
            beat = beat_template(fs, bool(lab), cfg, amp, width, t_amp)
            if cfg.noise > 0:
                beat = beat + rng.normal(0.0, cfg.noise, size=beat.size)
            records.append(BeatRecord(f"{name}-{i:05d}", name, float(fs), int(lab), normalize(beat)))
        sets.append(DatabaseSet(name, float(fs), records))
    return sets
