"""Adam training over several single-rate databases, plus bit-exact checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .autodiff import BatchNormState, Tape, backward
from .dataset import DatabaseSet, ScheduleState, batches, split
from .model import Model, NetworkConfig, build

log = logging.getLogger(__name__)

MAGIC = b"PVCN"
VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 0.001
    decay: float = 0.05
    decay_every: int = 100
    batch_size: int = 100
    val_fraction: float = 0.2
    loss: str = "weighted"
    gamma: float = 3.0
    epochs_per_round: int = 20
    tolerance: float = 1e-4
    max_epochs: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.loss not in ("weighted", "unweighted", "focal"):
            raise ValueError(f"loss must be weighted, unweighted or focal, got {self.loss!r}")
        if min(self.initial_lr, self.batch_size, self.epochs_per_round, self.decay_every) <= 0:
            raise ValueError("learning rate, batch size, epochs per round and decay period must be positive")
        if not 0 <= self.decay < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("decay and val_fraction must lie in [0, 1)")


def lr_at(epoch: int, config: TrainConfig | None = None) -> float:
    """Stepwise decay: 5% off the learning rate every 100 epochs by default."""
    c = config or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return c.initial_lr * (1.0 - c.decay) ** (epoch // c.decay_every)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: Model, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        params = model.parameters()
        return cls({p.name: np.zeros_like(p.data) for p in params},
                   {p.name: np.zeros_like(p.data) for p in params}, 0, beta1, beta2, eps)


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Non-finite gradients abort before any change."""
    for p in params:
        g = grads.get(p.name)
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {p.name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p in params:
        if not p.trainable:
            continue
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[p.name], state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.tensor.data = p.tensor.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    database: str
    lr: float
    train_loss: float
    val_loss: float
    pooled_val_loss: float
    pooled_val_acc: float


HISTORY_COLUMNS = ("epoch", "database", "lr", "train_loss", "val_loss", "pooled_val_loss", "pooled_val_acc")


def _copy_bn(bn: dict[str, BatchNormState]) -> dict[str, BatchNormState]:
    return {k: BatchNormState(s.mean.copy(), s.var.copy(), s.updates, s.momentum, s.eps) for k, s in bn.items()}


class Trainer:
    """Resumable training state: model, optimizer, schedule and history."""

    def __init__(self, model: Model, databases: list[DatabaseSet], config: TrainConfig):
        config.validate()
        if not databases:
            raise ValueError("training needs at least one database")
        names = [d.name for d in databases]
        if len(set(names)) != len(names):
            raise ValueError(f"database names must be unique, got {names}")
        for d in databases:
            model.check_length(d.length)
        self.model = model
        self.config = config
        self.loss = losses.loss_fn(config.loss, config.gamma)
        self.train_sets: dict[str, DatabaseSet] = {}
        self.val_sets: dict[str, DatabaseSet] = {}
        for k, d in enumerate(databases):
            s = split(d, config.val_fraction, seed=config.seed * 7919 + k)
            self.train_sets[d.name] = d.subset(s.train)
            self.val_sets[d.name] = d.subset(s.val) if s.val else d.subset(s.train)
        self.adam = AdamState.for_model(model, config.beta1, config.beta2, config.adam_eps)
        self.schedule = ScheduleState(names, config.epochs_per_round, config.tolerance)
        self.epoch = 0
        self.current: str | None = None
        self.round_epoch = 0
        self.history: list[EpochRecord] = []
        self.best_pooled = math.inf
        self.best_epoch = -1
        self.best_params: list[np.ndarray] | None = None
        self.best_bn: dict[str, BatchNormState] | None = None
        self.round_best = math.inf
        self.stale_rounds = 0
        self.stopped = False

    # -- evaluation -----------------------------------------------------

    def _val_loss(self, ds: DatabaseSet) -> tuple[float, int]:
        probs = predict(self.model, ds)
        value = float(self.loss(probs, ds.labels()).data.item())
        correct = int(np.count_nonzero((probs >= 0.5) == (ds.labels() == 1)))
        return value, correct

    def validate(self) -> tuple[dict[str, float], float, float]:
        per_db, total, n, correct = {}, 0.0, 0, 0
        for name, ds in self.val_sets.items():
            value, ok = self._val_loss(ds)
            per_db[name] = value / len(ds)
            total += value
            n += len(ds)
            correct += ok
        return per_db, total / n, correct / n

    # -- loop -----------------------------------------------------------

    def _train_epoch(self, name: str) -> float:
        ds = self.train_sets[name]
        lr = lr_at(self.epoch, self.config)
        params = self.model.parameters()
        k = self.schedule.names.index(name)
        total = 0.0
        for x, y in batches(ds, self.config.batch_size, seed=self.config.seed * 7919 + k, epoch=self.epoch):
            with Tape():
                probs = self.model.forward(x, "train")
                loss = self.loss(probs, y)
                value = float(loss.data.item())
                if not math.isfinite(value):
                    raise TrainingError(f"loss became non-finite at epoch {self.epoch} on {name}")
                grads = backward(loss, params)
            adam_step(params, grads, self.adam, lr)
            total += value
        return total / len(ds)

    def run(self, max_epochs: int | None = None) -> "Trainer":
        """Train until the schedule finishes, early stopping fires, or ``max_epochs`` total epochs ran."""
        cap = self.config.max_epochs if max_epochs is None else max_epochs
        while not self.stopped:
            if self.current is None:
                self.current = self.schedule.next_database()
                self.round_epoch = 0
                if self.current is None:
                    self.stopped = True
                    break
            if cap is not None and self.epoch >= cap:
                break
            name = self.current
            lr = lr_at(self.epoch, self.config)
            train_loss = self._train_epoch(name)
            per_db, pooled, acc = self.validate()
            self.history.append(EpochRecord(self.epoch, name, lr, train_loss, per_db[name], pooled, acc))
            log.info("epoch %d [%s] lr %.6g train %.5f val %.5f pooled %.5f acc %.4f",
                     self.epoch, name, lr, train_loss, per_db[name], pooled, acc)
            if pooled < self.best_pooled:
                self.best_pooled = pooled
                self.best_epoch = self.epoch
                self.best_params = [a.copy() for a in self.model.state_arrays()]
                self.best_bn = _copy_bn(self.model.bn)
            self.epoch += 1
            self.round_epoch += 1
            if self.round_epoch == self.config.epochs_per_round:
                self._end_round(name, per_db[name], pooled)
        return self

    def _end_round(self, name: str, db_val: float, pooled: float) -> None:
        self.schedule.report(name, db_val)
        self.current = None
        # global stop: a full cycle over the active databases without pooled improvement
        if self.round_best - pooled > self.config.tolerance:
            self.round_best = pooled
            self.stale_rounds = 0
        else:
            self.stale_rounds += 1
            if self.stale_rounds >= max(1, len(self.schedule.active)):
                log.info("pooled validation loss stalled for %d rounds; stopping", self.stale_rounds)
                self.stopped = True

    @property
    def finished(self) -> bool:
        return self.stopped

    def best_model(self) -> Model:
        """Copy of the model at the best pooled-validation epoch (current weights if none yet)."""
        m = build(NetworkConfig.from_dict(self.model.config.to_dict()))
        m.load_arrays(self.best_params if self.best_params is not None else self.model.state_arrays())
        m.bn = _copy_bn(self.best_bn if self.best_bn is not None else self.model.bn)
        return m


def train(model: Model, databases: list[DatabaseSet], config: TrainConfig,
          diagnostic_path=None) -> tuple[Model, list[EpochRecord], Trainer]:
    """Run the full schedule; returns the best-validation model, the history and the trainer."""
    trainer = Trainer(model, databases, config)
    try:
        trainer.run()
    except TrainingError:
        if diagnostic_path is not None:
            Checkpoint.from_trainer(trainer).save(diagnostic_path)
            log.error("diagnostic checkpoint written to %s", diagnostic_path)
        raise
    return trainer.best_model(), trainer.history, trainer


def predict(model: Model, ds: DatabaseSet, chunk: int = 500) -> np.ndarray:
    x = ds.matrix()
    if x.shape[0] == 0:
        return np.zeros(0)
    return np.concatenate([model.predict(x[i : i + chunk]) for i in range(0, x.shape[0], chunk)])


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC, u32 version, then blocks each prefixed by a u64 byte length:
#   config (JSON) | parameters (f64 LE, enumeration order) | optimizer
#   (u64 step, m blob, v blob) | batch-norm (mean, var per layer, sorted) |
#   state (JSON: rng, schedule, history, bookkeeping) | best parameters |
#   best batch-norm


def _blob(arrays) -> bytes:
    if not arrays:
        return b""
    return np.concatenate([np.asarray(a, dtype="<f8").reshape(-1) for a in arrays]).tobytes()


def _unblob(data: bytes, shapes, what: str) -> list[np.ndarray]:
    need = sum(int(np.prod(s)) for s in shapes) * 8
    if len(data) != need:
        raise CheckpointError(f"{what} block holds {len(data)} bytes, expected {need}")
    flat = np.frombuffer(data, dtype="<f8").astype(np.float64)
    out, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(flat[off : off + n].reshape(s).copy())
        off += n
    return out


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class Checkpoint:
    network: NetworkConfig
    train: TrainConfig
    params: list[np.ndarray]
    adam_step: int
    adam_m: list[np.ndarray]
    adam_v: list[np.ndarray]
    bn: dict[str, BatchNormState]
    state: dict = field(default_factory=dict)
    best_params: list[np.ndarray] | None = None
    best_bn: dict[str, BatchNormState] | None = None

    # -- construction ---------------------------------------------------

    @classmethod
    def from_trainer(cls, t: Trainer) -> "Checkpoint":
        names = [p.name for p in t.model.parameters()]
        state = {
            "rng": {"seed": t.config.seed, "epoch": t.epoch},
            "schedule": t.schedule.to_dict(),
            "history": [asdict(h) for h in t.history],
            "epoch": t.epoch,
            "current": t.current,
            "round_epoch": t.round_epoch,
            "best_pooled": t.best_pooled,
            "best_epoch": t.best_epoch,
            "round_best": t.round_best,
            "stale_rounds": t.stale_rounds,
            "stopped": t.stopped,
        }
        return cls(t.model.config, t.config, t.model.state_arrays(), t.adam.step,
                   [t.adam.m[n] for n in names], [t.adam.v[n] for n in names],
                   t.model.bn, state, t.best_params, t.best_bn)

    @classmethod
    def from_model(cls, model: Model, train: TrainConfig | None = None) -> "Checkpoint":
        arrays = model.state_arrays()
        zeros = [np.zeros_like(a) for a in arrays]
        return cls(model.config, train or TrainConfig(), arrays, 0, zeros, [z.copy() for z in zeros], model.bn)

    def model(self, best: bool = True) -> Model:
        m = build(NetworkConfig.from_dict(self.network.to_dict()))
        use_best = best and self.best_params is not None
        m.load_arrays(self.best_params if use_best else self.params)
        m.bn = _copy_bn(self.best_bn if use_best and self.best_bn is not None else self.bn)
        return m

    def trainer(self, databases: list[DatabaseSet]) -> Trainer:
        """Rebuild a trainer positioned exactly where this checkpoint was taken."""
        t = Trainer(self.model(best=False), databases, TrainConfig(**asdict(self.train)))
        names = [p.name for p in t.model.parameters()]
        t.adam.step = self.adam_step
        t.adam.m = {n: a.copy() for n, a in zip(names, self.adam_m)}
        t.adam.v = {n: a.copy() for n, a in zip(names, self.adam_v)}
        s = self.state
        if s:
            t.schedule = ScheduleState.from_dict(s["schedule"])
            t.history = [EpochRecord(**h) for h in s["history"]]
            t.epoch = s["epoch"]
            t.current = s["current"]
            t.round_epoch = s["round_epoch"]
            t.best_pooled = s["best_pooled"]
            t.best_epoch = s["best_epoch"]
            t.round_best = s["round_best"]
            t.stale_rounds = s["stale_rounds"]
            t.stopped = s["stopped"]
        t.best_params = None if self.best_params is None else [a.copy() for a in self.best_params]
        t.best_bn = None if self.best_bn is None else _copy_bn(self.best_bn)
        return t

    # -- serialization --------------------------------------------------

    def _shapes(self) -> list[tuple[int, ...]]:
        return [p.data.shape for p in build(NetworkConfig.from_dict(self.network.to_dict())).parameters()]

    def to_bytes(self) -> bytes:
        bn_names = sorted(self.bn)
        config = {
            "network": self.network.to_dict(),
            "train": asdict(self.train),
            "bn_layers": {k: {"channels": int(self.bn[k].mean.size), "momentum": self.bn[k].momentum,
                              "eps": self.bn[k].eps, "updates": self.bn[k].updates} for k in bn_names},
            "has_best": self.best_params is not None,
            "best_bn_updates": {k: v.updates for k, v in sorted((self.best_bn or {}).items())},
        }
        blocks = [
            _dumps(config),
            _blob(self.params),
            struct.pack("<Q", self.adam_step) + _blob(self.adam_m) + _blob(self.adam_v),
            _blob([a for k in bn_names for a in (self.bn[k].mean, self.bn[k].var)]),
            _dumps(self.state),
            _blob(self.best_params or []),
            _blob([a for k in sorted(self.best_bn or {}) for a in (self.best_bn[k].mean, self.best_bn[k].var)]),
        ]
        out = [MAGIC, struct.pack("<I", VERSION)]
        for b in blocks:
            out.append(struct.pack("<Q", len(b)))
            out.append(b)
        return b"".join(out)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 8:
            raise CheckpointError(f"checkpoint truncated: header needs 8 bytes, got {len(data)}")
        if data[:4] != MAGIC:
            raise CheckpointError(f"not a checkpoint: magic {data[:4]!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", data[4:8])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}; this build reads version {VERSION}")
        blocks, off = [], 8
        for i in range(7):
            if off + 8 > len(data):
                raise CheckpointError(
                    f"checkpoint truncated: block {i} length prefix needs 8 bytes at offset {off}, "
                    f"file has {len(data)} bytes")
            (n,) = struct.unpack("<Q", data[off : off + 8])
            off += 8
            if off + n > len(data):
                raise CheckpointError(
                    f"checkpoint truncated: block {i} expects {n} bytes, only {len(data) - off} remain "
                    f"(expected total length >= {off + n}, actual {len(data)})")
            blocks.append(data[off : off + n])
            off += n
        if off != len(data):
            raise CheckpointError(f"checkpoint has {len(data) - off} trailing bytes")
        try:
            config = json.loads(blocks[0])
            network = NetworkConfig.from_dict(config["network"])
            train_cfg = TrainConfig(**config["train"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CheckpointError(f"corrupt config block: {exc}") from None
        ckpt = cls(network, train_cfg, [], 0, [], [], {})
        shapes = ckpt._shapes()
        ckpt.params = _unblob(blocks[1], shapes, "parameter")
        if len(blocks[2]) < 8:
            raise CheckpointError("optimizer block truncated")
        (ckpt.adam_step,) = struct.unpack("<Q", blocks[2][:8])
        mv = _unblob(blocks[2][8:], shapes + shapes, "optimizer")
        ckpt.adam_m, ckpt.adam_v = mv[: len(shapes)], mv[len(shapes) :]
        ckpt.bn = _bn_from(config["bn_layers"], blocks[3], "batch-norm")
        ckpt.state = json.loads(blocks[4])
        if config["has_best"]:
            ckpt.best_params = _unblob(blocks[5], shapes, "best parameter")
            layers = {k: {**v, "updates": config["best_bn_updates"][k]} for k, v in config["bn_layers"].items()}
            ckpt.best_bn = _bn_from(layers, blocks[6], "best batch-norm")
        return ckpt

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
        return cls.from_bytes(data)


def _bn_from(layers: dict, blob: bytes, what: str) -> dict[str, BatchNormState]:
    names = sorted(layers)
    shapes = [(layers[k]["channels"],) for k in names for _ in (0, 1)]
    arrays = _unblob(blob, shapes, what)
    return {k: BatchNormState(arrays[2 * i], arrays[2 * i + 1], layers[k]["updates"],
                              layers[k]["momentum"], layers[k]["eps"]) for i, k in enumerate(names)}


def save(checkpoint: Checkpoint, path) -> None:
    checkpoint.save(path)


def load(path) -> Checkpoint:
    return Checkpoint.load(path)
