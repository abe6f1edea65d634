"""Loss, Adam, the early-stopped training loop and checkpoint persistence."""
from __future__ import annotations

import csv
import io
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DatasetManifest, batches
from .errors import CompatibilityError, ConfigurationError, ContractError, FormatError, IngestionError
from .model import ModelConfig, ModelParams, build, forward, param_specs
from .tensor import Tensor, backward, getitem, log_softmax, mean, no_grad, scale

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SECT"
CHECKPOINT_VERSION = 1


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.intp)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ContractError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    picked = getitem(log_softmax(logits, axis=-1), (np.arange(b), labels))
    return scale(mean(picked), -1.0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 32
    patience: int = 3
    max_epochs: int = 100
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # stop as soon as an epoch's train accuracy reaches this (None: never)
    target_train_acc: float | None = None
    workers: int = 1
    cache_images: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update in place, then zero every gradient."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
    state.t += 1
    b1, b2, lr, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate, cfg.adam_eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        g[...] = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.train_acc), repr(r.val_loss), repr(r.val_acc),
                        f"{r.seconds:.3f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        rows = list(csv.DictReader(Path(path).read_text(encoding="utf-8").splitlines()))
        recs = [EpochRecord(int(r["epoch"]), *(float(r[c]) for c in cls.COLUMNS[1:])) for r in rows]
        out = cls(recs)
        if recs:
            out.best_epoch = min(recs, key=lambda r: (r.val_loss, r.epoch)).epoch
        return out


class EarlyStopping:
    """Tracks the best validation loss and its snapshot.

    An epoch improves only if its loss is strictly below the best so far;
    ``patience`` consecutive non-improving epochs end training.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.best_state = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float, snapshot: Callable[[], object]) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = snapshot()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def evaluate(params: ModelParams, manifest: DatasetManifest, split_name: str, batch_size: int = 32,
             workers: int = 1, cache: bool = False) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Eval-mode pass; returns (mean per-sample loss, accuracy, preds, labels)."""
    loss_sum, preds, labels = 0.0, [], []
    with no_grad():
        for batch in batches(manifest, split_name, batch_size, workers=workers, cache=cache):
            logits = forward(params, batch.images, "eval")
            loss_sum += cross_entropy(logits, batch.labels).item() * len(batch.labels)
            preds.append(logits.data.argmax(axis=1))
            labels.append(batch.labels)
    preds, labels = np.concatenate(preds), np.concatenate(labels)
    return loss_sum / len(labels), float(np.mean(preds == labels)), preds, labels


def train_epoch(params: ModelParams, state: AdamState, manifest: DatasetManifest, cfg: TrainConfig,
                epoch: int, rng: np.random.Generator) -> tuple[float, float]:
    loss_sum, correct, seen = 0.0, 0, 0
    for batch in batches(manifest, "train", cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch,
                         workers=cfg.workers, cache=cfg.cache_images):
        logits = forward(params, batch.images, "train", rng)
        loss = cross_entropy(logits, batch.labels)
        backward(loss)
        adam_step(params, state, cfg)
        n = len(batch.labels)
        loss_sum += loss.item() * n
        correct += int(np.sum(logits.data.argmax(axis=1) == batch.labels))
        seen += n
    return loss_sum / seen, correct / seen


def fit(model_cfg: ModelConfig, train_cfg: TrainConfig, manifest: DatasetManifest,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[ModelParams, TrainLog]:
    """Train with early stopping on validation loss.

    Returns the parameters from the epoch with the lowest validation loss
    together with the per-epoch log.
    """
    for name in ("train", "val"):
        if not manifest.select(name):
            raise IngestionError(f"manifest has no {name!r} records")
    params = build(model_cfg)
    state = AdamState()
    rng = np.random.default_rng([train_cfg.seed, 1])
    stopper = EarlyStopping(train_cfg.patience)
    trainlog = TrainLog()

    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        train_loss, train_acc = train_epoch(params, state, manifest, train_cfg, epoch, rng)
        val_loss, val_acc, _, _ = evaluate(params, manifest, "val", train_cfg.batch_size,
                                           train_cfg.workers, train_cfg.cache_images)
        rec = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc, time.perf_counter() - t0)
        trainlog.records.append(rec)
        log.info("epoch %d train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f",
                 epoch, train_loss, train_acc, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(rec)
        if stopper.update(epoch, val_loss, params.copy):
            trainlog.stopped_early = True
            break
        if train_cfg.target_train_acc is not None and train_acc >= train_cfg.target_train_acc:
            break
    trainlog.best_epoch = stopper.best_epoch
    return stopper.best_state, trainlog


# -------------------------------------------------------------- checkpoints

def save_checkpoint(params, path) -> None:
    """Write named tensors as little-endian float32 in the ``SECT`` v1 layout."""
    tensors = params.tensors if isinstance(params, ModelParams) else dict(params)
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(tensors))
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def _read_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated at byte {pos} (wanted {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return tensors


def load_checkpoint(path, config: ModelConfig | None = None):
    """Read a checkpoint; with ``config`` the tensors are checked against it
    and a ``ModelParams`` is returned, otherwise a plain name->array dict.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    arrays = _read_checkpoint(buf)
    if config is None:
        return arrays
    expected = {name: shape for name, shape, _ in param_specs(config)}
    missing = [n for n in expected if n not in arrays]
    extra = [n for n in arrays if n not in expected]
    wrong = [n for n in expected if n in arrays and arrays[n].shape != tuple(expected[n])]
    if missing or extra or wrong:
        parts = []
        if missing:
            parts.append("missing " + ", ".join(missing))
        if extra:
            parts.append("unexpected " + ", ".join(extra))
        if wrong:
            parts.append("shape mismatch " + ", ".join(wrong))
        raise CompatibilityError(f"checkpoint {path} does not match config: " + "; ".join(parts))
    return ModelParams(config, {n: Tensor(arrays[n], requires_grad=True, dtype=np.float32) for n in expected})
