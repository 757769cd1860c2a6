"""Objective, AdamW, the training loop and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .metrics import Metrics, compute_metrics
from .model import GraphMFT, ModelConfig, predict
from .tensor import Tensor

log = logging.getLogger(__name__)

PRESETS = {
    "iemocap": {"L": 5, "lr": 1e-5, "batch_size": 16, "l2_lambda": 1e-5, "dropout": 0.5, "max_epochs": 100},
    "meld": {"L": 3, "lr": 2e-5, "batch_size": 32, "l2_lambda": 1e-5, "dropout": 0.5, "max_epochs": 100},
}


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; ``last_good`` holds the previous epoch's weights."""

    def __init__(self, message: str, last_good: dict[str, np.ndarray] | None, history: list[dict]):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 100
    l2_lambda: float = 1e-5
    dropout: float | None = 0.5
    seed: int = 0
    patience: int | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.l2_lambda < 0:
            raise ValueError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be > 0, got {self.grad_clip}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- objective --------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the rows of ``logits``."""
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("cross_entropy on an empty batch")
    if labels.shape != (n,):
        raise T.ShapeError(f"expected {n} labels, got shape {labels.shape}")
    C = logits.shape[1]
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"label out of range [0, {C})")
    picked = T.log_softmax(logits, axis=1)[np.arange(n), labels]
    return picked.sum() * (-1.0 / n)


def loss(logits_per_conv: Sequence[Tensor], labels_per_conv: Sequence) -> Tensor:
    """Data term over every utterance of the batch, normalised by the utterance count.

    Weight decay is applied by the optimiser, not here.
    """
    if not logits_per_conv:
        raise ValueError("loss on an empty batch")
    logits = T.concat(list(logits_per_conv), axis=0)
    labels = np.concatenate([np.asarray(y) for y in labels_per_conv])
    return cross_entropy(logits, labels)


# -- optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adamw_step(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> np.ndarray:
    """One decoupled-weight-decay Adam update, in place on ``theta`` and ``state``."""
    if state.m.shape != theta.shape or state.v.shape != theta.shape:
        raise T.ShapeError("optimizer state shape does not match the parameter")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("non-finite gradient")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    theta -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    return theta


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in params.items()}

    def step(self) -> None:
        # validate everything first so a bad gradient leaves no partial update
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
        b1, b2 = self.betas
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad.astype(p.dtype, copy=False), self.state[name], self.lr,
                       b1, b2, self.eps, self.weight_decay)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- loop -------------------------------------------------------------------

def evaluate(model: GraphMFT, dataset: Dataset, batch_size: int = 64) -> Metrics:
    if not dataset.conversations:
        raise ValueError("evaluate on an empty dataset")
    y_true, y_pred = [], []
    convs = dataset.conversations
    with T.no_grad():
        for start in range(0, len(convs), batch_size):
            chunk = convs[start:start + batch_size]
            y_pred.append(predict(model(chunk, training=False)))
            y_true.extend(c.labels for c in chunk)
    return compute_metrics(np.concatenate(y_true), np.concatenate(y_pred), model.cfg.num_classes)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "acc", "wf1"])
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["loss"]), repr(r["acc"]), repr(r["wf1"])])
        return buf.getvalue()


def _seed_streams(seed: int):
    init, shuffle, drop = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(shuffle), np.random.default_rng(drop)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: Dataset, valid_set: Dataset,
          dtype=np.float32) -> tuple[GraphMFT, History]:
    """Fit on ``train_set``; return the weights with the best validation weighted-F1.

    Ties go to the earlier epoch.  Shuffle order, dropout masks and the
    initial weights come from independent streams of ``train_cfg.seed``.
    """
    if not train_set.conversations or not valid_set.conversations:
        raise ValueError("train and valid splits must be non-empty")
    if train_cfg.dropout is not None:
        model_cfg = replace(model_cfg, dropout=train_cfg.dropout)
    init_rng, shuffle_rng, drop_rng = _seed_streams(train_cfg.seed)
    model = GraphMFT(model_cfg, init_rng, dtype=dtype)
    params = model.params()
    opt = AdamW(params, train_cfg.lr, weight_decay=train_cfg.l2_lambda)
    history = History()
    best_state, best_wf1 = model.state_dict(), -1.0
    last_good = best_state
    stale = 0
    convs = train_set.conversations
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(convs))
        loss_sum, count = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [convs[i] for i in order[start:start + train_cfg.batch_size]]
            labels = np.concatenate([c.labels for c in batch])
            model.zero_grad()
            try:
                logits = model(batch, training=True, rng=drop_rng)
                value = cross_entropy(logits, labels)
                if not math.isfinite(value.item()):
                    raise T.NonFiniteError("loss is not finite")
                T.backward(value)
                if train_cfg.grad_clip is not None:
                    clip_grad_norm(params, train_cfg.grad_clip)
                opt.step()
            except (T.NonFiniteError, NonFiniteGradient) as e:
                raise TrainingDiverged(f"epoch {epoch}: training diverged ({e})", last_good, history.rows) from e
            loss_sum += value.item() * len(labels)
            count += len(labels)
        last_good = model.state_dict()
        metrics = evaluate(model, valid_set)
        row = {"epoch": epoch, "loss": loss_sum / count, "acc": metrics.accuracy, "wf1": metrics.weighted_f1}
        history.rows.append(row)
        log.info("epoch %d loss %.4f valid acc %.4f wf1 %.4f", epoch, row["loss"], row["acc"], row["wf1"])
        if metrics.weighted_f1 > best_wf1:
            best_wf1, best_state, history.best_epoch = metrics.weighted_f1, model.state_dict(), epoch
            stale = 0
        else:
            stale += 1
            if train_cfg.patience is not None and stale >= train_cfg.patience:
                break
    model.load_state_dict(best_state)
    return model, history


def train_config_from_dict(obj: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in obj.items() if k in names})
