"""Adam, cross-entropy, the training loop, evaluation, cross-validation and a
band-power logistic-regression baseline."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize, special, stats

from .data import EEGDataset, SplitSpec, band_power, split_indices, stratified_kfold
from .nn import Module
from .tensor import Tensor, _record, as_tensor, backward, no_grad


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.param_name = name


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 100
    seed: int = 0
    patience: int | None = 15

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        # lr = 0 is accepted as a frozen run (see ``train``)
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be finite and non-negative, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch normalization)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive or None")


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """In-place bias-corrected Adam update of ``params`` (name -> Tensor)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


# -- loss ---------------------------------------------------------------------

def log_softmax_array(z: np.ndarray) -> np.ndarray:
    return z - special.logsumexp(z, axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"cross_entropy: {labels.shape} labels for batch {B}")
    if np.any(labels < 0) or np.any(labels >= K) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"cross_entropy: labels must be integers in [0, {K})")
    logp = log_softmax_array(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d / B,)

    return _record(np.asarray(loss), "cross_entropy", (logits,), rule)


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray                    # rows: true class, cols: predicted
    fold_accuracies: list = field(default_factory=list)
    mean: float | None = None
    ci_half_width: float = 0.0

    def __post_init__(self):
        if self.mean is None:
            self.mean = self.accuracy
        if not self.fold_accuracies:
            self.fold_accuracies = [self.accuracy]

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def summary_line(self) -> str:
        if len(self.fold_accuracies) > 1:
            return f"accuracy {self.mean:.2f} ± {self.ci_half_width:.2f} % over {len(self.fold_accuracies)} folds"
        return f"accuracy {self.accuracy:.2f} % on {self.n} epochs"

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "mean": self.mean, "ci_half_width": self.ci_half_width,
                "fold_accuracies": list(self.fold_accuracies),
                "confusion": self.confusion.tolist(), "n": self.n}


def predict(model: Module, epochs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(epochs), batch_size):
                logits = model(np.asarray(epochs[i:i + batch_size], dtype=np.float64))
                out.append(np.argmax(logits.data, axis=-1))
    finally:
        model.train(was_training)
    return np.concatenate(out)


def confusion_counts(labels, preds, num_classes: int = 2) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def evaluate(model: Module, dataset: EEGDataset, batch_size: int = 64) -> EvalReport:
    """Argmax accuracy (percent) and confusion counts with batch norm in eval mode."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    if dataset.labels is None:
        raise ValueError("evaluate: dataset is unlabeled")
    preds = predict(model, dataset.epochs, batch_size)
    k = model.config.num_classes if hasattr(model, "config") else 2
    cm = confusion_counts(dataset.labels, preds, k)
    return EvalReport(accuracy=100.0 * np.trace(cm) / cm.sum(), confusion=cm)


def t_interval(values, level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width ``t_{(1+level)/2, k-1} * s / sqrt(k)``."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        raise ValueError("t_interval: no values")
    if len(v) == 1 or np.all(v == v[0]):
        return float(v[0]), 0.0
    k = len(v)
    s = v.std(ddof=1)
    return float(v.mean()), float(stats.t.ppf((1 + level) / 2, k - 1) * s / math.sqrt(k))


# -- training -----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float

    def line(self) -> str:
        return f"epoch={self.epoch} train_loss={self.train_loss:.10f} val_acc={self.val_acc:.6f}"


@dataclass
class TrainResult:
    model: Module
    history: list
    best_epoch: int
    best_val_acc: float

    def log_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.history)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = perm[i:i + batch_size]
        if len(idx) >= 2:      # a singleton batch cannot be batch-normalized
            yield idx


def train(model: Module, train_set: EEGDataset, val_set: EEGDataset, cfg: TrainConfig | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Seeded mini-batch Adam training; keeps the weights with the best validation accuracy.

    With ``learning_rate == 0`` the model runs in eval mode throughout, so
    neither weights nor batch-norm statistics move.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    for name, d in (("train", train_set), ("val", val_set)):
        if len(d) == 0 or d.labels is None:
            raise ValueError(f"train: {name} set must be non-empty and labeled")
    k = getattr(getattr(model, "config", None), "num_classes", 2)
    if train_set.labels.max() >= k or val_set.labels.max() >= k:
        raise ValueError(f"train: labels exceed the model's {k} classes")
    if len(train_set) < 2:
        raise ValueError("train: need at least 2 training epochs for batch normalization")

    frozen = cfg.learning_rate == 0
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_parameters())
    state = AdamState()
    history: list[EpochRecord] = []
    best_acc, best_epoch, best_state, stale = -1.0, 0, model.state_dict(), 0
    x_all = train_set.epochs.astype(np.float64)
    y_all = train_set.labels
    for epoch in range(1, cfg.max_epochs + 1):
        model.train(not frozen)
        total, count = 0.0, 0
        for idx in _batches(len(train_set), cfg.batch_size, rng):
            loss = cross_entropy(model(x_all[idx]), y_all[idx])
            total += float(loss.data) * len(idx)
            count += len(idx)
            if frozen:
                continue
            model.zero_grad()
            backward(loss)
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            adam_step(params, grads, state, cfg)
        model.eval()
        rec = EpochRecord(epoch, total / max(count, 1), evaluate(model, val_set).accuracy)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if rec.val_acc > best_acc:
            best_acc, best_epoch, best_state, stale = rec.val_acc, epoch, model.state_dict(), 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_acc)


def cross_validate(model_builder: Callable[[int], Module], dataset: EEGDataset, k: int = 5,
                   cfg: TrainConfig | None = None, val_fraction: float = 0.15) -> EvalReport:
    """Stratified k-fold: a fresh model per fold, trained on the fold's training part
    (with a stratified ``val_fraction`` held out for model selection) and scored on the
    held-out fold.  Fold f draws its randomness from seed ``cfg.seed + f``."""
    cfg = cfg or TrainConfig()
    folds = stratified_kfold(dataset.labels, k, cfg.seed)
    accs, cm = [], None
    for f, (tr_idx, te_idx) in enumerate(folds):
        inner = SplitSpec((1 - val_fraction, val_fraction, 0.0), seed=cfg.seed + f)
        fit_rel, val_rel, _ = split_indices(dataset.labels[tr_idx], inner)
        fold_cfg = TrainConfig(**{**asdict(cfg), "seed": cfg.seed + f})
        result = train(model_builder(f), dataset.subset(tr_idx[fit_rel]),
                       dataset.subset(tr_idx[val_rel]), fold_cfg)
        rep = evaluate(result.model, dataset.subset(te_idx))
        accs.append(rep.accuracy)
        cm = rep.confusion if cm is None else cm + rep.confusion
    mean, half = t_interval(accs)
    return EvalReport(accuracy=mean, confusion=cm, fold_accuracies=accs, mean=mean, ci_half_width=half)


# -- history files ------------------------------------------------------------

def write_log(result: TrainResult, path) -> None:
    Path(path).write_text(result.log_text())


def write_summary(path, **fields) -> None:
    Path(path).write_text(json.dumps(fields, indent=2, sort_keys=True) + "\n")


# -- band-power baseline --------------------------------------------------------

BASELINE_BANDS = ((1.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 75.0))


def band_power_features(epochs: np.ndarray) -> np.ndarray:
    """Log mean power per (band, channel): (n, 5 * channels)."""
    return np.concatenate([np.log(band_power(epochs, b) + 1e-12) for b in BASELINE_BANDS], axis=1)


class BandPowerLogistic:
    """L2-regularized logistic regression on standardized log band powers."""

    def __init__(self, l2: float = 1e-2):
        self.l2 = l2
        self.mu = self.sd = self.w = None

    def _design(self, epochs) -> np.ndarray:
        X = (band_power_features(epochs) - self.mu) / self.sd
        return np.hstack([X, np.ones((len(X), 1))])

    def fit(self, d: EEGDataset) -> "BandPowerLogistic":
        F = band_power_features(d.epochs)
        self.mu, self.sd = F.mean(axis=0), F.std(axis=0) + 1e-12
        X = self._design(d.epochs)
        y = d.labels.astype(float)
        sign = 2 * y - 1

        def objective(w):
            z = X @ w
            loss = -special.log_expit(sign * z).mean() + 0.5 * self.l2 * (w[:-1] @ w[:-1])
            grad = X.T @ (special.expit(z) - y) / len(y)
            grad[:-1] += self.l2 * w[:-1]
            return loss, grad

        res = optimize.minimize(objective, np.zeros(X.shape[1]), jac=True, method="L-BFGS-B")
        self.w = res.x
        return self

    def predict(self, epochs) -> np.ndarray:
        return (self._design(epochs) @ self.w > 0).astype(np.int64)

    def evaluate(self, d: EEGDataset) -> EvalReport:
        cm = confusion_counts(d.labels, self.predict(d.epochs))
        return EvalReport(accuracy=100.0 * np.trace(cm) / cm.sum(), confusion=cm)
