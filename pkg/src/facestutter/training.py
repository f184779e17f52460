"""Stratified splitting, SGD training with plateau scheduling, and cross-validation."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .data import apply_normalization, fit_normalization
from .metrics import accuracy, auc_roc, f1_score, threshold
from .models import ModelConfig, build_model
from .rng import stream

log = logging.getLogger(__name__)

IMPROVEMENT_DELTA = 1e-6


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 500
    early_stop_patience: int = 30
    lr0: float = 0.01
    lr_factor: float = 0.5
    lr_patience: int = 15
    lr_min: float = 1e-6
    folds: int = 5
    test_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr0:
            raise ValueError("need 0 < lr_min <= lr0")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.folds < 2 or self.batch_size < 2 or self.max_epochs < 1:
            raise ValueError("need folds >= 2, batch_size >= 2, max_epochs >= 1")


# -- splitting ------------------------------------------------------------

@dataclass
class SplitPlan:
    test: np.ndarray
    folds: list  # (train, val) index arrays; train is class-balanced
    pools: list  # per-fold training pool before balancing

    def non_test(self) -> np.ndarray:
        return np.sort(np.concatenate([v for _, v in self.folds]))


def _allocate(counts: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation proportional to ``counts`` summing to ``total`` (largest remainder)."""
    exact = counts * total / counts.sum()
    base = np.floor(exact).astype(int)
    rem = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rem]] += 1
    return base


def stratified_split(labels, cfg: TrainConfig) -> SplitPlan:
    """Hold-out test set plus ``cfg.folds`` stratified train/validation folds.

    The test set takes ``round(test_fraction * n)`` trials split across classes
    in proportion. The rest is dealt round-robin into folds class by class;
    each fold's training pool is then down-sampled to a 50/50 class balance.
    """
    y = np.asarray(labels, dtype=int)
    classes = (0, 1)
    members = [np.flatnonzero(y == c) for c in classes]
    for c, m in zip(classes, members):
        if m.size == 0:
            raise ValueError(f"class {c} is absent from the dataset")
        if m.size < cfg.folds:
            raise ValueError(f"class {c} has {m.size} samples, fewer than {cfg.folds} folds")
    rng = stream(cfg.seed, "split")
    members = [rng.permutation(m) for m in members]
    n_test = int(round(cfg.test_fraction * y.size))
    per_class = _allocate(np.array([m.size for m in members], dtype=float), n_test)
    test = np.concatenate([m[:k] for m, k in zip(members, per_class)])
    rest = np.concatenate([m[k:] for m, k in zip(members, per_class)])
    fold_of = np.arange(rest.size) % cfg.folds
    folds, pools = [], []
    for k in range(cfg.folds):
        val = rest[fold_of == k]
        pool = rest[fold_of != k]
        py = y[pool]
        n_bal = min(int(np.sum(py == 0)), int(np.sum(py == 1)))
        bal_rng = stream(cfg.seed, "balance", k)
        train = np.concatenate([bal_rng.permutation(pool[py == c])[:n_bal] for c in classes])
        folds.append((np.sort(train), np.sort(val)))
        pools.append(np.sort(pool))
    return SplitPlan(np.sort(test), folds, pools)


def shuffled_labels(labels, seed: int = 0) -> np.ndarray:
    """Labels permuted across trials: the chance-level control."""
    return stream(seed, "control", "labels").permutation(np.asarray(labels))


# -- scheduling --------------------------------------------------------------

class PlateauController:
    """Learning-rate reduction on plateau plus early stopping, both on validation loss.

    ``start`` takes the loss of the untrained model; each ``update`` consumes
    one epoch's validation loss and returns True when training should stop.
    The LR in ``lr`` after an update applies to the next epoch.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.lr0
        self.best = np.inf
        self.lr_wait = 0
        self.stop_wait = 0

    def start(self, val_loss: float) -> None:
        self.best = val_loss

    def update(self, val_loss: float) -> bool:
        if self.best - val_loss >= IMPROVEMENT_DELTA:
            self.best = val_loss
            self.lr_wait = 0
            self.stop_wait = 0
            return False
        self.lr_wait += 1
        self.stop_wait += 1
        if self.lr_wait >= self.cfg.lr_patience:
            self.lr = max(self.lr * self.cfg.lr_factor, self.cfg.lr_min)
            self.lr_wait = 0
        return self.stop_wait >= self.cfg.early_stop_patience


def simulate_schedule(val_losses, cfg: TrainConfig, initial_loss: float | None = None):
    """LR used in each epoch and the stop epoch for an injected loss sequence."""
    ctl = PlateauController(cfg)
    losses = list(val_losses)
    ctl.start(losses[0] if initial_loss is None else initial_loss)
    lrs = []
    for epoch, loss in enumerate(losses, start=1):
        lrs.append(ctl.lr)
        if ctl.update(loss):
            return lrs, epoch
    return lrs, None


# -- training ---------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class History:
    epoch: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = 0
    best_val_loss: float = float("nan")
    stopped_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"])
        for row in zip(self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def _loss_acc(model, X, y, batch_size=1024) -> tuple[float, float]:
    losses, correct = 0.0, 0
    for s in range(0, X.shape[0], batch_size):
        logits = model.forward(X[s:s + batch_size], train=False)
        loss, _ = K.sigmoid_bce(logits, y[s:s + batch_size])
        losses += float(np.sum(loss))
        correct += int(np.sum((logits >= 0) == (y[s:s + batch_size] == 1)))
    return losses / X.shape[0], correct / X.shape[0]


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[s:s + size] for s in range(0, order.size, size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        # a singleton batch cannot be batch-normalized
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train_model(model, X_train, y_train, X_val, y_val, cfg: TrainConfig, seed: int = 0):
    """Mini-batch SGD on mean binary cross-entropy.

    Returns ``(model, history)`` with the parameters from the epoch of lowest
    validation loss restored (epoch 0 being the untrained model).
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if X_train.shape[0] < 2 or X_val.shape[0] == 0:
        raise ValueError("training needs at least 2 training and 1 validation trials")
    shuffle_rng = stream(seed, "train", "shuffle")
    dropout_rng = stream(seed, "train", "dropout")
    ctl = PlateauController(cfg)
    hist = History()
    val_loss, _ = _loss_acc(model, X_val, y_val)
    ctl.start(val_loss)
    hist.initial_val_loss = hist.best_val_loss = val_loss
    best_state = model.state()

    for epoch in range(1, cfg.max_epochs + 1):
        lr = ctl.lr
        tot_loss, tot_correct = 0.0, 0
        for idx in _batches(shuffle_rng.permutation(X_train.shape[0]), cfg.batch_size):
            logits = model.forward(X_train[idx], train=True, rng=dropout_rng)
            loss, dlogit = K.sigmoid_bce(logits, y_train[idx])
            batch_loss = float(np.sum(loss))
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(epoch)
            tot_loss += batch_loss
            tot_correct += int(np.sum((logits >= 0) == (y_train[idx] == 1)))
            model.backward(dlogit / idx.size)
            for _, layer, name, arr in model.named_params():
                arr -= lr * layer.grads[name]
        val_loss, val_acc = _loss_acc(model, X_val, y_val)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(epoch)
        hist.epoch.append(epoch)
        hist.lr.append(lr)
        hist.train_loss.append(tot_loss / X_train.shape[0])
        hist.train_acc.append(tot_correct / X_train.shape[0])
        hist.val_loss.append(val_loss)
        hist.val_acc.append(val_acc)
        if val_loss < hist.best_val_loss:
            hist.best_val_loss = val_loss
            hist.best_epoch = epoch
            best_state = model.state()
        if ctl.update(val_loss):
            hist.stopped_epoch = epoch
            break
        log.debug("epoch %d lr %.2e train %.4f val %.4f", epoch, lr, hist.train_loss[-1], val_loss)

    model.load_state(best_state)
    model.trained = True
    return model, hist


# -- evaluation ----------------------------------------------------------------

METRIC_NAMES = ("accuracy", "auc_roc", "f1")


def evaluate(probs, labels) -> dict:
    pred = threshold(probs)
    return {"accuracy": accuracy(pred, labels), "auc_roc": auc_roc(probs, labels), "f1": f1_score(pred, labels)}


@dataclass
class MetricsReport:
    per_fold: list  # dicts with accuracy, auc_roc, f1

    def values(self, name: str) -> np.ndarray:
        return np.array([f[name] for f in self.per_fold])

    def mean(self, name: str) -> float:
        return float(np.mean(self.values(name)))

    def std(self, name: str) -> float:
        return float(np.std(self.values(name)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("fold",) + METRIC_NAMES)
        for k, f in enumerate(self.per_fold):
            w.writerow([k] + [repr(float(f[m])) for m in METRIC_NAMES])
        w.writerow(["mean"] + [repr(self.mean(m)) for m in METRIC_NAMES])
        w.writerow(["std"] + [repr(self.std(m)) for m in METRIC_NAMES])
        return buf.getvalue()

    def to_text(self, title: str = "") -> str:
        lines = [title] if title else []
        for k, f in enumerate(self.per_fold):
            lines.append(f"fold {k}: accuracy={f['accuracy']:.4f} auc_roc={f['auc_roc']:.4f} f1={f['f1']:.4f}")
        lines.append("aggregate: " + " ".join(
            f"{m}={self.mean(m):.4f}+/-{self.std(m):.4f}" for m in METRIC_NAMES))
        return "\n".join(lines) + "\n"


@dataclass
class CVResult:
    report: MetricsReport
    plan: SplitPlan
    manifest: object
    models: list
    histories: list
    test_probs: list

    def best_fold(self) -> int:
        """Fold whose model reached the lowest validation loss (first fold for forests)."""
        if not self.histories or self.histories[0] is None:
            return 0
        return int(np.argmin([h.best_val_loss for h in self.histories]))


def fold_seed(seed: int, fold: int) -> int:
    return int(stream(seed, "fold", fold).integers(2 ** 62))


def cross_validate(X, y, model_cfg: ModelConfig, train_cfg: TrainConfig, plan: SplitPlan | None = None,
                   folds: list[int] | None = None) -> CVResult:
    """Train one model per fold and score each on the shared hold-out test set.

    Normalization is fitted on the non-test trials and applied to everything.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    plan = plan or stratified_split(y, train_cfg)
    manifest = fit_normalization(X[plan.non_test()])
    Xn = apply_normalization(X, manifest)
    per_fold, models, histories, probs = [], [], [], []
    for k in (folds if folds is not None else range(len(plan.folds))):
        train_idx, val_idx = plan.folds[k]
        cfg_k = ModelConfig(**{**model_cfg.to_dict(), "seed": fold_seed(model_cfg.seed, k)})
        model = build_model(cfg_k)
        if model_cfg.architecture == "RF":
            model.fit(Xn[train_idx], y[train_idx])
            hist = None
        else:
            model, hist = train_model(model, Xn[train_idx], y[train_idx], Xn[val_idx], y[val_idx],
                                      train_cfg, seed=fold_seed(train_cfg.seed, k))
        p = model.predict_proba(Xn[plan.test])
        per_fold.append(evaluate(p, y[plan.test]))
        log.info("fold %d: %s", k, per_fold[-1])
        models.append(model)
        histories.append(hist)
        probs.append(p)
    return CVResult(MetricsReport(per_fold), plan, manifest, models, histories, probs)
