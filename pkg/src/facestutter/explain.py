"""DeepSHAP attributions for trained CNNs and time-window summaries.

Multipliers are propagated from the sigmoid output back to the input: linear
layers (convolutions, dense, pooling, inference-mode batch norm, dropout,
flatten) use their transpose, element-wise nonlinearities use the rescale
ratio ``(f(x) - f(r)) / (x - r)``. Per-reference attributions are
``multiplier * (x - r)``; the final map averages over the reference set.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .data import AU_IDS, FRAME_MS, N_FRAMES, TRIAL_MS, au_row
from .layers import ELU, Model

RESCALE_GUARD = 1e-9
TARGETS = ("probability", "logit")


@dataclass
class ReferenceSet:
    inputs: np.ndarray  # (K, 17, 87)
    provenance: str = "zeros"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 2:
            self.inputs = self.inputs[None]
        if self.inputs.shape[0] == 0:
            raise ValueError("reference set is empty")
        if self.inputs.shape[1:] != (len(AU_IDS), N_FRAMES):
            raise ValueError(f"references must be ({len(AU_IDS)}, {N_FRAMES}), got {self.inputs.shape[1:]}")
        if self.inputs.min() < 0.0 or self.inputs.max() > 1.0:
            raise ValueError("references must lie in [0, 1] like normalized inputs")

    @classmethod
    def zeros(cls) -> "ReferenceSet":
        return cls(np.zeros((1, len(AU_IDS), N_FRAMES)), "zeros")

    @classmethod
    def sample(cls, X_train: np.ndarray, k: int = 100, seed: int = 0) -> "ReferenceSet":
        """``k`` trials drawn without replacement from a (normalized) training split."""
        from .rng import stream
        X_train = np.asarray(X_train)
        idx = stream(seed, "references").choice(X_train.shape[0], size=min(k, X_train.shape[0]),
                                                 replace=False)
        return cls(X_train[np.sort(idx)], f"training-sample:{len(idx)}:seed={seed}")

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class AttributionMap:
    values: np.ndarray  # (17, 87)
    trial_id: str = ""
    target: str = "stuttered"
    reference: str = "zeros"
    prediction: float = float("nan")   # f(x)
    baseline: float = float("nan")     # mean over references of f(r)

    @property
    def delta(self) -> float:
        return self.prediction - self.baseline

    def to_csv(self) -> str:
        return attribution_csv(self.values)


def _rescale(fx: np.ndarray, fr: np.ndarray, dx: np.ndarray, mid_grad) -> np.ndarray:
    small = np.abs(dx) < RESCALE_GUARD
    safe = np.where(small, 1.0, dx)
    return np.where(small, mid_grad, (fx - fr) / safe)


def _sigmoid_grad(z):
    s = K.sigmoid(z)
    return s * (1.0 - s)


def _check_model(model) -> None:
    if not isinstance(model, Model):
        raise TypeError("DeepSHAP needs a CNN model")
    if not getattr(model, "trained", False):
        raise ValueError("model is untrained; attributions would be meaningless")


def _check_target(target: str) -> None:
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")


def pair_attributions(model: Model, X: np.ndarray, R: np.ndarray, pairs_x: np.ndarray,
                      pairs_r: np.ndarray, cache=None, target: str = "probability") -> np.ndarray:
    """Single-reference attributions for the index pairs ``(X[pairs_x], R[pairs_r])``.

    Returns an array (P, 17, 87). ``cache`` may hold precomputed
    ``(logits_x, inputs_x, logits_r, inputs_r)`` from ``model.forward(keep=True)``.
    ``target="logit"`` explains the pre-sigmoid output instead of P(stuttered).
    """
    _check_target(target)
    if cache is None:
        lx, ix = model.forward(X, train=False, keep=True)
        lr, ir = model.forward(R, train=False, keep=True)
    else:
        lx, ix, lr, ir = cache
    zx, zr = lx[pairs_x], lr[pairs_r]
    if target == "logit":
        m = np.ones((zx.size, 1))
    else:
        m = _rescale(K.sigmoid(zx), K.sigmoid(zr), zx - zr, _sigmoid_grad(0.5 * (zx + zr)))[:, None]
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, ELU):
            a, b = ix[i][pairs_x], ir[i][pairs_r]
            m = m * _rescale(K.elu(a), K.elu(b), a - b, K.elu_grad(0.5 * (a + b)))
        elif layer.linear:
            m = layer.input_grad(m, model.shapes[i])
        else:
            raise TypeError(f"no DeepLIFT rule for layer {layer!r}")
    diff = ix[0][pairs_x] - ir[0][pairs_r]
    return (m * diff)[:, 0]


def deep_shap_batch(model: Model, X, refs: ReferenceSet, chunk: int = 256,
                    target: str = "probability") -> tuple[np.ndarray, np.ndarray, float]:
    """Attribution maps for every trial in ``X`` averaged over ``refs``.

    Returns ``(maps (n, 17, 87), f(x) (n,), mean f(r) scalar)`` where f is
    the explained target.
    """
    _check_model(model)
    _check_target(target)
    if not isinstance(refs, ReferenceSet):
        refs = ReferenceSet(refs)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    R = refs.inputs
    n, k = X.shape[0], R.shape[0]
    lr, ir = model.forward(R, train=False, keep=True)
    maps = np.zeros((n,) + X.shape[1:])
    trials_per_chunk = max(1, chunk // k)
    for s in range(0, n, trials_per_chunk):
        sub = X[s:s + trials_per_chunk]
        lx, ix = model.forward(sub, train=False, keep=True)
        px = np.repeat(np.arange(sub.shape[0]), k)
        pr = np.tile(np.arange(k), sub.shape[0])
        attr = pair_attributions(model, sub, R, px, pr, cache=(lx, ix, lr, ir), target=target)
        maps[s:s + sub.shape[0]] = attr.reshape(sub.shape[0], k, *X.shape[1:]).mean(axis=1)
    if target == "logit":
        return maps, model.forward(X, train=False), float(np.mean(lr))
    return maps, model.predict_proba(X), float(np.mean(K.sigmoid(lr)))


def deep_shap(model: Model, x, refs: ReferenceSet | None = None, trial_id: str = "",
              target: str = "probability") -> AttributionMap:
    """Attribution map of P(stuttered) (or its logit) for one (17, 87) trial."""
    refs = refs if refs is not None else ReferenceSet.zeros()
    if not isinstance(refs, ReferenceSet):
        refs = ReferenceSet(refs)
    maps, fx, fr = deep_shap_batch(model, np.asarray(x)[None], refs, target=target)
    label = "stuttered" if target == "probability" else "stuttered-logit"
    return AttributionMap(maps[0], trial_id, label, refs.provenance, float(fx[0]), fr)


# -- time windows ----------------------------------------------------------

def ms_to_frame(t: float) -> int:
    """Frame index containing time ``t``; 1500 ms maps to the exclusive end 87."""
    if not 0.0 <= t <= TRIAL_MS:
        raise ValueError(f"time {t} ms outside [0, {TRIAL_MS:g}]")
    return int(math.floor(t * N_FRAMES / TRIAL_MS))


def window_frames(window: tuple[float, float]) -> tuple[int, int]:
    t0, t1 = window
    if not t0 < t1:
        raise ValueError(f"window start {t0} must precede end {t1}")
    f0, f1 = ms_to_frame(t0), ms_to_frame(t1)
    if f1 <= f0:
        raise ValueError(f"window {window} ms covers no frames")
    return f0, f1


def window_mean(attr, window: tuple[float, float], au: int) -> float:
    """Mean attribution of one AU row over frames ``[frame(t0), frame(t1))``."""
    values = attr.values if isinstance(attr, AttributionMap) else np.asarray(attr)
    f0, f1 = window_frames(window)
    return float(np.mean(values[au_row(au), f0:f1]))


def window_means(maps: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    """Vectorised :func:`window_mean` for stacked maps: returns (n, 17)."""
    f0, f1 = window_frames(window)
    return np.asarray(maps)[..., f0:f1].mean(axis=-1)


def positive_part(attr):
    if isinstance(attr, AttributionMap):
        return AttributionMap(np.maximum(attr.values, 0.0), attr.trial_id, attr.target, attr.reference,
                              attr.prediction, attr.baseline)
    return np.maximum(np.asarray(attr, dtype=np.float64), 0.0)


# -- export --------------------------------------------------------------------

def attribution_csv(values: np.ndarray) -> str:
    values = np.asarray(values)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["au_id", "frame", "t_start_ms", "attribution"])
    for r, au in enumerate(AU_IDS):
        for f in range(N_FRAMES):
            w.writerow([au, f, repr(f * FRAME_MS), repr(float(values[r, f]))])
    return buf.getvalue()


def read_attribution_csv(path) -> np.ndarray:
    values = np.full((len(AU_IDS), N_FRAMES), np.nan)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            values[au_row(int(row["au_id"])), int(row["frame"])] = float(row["attribution"])
    if np.isnan(values).any():
        raise ValueError(f"{path}: incomplete attribution map")
    return values
