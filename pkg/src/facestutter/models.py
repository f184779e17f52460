"""CNN-A / CNN-B construction, inference, checkpoints and gradient checks."""
from __future__ import annotations

import copy
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels as K
from .layers import (AvgPool, BatchNorm, Conv2D, Dense, DepthwiseConv2D, Dropout, ELU, Flatten,
                     Model, SeparableConv2D, layer_from_spec, trace_shapes)
from .rng import stream

N_AUS = 17
N_FRAMES = 87
ARCHITECTURES = ("CNN_A", "CNN_B", "RF")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    architecture: str = "CNN_A"
    input_shape: tuple = (N_AUS, N_FRAMES)
    cnn_b_kernel: int = 4
    cnn_b_filters: tuple = (16, 32, 64, 128)
    dropout_rate: float = 0.25
    rf_trees: int = 500
    rf_max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.architecture = self.architecture.upper().replace("-", "_")
        self.input_shape = tuple(self.input_shape)
        self.cnn_b_filters = tuple(self.cnn_b_filters)
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.input_shape != (N_AUS, N_FRAMES):
            raise ValueError(f"input shape is fixed to ({N_AUS}, {N_FRAMES}), got {self.input_shape}")
        if self.cnn_b_kernel not in (2, 4, 6):
            raise ValueError(f"cnn_b_kernel must be 2, 4 or 6, got {self.cnn_b_kernel}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.rf_trees < 1:
            raise ValueError("rf_trees must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["cnn_b_filters"] = list(self.cnn_b_filters)
        return d


def build_cnn_a(cfg: ModelConfig) -> Model:
    """EEGNet-style temporal/depthwise/separable network.

    conv(1x29, 8) -> BN -> depthwise(17x1, D=2) -> BN -> ELU -> pool(1,4)
    -> dropout -> separable(1x16, 16) -> BN -> ELU -> pool(1,8) -> dropout
    -> flatten -> dense 128 -> ELU -> dense 1
    """
    if cfg.architecture != "CNN_A":
        raise ValueError(f"build_cnn_a needs architecture CNN_A, got {cfg.architecture}")
    rng = stream(cfg.seed, "init", "cnn_a")
    f1, depth, f2 = 8, 2, 16
    layers = [
        Conv2D(1, f1, (1, 29), "same", rng=rng),
        BatchNorm(f1),
        DepthwiseConv2D(f1, depth, (N_AUS, 1), "valid", rng=rng),
        BatchNorm(f1 * depth),
        ELU(),
        AvgPool((1, 4)),
        Dropout(cfg.dropout_rate),
        SeparableConv2D(f1 * depth, f2, (1, 16), "same", rng=rng),
        BatchNorm(f2),
        ELU(),
        AvgPool((1, 8)),
        Dropout(cfg.dropout_rate),
        Flatten(),
    ]
    flat = f2 * 1 * ((N_FRAMES // 4) // 8)
    layers += [Dense(flat, 128, rng=rng), ELU(), Dense(128, 1, rng=rng)]
    return Model(layers, (1, N_AUS, N_FRAMES), cfg.to_dict())


def build_cnn_b(cfg: ModelConfig) -> Model:
    """VGG-style stack of square-kernel conv blocks followed by 256-128-64 dense layers."""
    if cfg.architecture != "CNN_B":
        raise ValueError(f"build_cnn_b needs architecture CNN_B, got {cfg.architecture}")
    rng = stream(cfg.seed, "init", "cnn_b")
    k = cfg.cnn_b_kernel
    layers = []
    shape = (1, N_AUS, N_FRAMES)
    cin = 1
    for cout in cfg.cnn_b_filters:
        layers += [Conv2D(cin, cout, (k, k), "same", rng=rng), BatchNorm(cout), ELU(), AvgPool((2, 2))]
        cin = cout
    # flatten width from the traced conv stack; Model re-validates every layer
    shape = trace_shapes(layers, shape)[-1]
    layers.append(Flatten())
    din = int(np.prod(shape))
    for width in (256, 128, 64):
        layers += [Dense(din, width, rng=rng), ELU()]
        din = width
    layers.append(Dense(din, 1, rng=rng))
    return Model(layers, (1, N_AUS, N_FRAMES), cfg.to_dict())


def build_model(cfg: ModelConfig):
    if cfg.architecture == "CNN_A":
        return build_cnn_a(cfg)
    if cfg.architecture == "CNN_B":
        return build_cnn_b(cfg)
    from .forest import RandomForest
    return RandomForest(n_trees=cfg.rf_trees, max_depth=cfg.rf_max_depth, seed=cfg.seed)


def predict_proba(model, batch) -> np.ndarray:
    """Probability of the "stuttered" class for each (17, 87) trial."""
    return model.predict_proba(batch)


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    names: list = field(default_factory=list)
    analytic: list = field(default_factory=list)
    numeric: list = field(default_factory=list)
    rel_errors: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.rel_errors) if self.rel_errors else 0.0

    @property
    def max_abs_error(self) -> float:
        return max((abs(a - n) for a, n in zip(self.analytic, self.numeric)), default=0.0)

    def worst(self, n=5):
        order = np.argsort(self.rel_errors)[::-1][:n]
        return [(self.names[i], self.analytic[i], self.numeric[i], self.rel_errors[i]) for i in order]


# Denominator floor for relative errors. Central differences at h=1e-5 carry
# rounding noise near 1e-11, so gradients that are exactly zero (e.g. a batch
# norm shift absorbed by the next train-mode batch norm) would otherwise read
# as large relative errors; below the floor the comparison is absolute.
REL_ERROR_FLOOR = 1e-6


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(REL_ERROR_FLOOR, abs(a) + abs(n))


def batch_loss(model: Model, X, y, train: bool = True) -> float:
    logits = model.forward(X, train=train)
    loss, _ = K.sigmoid_bce(logits, y)
    return float(np.mean(loss))


def grad_check(model: Model, X, y, n_params: int = 200, h: float = 1e-5, seed: int = 0,
               train: bool = True) -> GradCheckReport:
    """Compare backprop gradients of the mean BCE loss with central differences.

    Batch norm runs in train mode by default (running statistics are left
    untouched); dropout is disabled. Every parameter tensor contributes at
    least one sampled entry when ``n_params`` allows it.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if train and X.shape[0] < 2:
        raise ValueError("gradient check in train mode needs a batch of at least 2")
    model = copy.deepcopy(model)
    for layer in model.layers:
        if isinstance(layer, BatchNorm):
            layer.update_running = False

    logits = model.forward(X, train=train)
    _, dlogit = K.sigmoid_bce(logits, y)
    model.backward(dlogit / X.shape[0])

    entries = list(model.named_params())
    sizes = np.array([arr.size for *_, arr in entries])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    n = min(n_params, total)
    rng = stream(seed, "grad-check")
    # one entry from every parameter tensor first, so small tensors (BN scale, biases) are always covered
    first = np.array([offsets[j] + rng.integers(sizes[j]) for j in range(len(entries))])[:n]
    if n > first.size:
        rest = np.setdiff1d(np.arange(total), first)
        first = np.concatenate([first, rng.choice(rest, size=n - first.size, replace=False)])
    picks = first

    report = GradCheckReport()
    for flat in np.sort(picks):
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        label, layer, name, arr = entries[j]
        idx = np.unravel_index(flat - offsets[j], arr.shape)
        analytic = float(layer.grads[name][idx])
        orig = arr[idx]
        arr[idx] = orig + h
        lp = batch_loss(model, X, y, train)
        arr[idx] = orig - h
        lm = batch_loss(model, X, y, train)
        arr[idx] = orig
        numeric = (lp - lm) / (2 * h)
        report.names.append(f"{label}{[int(i) for i in idx]}")
        report.analytic.append(analytic)
        report.numeric.append(numeric)
        report.rel_errors.append(relative_error(analytic, numeric))
    return report


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model, meta: dict | None = None) -> None:
    """Write config, layer table, parameters and metadata to one ``.npz`` file."""
    from .forest import RandomForest
    header = {"version": CHECKPOINT_VERSION, "meta": meta or {}}
    if isinstance(model, RandomForest):
        header["type"] = "rf"
        header["forest"] = model.header()
        arrays = model.arrays()
    else:
        header["type"] = "cnn"
        header["config"] = model.config
        header["input_shape"] = list(model.input_shape)
        header["layers"] = [layer.spec() for layer in model.layers]
        arrays = model.state()
    payload = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    payload.update(arrays)
    # fixed entry timestamps keep reruns byte-identical
    with zipfile.ZipFile(Path(path), "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(payload[name]), allow_pickle=False)


def load_checkpoint(path):
    """Returns ``(model, meta)``."""
    from .forest import RandomForest
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    if header["type"] == "rf":
        model = RandomForest.from_arrays(header["forest"], arrays)
    else:
        layers = [layer_from_spec(s) for s in header["layers"]]
        model = Model(layers, tuple(header["input_shape"]), header["config"])
        model.load_state(arrays)
    model.trained = True
    return model, header["meta"]
