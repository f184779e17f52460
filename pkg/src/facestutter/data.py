"""AU trial schema, CSV ingestion, normalization and the synthetic generator."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import auc_roc
from .rng import stream

N_FRAMES = 87
TRIAL_MS = 1500.0
FRAME_MS = TRIAL_MS / N_FRAMES

AU_IDS = (1, 2, 4, 5, 6, 7, 9, 45, 10, 12, 14, 15, 17, 20, 23, 25, 26)
UPPER_AUS = AU_IDS[:8]
LOWER_AUS = AU_IDS[8:]
AU_NAMES = {
    1: "inner brow raiser", 2: "outer brow raiser", 4: "brow lowerer", 5: "upper lid raiser",
    6: "cheek raiser", 7: "lid tightener", 9: "nose wrinkler", 45: "blink",
    10: "upper lip raiser", 12: "lip corner puller", 14: "dimpler", 15: "lip corner depressor",
    17: "chin raiser", 20: "lip stretcher", 23: "lip tightener", 25: "lips part", 26: "jaw drop",
}
AU_COLUMNS = tuple(f"au{a:02d}" for a in AU_IDS)
META_COLUMNS = ("trial_id", "subject_id", "session_id", "paradigm", "label", "frame")
LABELS = ("fluent", "stuttered")
PARADIGMS = ("CW", "WG")


def au_row(au: int) -> int:
    """Row index of an AU id in catalog order."""
    try:
        return AU_IDS.index(au)
    except ValueError:
        raise KeyError(f"unknown AU {au}; catalog is {AU_IDS}") from None


def au_region(au: int) -> str:
    return "upper" if au in UPPER_AUS else "lower"


class DatasetError(ValueError):
    pass


@dataclass
class AUTrial:
    trial_id: str
    subject_id: str
    session_id: str
    paradigm: str
    label: str
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (len(AU_IDS), N_FRAMES):
            raise DatasetError(f"trial {self.trial_id}: matrix shape {self.matrix.shape}, "
                               f"expected ({len(AU_IDS)}, {N_FRAMES})")
        if self.label not in LABELS:
            raise DatasetError(f"trial {self.trial_id}: unknown label {self.label!r}")
        if self.paradigm not in PARADIGMS:
            raise DatasetError(f"trial {self.trial_id}: unknown paradigm {self.paradigm!r}")

    @property
    def y(self) -> int:
        return int(self.label == "stuttered")


def stack(trials: list[AUTrial]) -> tuple[np.ndarray, np.ndarray]:
    """Trials as ``(X (n, 17, 87), y (n,))`` arrays."""
    X = np.stack([t.matrix for t in trials]) if trials else np.zeros((0, len(AU_IDS), N_FRAMES))
    y = np.array([t.y for t in trials], dtype=int)
    return X, y


def metadata_table(trials: list[AUTrial]) -> dict[str, np.ndarray]:
    return {
        "trial_id": np.array([t.trial_id for t in trials]),
        "subject_id": np.array([t.subject_id for t in trials]),
        "session_id": np.array([t.session_id for t in trials]),
        "paradigm": np.array([t.paradigm for t in trials]),
        "label": np.array([t.label for t in trials]),
    }


# -- CSV -------------------------------------------------------------------

def save_dataset(trials: list[AUTrial], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(META_COLUMNS + AU_COLUMNS)
        for t in trials:
            head = [t.trial_id, t.subject_id, t.session_id, t.paradigm, t.label]
            cols = t.matrix.T.tolist()
            for f in range(N_FRAMES):
                w.writerow(head + [f] + [repr(v) for v in cols[f]])


def load_dataset(path) -> list[AUTrial]:
    """Parse a per-(trial, frame) CSV into trials, validating the schema."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    order: list[str] = []
    meta: dict[str, tuple] = {}
    frames: dict[str, dict[int, list[float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        if tuple(header[:6]) != META_COLUMNS:
            raise DatasetError(f"{path}: header must start with {','.join(META_COLUMNS)}")
        aus = tuple(header[6:])
        if aus != AU_COLUMNS:
            raise DatasetError(f"{path}: expected {len(AU_COLUMNS)} AU columns {','.join(AU_COLUMNS)}, "
                               f"got {len(aus)}: {','.join(aus)}")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} cells, got {len(row)}")
            tid, sid, sess, par, lab, fr = row[:6]
            if lab not in LABELS:
                raise DatasetError(f"{path}:{lineno}: column label: unknown label {lab!r}")
            if par not in PARADIGMS:
                raise DatasetError(f"{path}:{lineno}: column paradigm: unknown paradigm {par!r}")
            try:
                frame = int(fr)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: column frame: not an integer: {fr!r}") from None
            if not 0 <= frame < N_FRAMES:
                raise DatasetError(f"{path}:{lineno}: column frame: {frame} outside [0, {N_FRAMES})")
            values = []
            for col, cell in zip(AU_COLUMNS, row[6:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: column {col}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DatasetError(f"{path}:{lineno}: column {col}: non-finite value {cell!r}")
                values.append(v)
            if tid not in meta:
                order.append(tid)
                meta[tid] = (sid, sess, par, lab)
                frames[tid] = {}
            elif meta[tid] != (sid, sess, par, lab):
                raise DatasetError(f"{path}:{lineno}: trial {tid} metadata differs from its first row")
            if frame in frames[tid]:
                raise DatasetError(f"{path}:{lineno}: trial {tid} repeats frame {frame}")
            frames[tid][frame] = values
    trials = []
    for tid in order:
        got = frames[tid]
        if len(got) != N_FRAMES:
            raise DatasetError(f"{path}: trial {tid} has {len(got)} frames, expected {N_FRAMES}")
        matrix = np.array([got[f] for f in range(N_FRAMES)]).T
        sid, sess, par, lab = meta[tid]
        trials.append(AUTrial(tid, sid, sess, par, lab, matrix))
    return trials


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- normalization ------------------------------------------------------------

@dataclass
class NormalizationManifest:
    mins: list
    maxs: list
    version: str = "per-au-minmax/1"
    source: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationManifest":
        return cls(**d)


def _as_array(trials) -> np.ndarray:
    if isinstance(trials, np.ndarray):
        return trials
    return stack(list(trials))[0]


def fit_normalization(trials, source: str = "") -> NormalizationManifest:
    """Per-AU min and max over a training split."""
    X = _as_array(trials)
    if X.shape[0] == 0:
        raise DatasetError("cannot fit normalization on an empty training split")
    mins = X.min(axis=(0, 2))
    maxs = X.max(axis=(0, 2))
    for au, lo, hi in zip(AU_IDS, mins, maxs):
        if not hi > lo:
            raise DatasetError(f"AU {au} is constant ({lo}) over the training split")
    return NormalizationManifest(mins.tolist(), maxs.tolist(), source=source)


def apply_normalization(trials, manifest: NormalizationManifest):
    """Min-max scale with training statistics, clamped to [0, 1].

    Accepts an (n, 17, 87) array or a list of trials and returns the same kind.
    """
    lo = np.asarray(manifest.mins)[None, :, None]
    hi = np.asarray(manifest.maxs)[None, :, None]
    if isinstance(trials, np.ndarray):
        return np.clip((trials - lo) / (hi - lo), 0.0, 1.0)
    out = []
    for t in trials:
        m = np.clip((t.matrix - lo[0]) / (hi[0] - lo[0]), 0.0, 1.0)
        out.append(AUTrial(t.trial_id, t.subject_id, t.session_id, t.paradigm, t.label, m))
    return out


# -- synthetic generator ------------------------------------------------------

@dataclass
class SynthConfig:
    n_trials: int = 3704
    stutter_fraction: float = 0.5
    cw_weight: float = 1710.0
    wg_weight: float = 1992.0
    ar_rho: float = 0.95
    noise_scale: float = 0.06
    baseline: float = 0.3
    amp_au6: float = 0.12
    amp_au14: float = 0.12
    bump_center_ms: float = 700.0
    bump_width_ms: float = 150.0
    ramp_start_ms: float = 1100.0
    ramp_end_ms: float = 1500.0
    label_noise: float = 0.15
    n_subjects: int = 12
    subject_rate_spread: float = 0.3
    n_sessions: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_trials <= 0:
            raise ValueError("n_trials must be positive")
        if not 0.0 < self.stutter_fraction < 1.0:
            raise ValueError(f"stutter_fraction must be in (0, 1), got {self.stutter_fraction}")
        if self.cw_weight < 0 or self.wg_weight < 0 or self.cw_weight + self.wg_weight <= 0:
            raise ValueError("paradigm weights must be non-negative and not both zero")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError(f"label_noise must be in [0, 0.5), got {self.label_noise}")
        if not -1.0 < self.ar_rho < 1.0:
            raise ValueError("ar_rho must be in (-1, 1)")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be positive")
        if self.n_subjects < 1 or self.n_sessions < 1:
            raise ValueError("n_subjects and n_sessions must be positive")
        lo = self.stutter_fraction - self.subject_rate_spread
        hi = self.stutter_fraction + self.subject_rate_spread
        if self.subject_rate_spread < 0 or lo < 0.0 or hi > 1.0:
            raise ValueError("subject stutter rates would leave [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def frame_times_ms() -> np.ndarray:
    return np.arange(N_FRAMES) * FRAME_MS


def signal_templates(cfg: SynthConfig) -> np.ndarray:
    """Additive stuttered-class signal, shape (17, 87): AU6 bump and AU14 ramp."""
    t = frame_times_ms()
    s = np.zeros((len(AU_IDS), N_FRAMES))
    s[au_row(6)] = cfg.amp_au6 * np.exp(-0.5 * ((t - cfg.bump_center_ms) / cfg.bump_width_ms) ** 2)
    span = cfg.ramp_end_ms - cfg.ramp_start_ms
    s[au_row(14)] = cfg.amp_au14 * np.clip((t - cfg.ramp_start_ms) / span, 0.0, 1.0)
    return s


def _whiten(e: np.ndarray, rho: float, sigma: float) -> np.ndarray:
    """Map stationary AR(1) residuals along the last axis to iid N(0, 1)."""
    w = np.empty_like(e)
    w[..., 0] = e[..., 0] / sigma
    w[..., 1:] = (e[..., 1:] - rho * e[..., :-1]) / (sigma * math.sqrt(1.0 - rho * rho))
    return w


@dataclass
class GeneratorOracle:
    """Exact Bayes posterior of the generator plus summary numbers."""
    cfg: SynthConfig
    posterior: np.ndarray
    bayes_auc: float
    clip_fraction: float
    warnings: list = field(default_factory=list)

    def log_likelihood_ratio(self, X: np.ndarray) -> np.ndarray:
        """log p(x | stuttered) - log p(x | fluent) under the Gaussian AR(1) model."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        s = signal_templates(self.cfg)
        rows = [r for r in range(len(AU_IDS)) if np.any(s[r] != 0)]
        llr = np.zeros(X.shape[0])
        for r in rows:
            we = _whiten(X[:, r] - self.cfg.baseline, self.cfg.ar_rho, self.cfg.noise_scale)
            ws = _whiten(s[r][None], self.cfg.ar_rho, self.cfg.noise_scale)[0]
            llr += we @ ws - 0.5 * ws @ ws
        return llr

    def score(self, X: np.ndarray) -> np.ndarray:
        """P(label = stuttered | matrix)."""
        pi = self.cfg.stutter_fraction
        eps = self.cfg.label_noise
        logit = self.log_likelihood_ratio(X) + math.log(pi / (1.0 - pi))
        pz = np.exp(-np.logaddexp(0.0, -logit))
        return (1.0 - eps) * pz + eps * (1.0 - pz)

    def summary(self) -> dict:
        return {"bayes_auc": self.bayes_auc, "clip_fraction": self.clip_fraction,
                "warnings": list(self.warnings)}


def _split_counts(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (i < extra) for i in range(parts)]


def generate_synthetic(cfg: SynthConfig) -> tuple[list[AUTrial], GeneratorOracle]:
    """Planted-signal AU trials and the generator's Bayes oracle.

    Each AU row is a stationary AR(1) process around ``cfg.baseline``. Latent
    stuttered trials add a Gaussian bump on AU6 and a linear ramp on AU14;
    labels are the latent class with a fraction ``label_noise`` flipped.
    """
    n = cfg.n_trials
    n_aus = len(AU_IDS)

    # subjects with stutter rates spread evenly around stutter_fraction
    rng = stream(cfg.seed, "synth", "design")
    rates = cfg.stutter_fraction + cfg.subject_rate_spread * np.linspace(-1.0, 1.0, cfg.n_subjects) \
        if cfg.n_subjects > 1 else np.array([cfg.stutter_fraction])
    subject = np.empty(n, dtype=int)
    perm = rng.permutation(n)
    z = np.zeros(n, dtype=int)
    start = 0
    for s, count in enumerate(_split_counts(n, cfg.n_subjects)):
        idx = perm[start:start + count]
        start += count
        subject[idx] = s
        k = int(round(rates[s] * count))
        z[rng.permutation(idx)[:k]] = 1

    # exact-count label flips within each latent class
    label = z.copy()
    for cls in (0, 1):
        idx = np.flatnonzero(z == cls)
        k = int(round(cfg.label_noise * idx.size))
        label[rng.permutation(idx)[:k]] = 1 - cls

    n_cw = int(round(n * cfg.cw_weight / (cfg.cw_weight + cfg.wg_weight)))
    paradigm = np.array(["WG"] * n, dtype=object)
    paradigm[rng.permutation(n)[:n_cw]] = "CW"
    session = rng.integers(1, cfg.n_sessions + 1, size=n)

    # stationary AR(1) noise, (n, 17, 87)
    noise_rng = stream(cfg.seed, "synth", "noise")
    innov = noise_rng.standard_normal((n, n_aus, N_FRAMES))
    e = np.empty_like(innov)
    e[..., 0] = cfg.noise_scale * innov[..., 0]
    step = cfg.noise_scale * math.sqrt(1.0 - cfg.ar_rho ** 2)
    for f in range(1, N_FRAMES):
        e[..., f] = cfg.ar_rho * e[..., f - 1] + step * innov[..., f]
    raw = cfg.baseline + e + z[:, None, None] * signal_templates(cfg)[None]
    X = np.clip(raw, 0.0, 1.0)
    clip_fraction = float(np.mean((X <= 0.0) | (X >= 1.0)))

    trials = [
        AUTrial(f"T{i:05d}", f"S{subject[i] + 1:02d}", str(session[i]), str(paradigm[i]),
                LABELS[label[i]], X[i])
        for i in range(n)
    ]

    oracle = GeneratorOracle(cfg, np.zeros(n), float("nan"), clip_fraction)
    oracle.posterior = oracle.score(X)
    if 0 < label.sum() < n:
        oracle.bayes_auc = auc_roc(oracle.posterior, label)
    if clip_fraction > 0.5:
        oracle.warnings.append(f"{clip_fraction:.1%} of values sit on the [0, 1] clip boundary; "
                               "the posterior is no longer exact")
    elif clip_fraction > 0:
        oracle.warnings.append(f"{clip_fraction:.2e} of values clipped; posterior is approximate there")
    return trials, oracle


def dataset_stats(trials: list[AUTrial]) -> dict:
    X, y = stack(trials)
    return {
        "n_trials": len(trials),
        "n_stuttered": int(y.sum()),
        "au_min": dict(zip(AU_COLUMNS, X.min(axis=(0, 2)).tolist())),
        "au_max": dict(zip(AU_COLUMNS, X.max(axis=(0, 2)).tolist())),
        "au_mean": dict(zip(AU_COLUMNS, X.mean(axis=(0, 2)).tolist())),
    }


def write_manifest(path, cfg: SynthConfig, oracle: GeneratorOracle, trials: list[AUTrial],
                   dataset_file: str | None = None, digest: str | None = None) -> None:
    doc = {
        "synth_config": cfg.to_dict(),
        "seed": cfg.seed,
        "oracle": oracle.summary(),
        "normalization_stats": dataset_stats(trials),
    }
    if dataset_file is not None:
        doc["dataset_file"] = dataset_file
        doc["dataset_sha256"] = digest
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
