"""One-way ANOVA over attribution maps with F-distribution p-values."""
from __future__ import annotations

import csv
import io
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from .data import AU_IDS, LOWER_AUS, UPPER_AUS, au_region, au_row
from .explain import window_means

WINDOWS = ((0.0, 500.0), (500.0, 800.0), (1100.0, 1500.0))
FULL_WINDOW = (0.0, 1500.0)
FACTORS = ("label", "paradigm", "stutter_band", "window")
F_SURROGATE = sys.float_info.max


# -- F distribution ---------------------------------------------------------

def _beta_cf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10000) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise RuntimeError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast only on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def f_sf(F: float, d1: float, d2: float) -> float:
    """P(F(d1, d2) > F)."""
    if d1 <= 0 or d2 <= 0:
        raise ValueError("degrees of freedom must be positive")
    if F <= 0.0:
        return 1.0
    if math.isinf(F):
        return 0.0
    return min(1.0, max(0.0, betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * F))))


# -- one-way ANOVA ------------------------------------------------------------

@dataclass
class AnovaTable:
    F: float
    df_between: int
    df_within: int
    p: float
    grouping: dict = field(default_factory=dict)


def anova_oneway(groups, grouping: dict | None = None) -> AnovaTable:
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("ANOVA needs at least two groups")
    for i, g in enumerate(groups):
        if g.size < 2:
            raise ValueError(f"group {i} has {g.size} samples; need at least 2")
    k = len(groups)
    n = sum(g.size for g in groups)
    grand = np.concatenate(groups).mean()
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
    dfb, dfw = k - 1, n - k
    scale = max(1.0, float(np.max(np.abs(np.concatenate(groups)))))
    # sums that are rounding noise relative to the data count as zero
    noise = 1e-24 * n * scale ** 2
    if ssb <= noise:
        return AnovaTable(0.0, dfb, dfw, 1.0, dict(grouping or {}))
    if ssw <= noise:
        return AnovaTable(F_SURROGATE, dfb, dfw, 0.0, dict(grouping or {}))
    F = float((ssb / dfb) / (ssw / dfw))
    return AnovaTable(F, dfb, dfw, float(f_sf(F, dfb, dfw)), dict(grouping or {}))


# -- attribution ANOVA ----------------------------------------------------------

@dataclass
class GroupingSpec:
    factor: str = "label"
    threshold: float = 40.0
    windows: tuple = WINDOWS
    scope: object = "all"  # "all", "upper", "lower" or a single AU id
    positive_only: bool = False

    def __post_init__(self):
        self.factor = self.factor.replace("-", "_")
        if self.factor not in FACTORS:
            raise ValueError(f"factor must be one of {FACTORS}, got {self.factor!r}")
        if not 0.0 < self.threshold < 100.0:
            raise ValueError("stutter-band threshold must be in (0, 100)")
        for t0, t1 in self.windows:
            if not 0.0 <= t0 < t1 <= 1500.0:
                raise ValueError(f"window ({t0}, {t1}) outside [0, 1500] ms")

    def aus(self) -> tuple:
        if self.scope == "all":
            return AU_IDS
        if self.scope == "upper":
            return UPPER_AUS
        if self.scope == "lower":
            return LOWER_AUS
        au = int(self.scope)
        au_row(au)
        return (au,)


@dataclass
class AnovaRow:
    factor: str
    au: int
    window: tuple
    table: AnovaTable
    p_bonferroni: float = float("nan")

    @property
    def region(self) -> str:
        return au_region(self.au)


def subject_stutter_rates(subjects, labels) -> dict:
    """Percentage of stuttered trials per subject."""
    subjects = np.asarray(subjects)
    stut = np.asarray(labels) == "stuttered"
    return {s: 100.0 * float(stut[subjects == s].mean()) for s in np.unique(subjects)}


def stutter_bands(metadata: dict, threshold: float = 40.0) -> np.ndarray:
    """HSR/LSR per trial; a rate exactly at the threshold counts as LSR."""
    if "stutter_rate" in metadata:
        rates = np.asarray(metadata["stutter_rate"], dtype=float)
    else:
        table = subject_stutter_rates(metadata["subject_id"], metadata["label"])
        rates = np.array([table[s] for s in metadata["subject_id"]])
    return np.where(rates > threshold, "HSR", "LSR")


def _factor_levels(metadata: dict, spec: GroupingSpec) -> np.ndarray:
    if spec.factor in ("label", "window"):
        key = "label"
    elif spec.factor == "paradigm":
        key = "paradigm"
    else:
        if "subject_id" not in metadata and "stutter_rate" not in metadata:
            raise KeyError("stutter_band grouping needs subject_id or stutter_rate metadata")
        return stutter_bands(metadata, spec.threshold)
    if key not in metadata:
        raise KeyError(f"metadata has no {key!r} column for factor {spec.factor}")
    return np.asarray(metadata[key])


def attribution_anova(maps, metadata: dict, spec: GroupingSpec) -> list[AnovaRow]:
    """One ANOVA per AU (and per window for the ``window`` factor), sorted by F descending.

    ``maps`` is (n, 17, 87) or a list of AttributionMap; ``metadata`` maps
    column names to length-n arrays aligned with the maps.
    """
    if isinstance(maps, (list, tuple)):
        values = np.stack([getattr(m, "values", m) for m in maps])
    else:
        values = np.asarray(maps, dtype=np.float64)
    if spec.positive_only:
        values = np.maximum(values, 0.0)
    if "trial_id" in metadata and len(metadata["trial_id"]) != values.shape[0]:
        raise ValueError(f"{values.shape[0]} maps but {len(metadata['trial_id'])} metadata rows")
    levels = _factor_levels(metadata, spec)
    if levels.shape[0] != values.shape[0]:
        raise ValueError(f"{values.shape[0]} maps but {levels.shape[0]} factor values")
    names = sorted(set(levels.tolist()))
    if len(names) < 2:
        raise ValueError(f"factor {spec.factor} has a single level {names} after filtering")
    windows = spec.windows if spec.factor == "window" else (FULL_WINDOW,)
    rows = []
    for window in windows:
        wm = window_means(values, window)
        for au in spec.aus():
            col = wm[:, au_row(au)]
            groups = []
            for name in names:
                g = col[levels == name]
                if g.size < 2:
                    raise ValueError(f"factor {spec.factor} level {name!r} has {g.size} trials")
                groups.append(g)
            table = anova_oneway(groups, {"factor": spec.factor, "levels": names})
            rows.append(AnovaRow(spec.factor, au, tuple(window), table))
    m = len(rows)
    for row in rows:
        row.p_bonferroni = min(1.0, row.table.p * m)
    rows.sort(key=lambda r: -r.table.F)
    return rows


def anova_csv(rows: list[AnovaRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["factor", "au_id", "region", "window", "F", "df1", "df2", "p", "p_bonferroni"])
    for r in rows:
        w.writerow([r.factor, r.au, r.region, f"{r.window[0]:g}-{r.window[1]:g}", repr(r.table.F),
                    r.table.df_between, r.table.df_within, repr(r.table.p), repr(r.p_bonferroni)])
    return buf.getvalue()


def significance_summary(rows: list[AnovaRow]) -> str:
    from .data import AU_NAMES
    lines = []
    for cut in (0.005, 0.05):
        hits = [r for r in rows if r.table.p < cut]
        lines.append(f"p < {cut}: {len(hits)} of {len(rows)}")
        for r in hits:
            lines.append(f"  AU {r.au} ({AU_NAMES[r.au]}, {r.region}) window {r.window[0]:g}-{r.window[1]:g} ms: "
                         f"F={r.table.F:.2f}, p={r.table.p:.3g}")
    return "\n".join(lines) + "\n"
