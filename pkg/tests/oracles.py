"""Reference implementations used only by the test suite."""
import itertools

import numpy as np


def f_statistic_rows(samples: np.ndarray, sizes) -> np.ndarray:
    """One-way F for every row of ``samples`` split column-wise into groups of ``sizes``."""
    edges = np.cumsum([0] + list(sizes))
    groups = [samples[:, a:b] for a, b in zip(edges[:-1], edges[1:])]
    grand = samples.mean(axis=1)
    ssb = sum(g.shape[1] * (g.mean(axis=1) - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean(axis=1, keepdims=True)) ** 2).sum(axis=1) for g in groups)
    k, n = len(sizes), samples.shape[1]
    return (ssb / (k - 1)) / (ssw / (n - k))


def resampled_p(F_obs: float, sizes, n_resamples: int = 100_000, seed: int = 0, chunk: int = 20_000):
    """Monte-Carlo p of ``F_obs`` over fresh iid normal datasets with the same group sizes.

    Returns ``(p, standard error)``. This is the null distribution the F test
    claims to describe; permuting the observed values instead would give the
    data-conditional permutation p, which differs on small samples.
    """
    rng = np.random.default_rng(seed)
    n = int(sum(sizes))
    hits = 0
    for start in range(0, n_resamples, chunk):
        m = min(chunk, n_resamples - start)
        draws = rng.standard_normal((m, n))
        hits += int(np.sum(f_statistic_rows(draws, sizes) >= F_obs))
    p = hits / n_resamples
    return p, float(np.sqrt(max(p * (1 - p), 1.0 / n_resamples) / n_resamples))


def pooled_t(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = a.size, b.size
    sp2 = (((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / (na + nb - 2)
    return float((a.mean() - b.mean()) / np.sqrt(sp2 * (1 / na + 1 / nb)))


def brute_force_auc(scores, labels) -> float:
    """Mann-Whitney AUC by enumerating every (positive, negative) pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))
