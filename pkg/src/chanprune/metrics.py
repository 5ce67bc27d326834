"""Class-discriminant channel scoring functions.

Four single-variate two-class statistics (symmetric divergence, absolute SNR,
Fisher discriminant ratio, Student's t statistic) are generalized to
multi-class channel scoring by averaging them over one-vs-rest partitions of
the channel's activations. Two high-dimensional metrics are included for
comparison: a ridge-regularized scatter-trace discriminant (di) and an
RBF-kernel maximum mean discrepancy (mmd).

Numerics: activations are stored float32 but every statistic is accumulated
in float64 through a chunked, merge-based streaming scheme, so scoring large
dumps never loads more than one block at 64-bit width. All scoring functions
are pure and deterministic; channel-level parallelism cannot change results.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg.blas import dsyrk
from scipy.spatial.distance import cdist

from .tensorstore import ActivationSet, slice_channel

METRIC_NAMES = ("gsd", "gttest", "gabssnr", "gfdr", "di", "mmd")

_CHUNK = 1 << 16


class NumericError(ArithmeticError):
    """A linear solve or statistic failed for numeric reasons."""


@dataclass(frozen=True)
class MetricConfig:
    """Knobs shared by all scoring functions.

    variance_epsilon floors every variance so dead (constant) channels score
    finite values instead of dividing by zero; set it to 0 to disable the
    floor (e.g. when checking affine invariance). mmd_max_per_class caps each
    partition side before the quadratic kernel sums; the subsample is drawn
    from a seeded generator so results stay reproducible.
    """

    ridge_rho: float = 1e-4
    kernel_sigma: float = 1.0
    variance_epsilon: float = 1e-12
    mmd_max_per_class: int = 256

    def __post_init__(self):
        if self.ridge_rho <= 0:
            raise ValueError("ridge_rho must be > 0")
        if self.kernel_sigma <= 0:
            raise ValueError("kernel_sigma must be > 0")
        if self.variance_epsilon < 0:
            raise ValueError("variance_epsilon must be >= 0")
        if self.mmd_max_per_class < 1:
            raise ValueError("mmd_max_per_class must be >= 1")


@dataclass(frozen=True)
class ClassStats:
    """Count, mean and unbiased variance of one side of a partition.

    count is the number of scalar activations aggregated (samples times
    spatial positions), which is what the t statistic's denominator uses.
    """

    count: int
    mean: float
    variance: float


@dataclass(frozen=True)
class ChannelScore:
    layer_id: str
    channel_index: int
    metric: str
    score: float


def _merge_moments(n1, mean1, m2_1, n2, mean2, m2_2):
    """Combine two (count, mean, sum-of-squared-deviations) accumulators."""
    if n1 == 0:
        return n2, mean2, m2_2
    if n2 == 0:
        return n1, mean1, m2_1
    n = n1 + n2
    delta = mean2 - mean1
    mean = mean1 + delta * (n2 / n)
    m2 = m2_1 + m2_2 + delta * delta * (n1 * n2 / n)
    return n, mean, m2


def _stream_moments(maps):
    """(count, mean, M2) over every scalar activation, accumulated in f64.

    Blocks are consumed in storage order and merged pairwise, which keeps the
    reduction order fixed regardless of how the caller schedules channels.
    """
    flat = np.asarray(maps).reshape(-1)
    n, mean, m2 = 0, 0.0, 0.0
    for start in range(0, flat.size, _CHUNK):
        block = flat[start:start + _CHUNK].astype(np.float64)
        bmean = float(block.mean())
        bm2 = float(np.square(block - bmean).sum())
        n, mean, m2 = _merge_moments(n, mean, m2, block.size, bmean, bm2)
    return n, mean, m2


def _finish_stats(n, mean, m2, variance_epsilon) -> ClassStats:
    if n < 2:
        raise ValueError("need at least 2 activations for an unbiased variance")
    var = m2 / (n - 1)
    return ClassStats(n, mean, max(var, variance_epsilon))


def channel_stats(maps, variance_epsilon: float = 1e-12) -> ClassStats:
    """Mean and unbiased variance over all scalar activations in `maps`.

    `maps` is any array whose leading axis indexes samples; every element
    counts as one activation. Raises on empty or single-activation input.
    """
    arr = np.asarray(maps)
    if arr.size == 0:
        raise ValueError("empty activation subset")
    return _finish_stats(*_stream_moments(arr), variance_epsilon)


# ---------------------------------------------------------------------------
# Two-class statistics. p and q are the stats of the two partition sides.
# ---------------------------------------------------------------------------

def sd(p: ClassStats, q: ClassStats) -> float:
    """Symmetric divergence: symmetric variance ratio plus an SNR term.

    0.5 * (vp/vq + vq/vp) + 0.5 * (mp - mq)^2 / (vp + vq) - 1. Zero when the
    two sides have equal mean and variance, grows when either side is much
    more concentrated or the centroids separate.
    """
    vp, vq = _positive_variances(p, q)
    ratio = 0.5 * (vp / vq + vq / vp)
    snr = 0.5 * (p.mean - q.mean) ** 2 / (vp + vq)
    return ratio + snr - 1.0


def abssnr(p: ClassStats, q: ClassStats) -> float:
    """Absolute signal-to-noise ratio |mp - mq| / (sp + sq)."""
    vp, vq = _positive_variances(p, q)
    return abs(p.mean - q.mean) / (np.sqrt(vp) + np.sqrt(vq))


def fdr(p: ClassStats, q: ClassStats) -> float:
    """Fisher discriminant ratio (mp - mq)^2 / (vp + vq)."""
    vp, vq = _positive_variances(p, q)
    return (p.mean - q.mean) ** 2 / (vp + vq)


def ttest(p: ClassStats, q: ClassStats) -> float:
    """Unequal-variance t statistic |mp - mq| / sqrt(vp/np + vq/nq).

    Counts are activation counts, consistent with the variances being taken
    over activations.
    """
    if p.count < 2 or q.count < 2:
        raise ValueError("t statistic needs at least 2 activations per side")
    vp, vq = _positive_variances(p, q)
    return abs(p.mean - q.mean) / np.sqrt(vp / p.count + vq / q.count)


def _positive_variances(p, q):
    if p.variance <= 0 or q.variance <= 0:
        raise NumericError("zero variance with the epsilon floor disabled")
    return p.variance, q.variance


_BASE_METRICS = {"gsd": sd, "gttest": ttest, "gabssnr": abssnr, "gfdr": fdr}


def g_score(channel: ActivationSet, base, cfg: MetricConfig | None = None) -> float:
    """One-vs-rest generalization of a two-class statistic.

    For every class c the channel's maps are split into the class-c side and
    the everything-else side, `base` is evaluated on the two sides' pooled
    activation statistics, and the per-class values are averaged. The rest
    side's moments are obtained by merging the per-class accumulators, so
    each map is only read once.
    """
    cfg = cfg or MetricConfig()
    if callable(base):
        base_fn = base
    else:
        base_fn = _BASE_METRICS[f"g{base}" if not base.startswith("g") else base]
    per_class = []
    for c in range(channel.num_classes):
        members = channel.class_members(c)
        if members.shape[0] == 0:
            raise ValueError(f"class {c} has no samples in the scoring set")
        per_class.append(_stream_moments(members))

    eps = cfg.variance_epsilon
    total = 0.0
    for c in range(channel.num_classes):
        rest = (0, 0.0, 0.0)
        for other in range(channel.num_classes):
            if other != c:
                rest = _merge_moments(*rest, *per_class[other])
        p = _finish_stats(*per_class[c], eps)
        q = _finish_stats(*rest, eps)
        total += base_fn(p, q)
    return total / channel.num_classes


def di(channel: ActivationSet, cfg: MetricConfig | None = None) -> float:
    """Trace of the ridge-regularized total scatter inverse times the
    between-class scatter.

    Because the between-class scatter has rank at most C, the trace reduces
    to one linear solve per class centroid: sum_c N_c * b_c' inv(S + rho I)
    b_c with b_c the centered class centroid. When there are fewer samples
    than flattened features the solve is done against the N x N Gram matrix
    instead (matrix inversion lemma), which is what keeps this metric usable
    on large feature maps at all.
    """
    cfg = cfg or MetricConfig()
    x = channel.maps.reshape(channel.num_samples, -1).astype(np.float64)
    n, dim = x.shape
    centroid = x.mean(axis=0)
    xc = x - centroid

    counts, diffs = [], []
    for c in range(channel.num_classes):
        members = channel.labels == c
        nc = int(members.sum())
        if nc == 0:
            raise ValueError(f"class {c} has no samples in the scoring set")
        counts.append(nc)
        diffs.append(x[members].mean(axis=0) - centroid)

    rho = cfg.ridge_rho
    try:
        # syrk fills one triangle of xc' xc (or xc xc'), which is all the
        # Cholesky factorization reads; half the work of a full matmul
        if dim <= n:
            scatter = dsyrk(1.0, xc.T, trans=0, lower=1)
            scatter[np.diag_indices_from(scatter)] += rho
            factor = scipy.linalg.cho_factor(scatter, lower=True)
            total = 0.0
            for nc, b in zip(counts, diffs):
                total += nc * max(float(b @ scipy.linalg.cho_solve(factor, b)), 0.0)
        else:
            gram = dsyrk(1.0, xc.T, trans=1, lower=1)
            gram[np.diag_indices_from(gram)] += rho
            factor = scipy.linalg.cho_factor(gram, lower=True)
            total = 0.0
            for nc, b in zip(counts, diffs):
                u = xc @ b
                val = (float(b @ b) - float(u @ scipy.linalg.cho_solve(factor, u))) / rho
                total += nc * max(val, 0.0)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"scatter solve failed despite ridge {rho}: {exc}") from exc
    return total


def mmd(channel: ActivationSet, cfg: MetricConfig | None = None, seed: int = 0) -> float:
    """One-vs-rest average of the biased two-sample kernel discrepancy.

    Uses the RBF kernel exp(-||x - y||^2 / (2 sigma^2)) and the V-statistic
    estimator (the i = j kernel terms are included, so identical multisets
    give exactly zero). Sides larger than mmd_max_per_class are reduced to a
    seeded uniform subsample before the quadratic kernel sums.
    """
    cfg = cfg or MetricConfig()
    x = channel.maps.reshape(channel.num_samples, -1).astype(np.float64)
    total = 0.0
    for c in range(channel.num_classes):
        members = channel.labels == c
        a, b = x[members], x[~members]
        if a.shape[0] == 0 or b.shape[0] == 0:
            raise ValueError(f"one-vs-rest partition for class {c} has an empty side")
        rng = np.random.default_rng([seed, c])
        a = _cap_side(a, cfg.mmd_max_per_class, rng)
        b = _cap_side(b, cfg.mmd_max_per_class, rng)
        total += _mmd_two(a, b, cfg.kernel_sigma)
    return total / channel.num_classes


def _cap_side(side, cap, rng):
    if side.shape[0] <= cap:
        return side
    keep = np.sort(rng.choice(side.shape[0], size=cap, replace=False))
    return side[keep]


def _mmd_two(a, b, sigma) -> float:
    gamma = 1.0 / (2.0 * sigma * sigma)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean"))
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    return max(float(kaa.mean() + kbb.mean() - 2.0 * kab.mean()), 0.0)


# ---------------------------------------------------------------------------
# Layer-level scoring and ranking
# ---------------------------------------------------------------------------

def score_channel(channel: ActivationSet, metric: str, cfg: MetricConfig | None = None,
                  seed: int = 0) -> float:
    """Score one channel with a named metric."""
    if metric in _BASE_METRICS:
        return g_score(channel, _BASE_METRICS[metric], cfg)
    if metric == "di":
        return di(channel, cfg)
    if metric == "mmd":
        return mmd(channel, cfg, seed=seed)
    raise ValueError(f"unknown metric {metric!r}")


def score_layer(activations_4d, labels, num_classes: int, metric: str,
                cfg: MetricConfig | None = None, layer_id: str = "",
                seed: int = 0, threads: int = 1) -> list[ChannelScore]:
    """Score every channel of a [N, C, W, H] activation dump.

    Channels are independent, so they may be scored by a worker pool; the
    result list is always in channel order and bit-identical to the serial
    run. metric="random" assigns a seeded permutation of 0..C-1 as scores,
    the baseline every discriminant function is compared against.
    """
    arr = np.asarray(activations_4d)
    if arr.ndim != 4:
        raise ValueError(f"expected [N, C, W, H] activations, got ndim={arr.ndim}")
    n_channels = arr.shape[1]
    if metric == "random":
        perm = np.random.default_rng(seed).permutation(n_channels)
        return [ChannelScore(layer_id, ch, metric, float(perm[ch]))
                for ch in range(n_channels)]

    def worker(ch):
        channel = slice_channel(arr, ch, labels, num_classes)
        return score_channel(channel, metric, cfg, seed=seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(worker, range(n_channels)))
    else:
        values = [worker(ch) for ch in range(n_channels)]
    for ch, value in enumerate(values):
        if not np.isfinite(value) or value < 0:
            raise NumericError(f"metric {metric} produced invalid score {value} "
                               f"for channel {ch}")
    return [ChannelScore(layer_id, ch, metric, float(v)) for ch, v in enumerate(values)]


def rank_channels(scores, n: int) -> list[int]:
    """Indices of the n lowest-scoring channels, ascending score.

    Ties are broken toward the lower channel index, so rankings are total
    and deterministic.
    """
    scores = list(scores)
    if not 0 <= n <= len(scores):
        raise ValueError(f"cannot take {n} channels out of {len(scores)}")
    ordered = sorted(scores, key=lambda s: (s.score, s.channel_index))
    return [s.channel_index for s in ordered[:n]]


# ---------------------------------------------------------------------------
# Score report CSV
# ---------------------------------------------------------------------------

SCORE_CSV_HEADER = ["layer_id", "channel_index", "metric", "score"]


def write_scores_csv(path, scores) -> None:
    """Write scores as CSV, rows ordered by (layer_id, channel_index)."""
    rows = sorted(scores, key=lambda s: (s.layer_id, s.channel_index))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SCORE_CSV_HEADER)
        for s in rows:
            writer.writerow([s.layer_id, s.channel_index, s.metric, f"{s.score:.9g}"])


def read_scores_csv(path) -> list[ChannelScore]:
    """Parse and validate a score CSV produced by write_scores_csv."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SCORE_CSV_HEADER:
            raise ValueError(f"bad score CSV header: {header}")
        out = []
        for row in reader:
            if len(row) != 4:
                raise ValueError(f"bad score CSV row: {row}")
            out.append(ChannelScore(row[0], int(row[1]), row[2], float(row[3])))
    return out
