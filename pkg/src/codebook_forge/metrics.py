"""Agreement statistics for model-vs-annotator label comparisons.

Covers raw agreement, binary confusion rates, macro F1, percentile-bootstrap
confidence intervals, paired t-tests with a Bonferroni helper, a bootstrap
equality-of-means test, nominal Krippendorff's alpha, self-consistency
across runs, and the disagreement queues used for expert second opinions.

All randomized statistics take explicit seeds, and reports embed the seed
and iteration count so results can be reproduced from the report alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import CodebookForgeError


class StatsError(CodebookForgeError):
    """Empty, degenerate, or otherwise unusable statistical input."""


@dataclass(frozen=True)
class LabelPair:
    """One narrative's predicted label next to its reference label."""

    narrative_id: str
    predicted: str
    reference: str


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int
    positive_label: str

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ConfusionRates:
    """TPR/FPR/FNR with zero-denominator rates surfaced as None, never 0."""

    counts: ConfusionCounts
    tpr: float | None
    fpr: float | None
    fnr: float | None


@dataclass(frozen=True)
class AgreementReport:
    point: float
    ci_low: float
    ci_high: float
    n: int
    bootstrap_iterations: int
    seed: int

    def to_json(self) -> dict:
        return {
            "agreement": self.point,
            "ci": [self.ci_low, self.ci_high],
            "n": self.n,
            "bootstrap_iterations": self.bootstrap_iterations,
            "seed": self.seed,
        }


def agreement(pairs: Sequence[LabelPair]) -> float:
    """Ratio of matching labels to total number of instances."""
    if not pairs:
        raise StatsError("agreement over an empty pair set")
    matches = sum(1 for p in pairs if p.predicted == p.reference)
    return matches / len(pairs)


def match_indicators(pairs: Sequence[LabelPair]) -> list[int]:
    return [1 if p.predicted == p.reference else 0 for p in pairs]


def confusion(pairs: Sequence[LabelPair], positive_label: str) -> ConfusionRates:
    """Binary confusion counts and rates against one positive label.

    TPR = tp/(tp+fn), FPR = fp/(fp+tn), FNR = 1 - TPR. A zero denominator
    yields None for that rate rather than silently fabricating a 0.
    """
    if not pairs:
        raise StatsError("confusion over an empty pair set")
    labels = {p.predicted for p in pairs} | {p.reference for p in pairs}
    if positive_label not in labels and len(pairs) > 0:
        # Allowed: a perfect all-negative set never mentions the positive label.
        pass
    tp = fp = tn = fn = 0
    for p in pairs:
        actual_pos = p.reference == positive_label
        predicted_pos = p.predicted == positive_label
        if actual_pos and predicted_pos:
            tp += 1
        elif actual_pos:
            fn += 1
        elif predicted_pos:
            fp += 1
        else:
            tn += 1
    counts = ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn, positive_label=positive_label)
    tpr = tp / (tp + fn) if (tp + fn) else None
    fpr = fp / (fp + tn) if (fp + tn) else None
    # fn/(tp+fn) is 1 - TPR computed without the float cancellation error
    fnr = fn / (tp + fn) if (tp + fn) else None
    return ConfusionRates(counts=counts, tpr=tpr, fpr=fpr, fnr=fnr)


def per_class_f1(pairs: Sequence[LabelPair], classes: Sequence[str]) -> dict[str, float]:
    """One-vs-rest F1 per class; 0 when precision + recall is 0."""
    if not pairs:
        raise StatsError("F1 over an empty pair set")
    out: dict[str, float] = {}
    for cls in classes:
        tp = sum(1 for p in pairs if p.predicted == cls and p.reference == cls)
        fp = sum(1 for p in pairs if p.predicted == cls and p.reference != cls)
        fn = sum(1 for p in pairs if p.predicted != cls and p.reference == cls)
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        out[cls] = (
            2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        )
    return out


def macro_f1(pairs: Sequence[LabelPair], classes: Sequence[str]) -> tuple[float, dict[str, float]]:
    """Unweighted mean of per-class F1 over the given classes."""
    by_class = per_class_f1(pairs, classes)
    return sum(by_class.values()) / len(by_class), by_class


def bootstrap_ci(
    indicators: Sequence[int],
    iterations: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> AgreementReport:
    """Percentile-bootstrap confidence interval for a 0/1 indicator mean.

    Resamples the indicators with replacement ``iterations`` times and takes
    the (1-level)/2 and 1-(1-level)/2 percentiles of the resampled means.
    The interval is widened, if ever needed, to contain the point estimate.
    """
    if not indicators:
        raise StatsError("bootstrap over an empty sample")
    if iterations < 1:
        raise StatsError("bootstrap needs at least 1 iteration")
    values = np.asarray(indicators, dtype=np.float64)
    n = len(values)
    rng = np.random.default_rng([seed, 101])
    if set(np.unique(values)) <= {0.0, 1.0}:
        # For 0/1 data the resampled ones-count is exactly Binomial(n, mean),
        # which sidesteps materializing iterations x n index arrays.
        means = rng.binomial(n, values.mean(), size=iterations) / n
    else:
        resamples = rng.integers(0, n, size=(iterations, n))
        means = values[resamples].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    point = float(values.mean())
    return AgreementReport(
        point=point,
        ci_low=min(float(lo), point),
        ci_high=max(float(hi), point),
        n=n,
        bootstrap_iterations=iterations,
        seed=seed,
    )


# --- Student t machinery -----------------------------------------------------
#
# The two-sided p-value for a t statistic is computed from the regularized
# incomplete beta function via its continued-fraction expansion, accurate to
# well below 1e-6 for any practical degrees of freedom.


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise StatsError("incomplete beta continued fraction failed to converge")


def _betai(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-sided p-value for a Student t statistic with ``df`` degrees of freedom."""
    if df < 1:
        raise StatsError("degrees of freedom must be >= 1")
    return _betai(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Classical paired t-test on per-unit scores.

    Returns (t, two-sided p) with n-1 degrees of freedom; identical or
    zero-variance differences are rejected as degenerate input.
    """
    if len(a) != len(b):
        raise StatsError("paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise StatsError("paired t-test needs at least 2 pairs")
    diffs = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    sd = float(diffs.std(ddof=1))
    if sd == 0.0:
        raise StatsError("zero-variance differences: t statistic undefined")
    t = float(diffs.mean() / (sd / math.sqrt(n)))
    return t, student_t_two_sided_p(t, n - 1)


def bonferroni_alpha(base: float, comparisons: int) -> float:
    """Per-comparison significance threshold under Bonferroni correction."""
    if comparisons < 1:
        raise StatsError("comparisons must be >= 1")
    return base / comparisons


def bootstrap_mean_equality_test(
    a: Sequence[float],
    b: Sequence[float],
    iterations: int = 10_000,
    seed: int = 0,
) -> float:
    """Two-sided bootstrap hypothesis test for equality of two means.

    Both samples are shifted to the pooled mean (imposing the null), then
    resampled with replacement; the p-value is the fraction of resampled
    |mean difference| values at least as large as the observed one.
    """
    if not a or not b:
        raise StatsError("equality-of-means test needs two non-empty samples")
    xs = np.asarray(a, dtype=np.float64)
    ys = np.asarray(b, dtype=np.float64)
    observed = abs(float(xs.mean() - ys.mean()))
    pooled = float(np.concatenate([xs, ys]).mean())
    xs_null = xs - xs.mean() + pooled
    ys_null = ys - ys.mean() + pooled
    rng = np.random.default_rng([seed, 211])
    x_means = xs_null[rng.integers(0, len(xs), size=(iterations, len(xs)))].mean(axis=1)
    y_means = ys_null[rng.integers(0, len(ys), size=(iterations, len(ys)))].mean(axis=1)
    exceed = np.abs(x_means - y_means) >= observed
    return float(exceed.mean())


def krippendorff_alpha(rows: Sequence[Sequence[str | None]]) -> float:
    """Nominal Krippendorff's alpha over a unit-by-annotator label matrix.

    ``rows[u][a]`` is annotator a's label for unit u, or None when missing.
    Units with fewer than two labels contribute nothing. Computed through
    the coincidence matrix: alpha = 1 - D_observed / D_expected with the
    nominal distance (0 if equal, 1 otherwise).
    """
    coincidence: dict[tuple[str, str], float] = {}
    totals: dict[str, float] = {}
    n_pairable = 0.0
    for row in rows:
        values = [v for v in row if v is not None]
        m = len(values)
        if m < 2:
            continue
        n_pairable += m
        weight = 1.0 / (m - 1)
        for i, vi in enumerate(values):
            totals[vi] = totals.get(vi, 0.0) + 1.0
            for j, vj in enumerate(values):
                if i == j:
                    continue
                coincidence[(vi, vj)] = coincidence.get((vi, vj), 0.0) + weight
    if n_pairable == 0:
        raise StatsError("no pairable values: every unit has fewer than 2 labels")
    observed = sum(v for (c, k), v in coincidence.items() if c != k)
    expected = sum(
        totals[c] * totals[k] for c in totals for k in totals if c != k
    ) / (n_pairable - 1)
    if expected == 0.0:
        return 1.0
    return 1.0 - observed / expected


def self_consistency(runs: Sequence[Sequence[str]]) -> float:
    """Fraction of positions on which every run produced the same label."""
    if len(runs) < 2:
        raise StatsError("self-consistency needs at least 2 runs")
    lengths = {len(r) for r in runs}
    if len(lengths) != 1:
        raise StatsError("runs must be aligned over the same ids")
    (n,) = lengths
    if n == 0:
        raise StatsError("self-consistency over empty runs")
    consistent = sum(
        1 for i in range(n) if len({run[i] for run in runs}) == 1
    )
    return consistent / n


@dataclass(frozen=True)
class DisagreementQueues:
    """Sampled ids for expert second opinions, disagreeing and agreeing."""

    disagree_ids: tuple[str, ...]
    agree_ids: tuple[str, ...]
    disagree_available: int
    agree_available: int
    requested: int
    seed: int

    @property
    def disagree_shortfall(self) -> int:
        return max(0, self.requested - len(self.disagree_ids))

    @property
    def agree_shortfall(self) -> int:
        return max(0, self.requested - len(self.agree_ids))


def disagreement_queue(
    pairs: Sequence[LabelPair], limit: int, seed: int = 0
) -> DisagreementQueues:
    """Seeded uniform samples of disagreeing and agreeing narrative ids.

    Returns up to ``limit`` ids from each side; when fewer are available the
    whole side is returned and the shortfall is visible through the
    ``*_available`` counts.
    """
    disagree = sorted(p.narrative_id for p in pairs if p.predicted != p.reference)
    agree = sorted(p.narrative_id for p in pairs if p.predicted == p.reference)
    rng = np.random.default_rng([seed, 307])

    def sample(ids: list[str]) -> tuple[str, ...]:
        if len(ids) <= limit:
            return tuple(ids)
        picked = rng.permutation(len(ids))[:limit]
        return tuple(ids[i] for i in picked)

    return DisagreementQueues(
        disagree_ids=sample(disagree),
        agree_ids=sample(agree),
        disagree_available=len(disagree),
        agree_available=len(agree),
        requested=limit,
        seed=seed,
    )
