"""Posterior-fidelity and uncertainty metrics.

All information quantities are in nats.  Fidelity against a reference
predictive (typically the stacked-chain sampler output) uses two bounded
discrepancies: agreement, the fraction of points whose top-1 class matches,
and variance, the mean total-variation distance between the predictive
rows.  Epistemic uncertainty is the mutual information between the class
label and the parameter draw: entropy of the mean member predictive minus
the mean member entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DomainError, ShapeError

__all__ = [
    "PredictiveDistribution",
    "MetricsReport",
    "entropy_of",
    "predictive_entropy",
    "mutual_information",
    "agreement",
    "predictive_variance",
    "ece",
    "odd_auroc",
    "mean_abs_diff",
    "evaluate",
]

REPORT_METADATA = {
    "entropy_units": "nats",
    "agreement_definition": "fraction of points whose top-1 class matches the reference",
    "variance_definition": "mean total-variation distance to the reference predictive",
    "odd_score": "predictive entropy, out-of-domain positive",
}


@dataclass
class PredictiveDistribution:
    """Row-stochastic predictive probabilities, optionally with member detail.

    ``member_stack`` holds one probability matrix per ensemble member /
    posterior sample (shape M x n x C).  When the stack is too large to
    retain, ``mean_member_entropy`` may carry the streaming per-point mean
    of member entropies instead, which is all the mutual information needs.
    """

    probs: np.ndarray
    member_stack: np.ndarray | None = None
    points: np.ndarray | None = None
    mean_member_entropy: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ShapeError(f"probs must be n x C, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise DomainError("probabilities must be finite and nonnegative")
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-9:
            raise DomainError("probability rows must sum to 1 within 1e-9")
        self.probs = probs
        if self.member_stack is not None:
            stack = np.asarray(self.member_stack, dtype=np.float64)
            if stack.ndim != 3 or stack.shape[1:] != probs.shape:
                raise ShapeError("member stack must be M x n x C matching probs")
            if np.abs(stack.mean(axis=0) - probs).max() > 1e-9:
                raise DomainError("member stack mean must equal probs within 1e-9")
            self.member_stack = stack

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


@dataclass
class MetricsReport:
    """One evaluation context; fields are None when their inputs were absent."""

    accuracy: float | None = None
    loss: float | None = None
    ece: float | None = None
    agreement: float | None = None
    variance: float | None = None
    odd_auroc: float | None = None
    mean_abs_entropy_diff: float | None = None
    mean_abs_mi_diff: float | None = None
    calibration_curve: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("accuracy", "ece", "agreement", "variance", "odd_auroc"):
            value = getattr(self, name)
            if value is not None and not (-1e-12 <= value <= 1.0 + 1e-12):
                raise DomainError(f"{name}={value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "ece": self.ece,
            "agreement": self.agreement,
            "variance": self.variance,
            "odd_auroc": self.odd_auroc,
            "mean_abs_entropy_diff": self.mean_abs_entropy_diff,
            "mean_abs_mi_diff": self.mean_abs_mi_diff,
            "calibration_curve": [list(b) for b in self.calibration_curve],
            "metadata": dict(REPORT_METADATA),
        }


def entropy_of(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 log 0 := 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def predictive_entropy(pd: PredictiveDistribution) -> np.ndarray:
    """Per-point entropy of the mean predictive: total uncertainty."""
    return entropy_of(pd.probs)


def mutual_information(pd: PredictiveDistribution) -> np.ndarray:
    """Per-point epistemic uncertainty: H[mean] minus mean member entropy.

    Needs per-member information: either the full member stack or the
    streaming ``mean_member_entropy`` statistic.  Clipped at zero to guard
    against floating-point cancellation.
    """
    if pd.member_stack is not None:
        if pd.member_stack.shape[0] < 2:
            raise ConfigError("mutual information needs at least 2 members")
        mean_member = entropy_of(pd.member_stack).mean(axis=0)
    elif pd.mean_member_entropy is not None:
        mean_member = np.asarray(pd.mean_member_entropy, dtype=np.float64)
    else:
        raise ConfigError("mutual information needs a member stack (or its entropy mean)")
    return np.maximum(entropy_of(pd.probs) - mean_member, 0.0)


def _check_pair(pd: PredictiveDistribution, reference: PredictiveDistribution):
    if pd.probs.shape != reference.probs.shape:
        raise ShapeError("predictive and reference cover different points or classes")
    if pd.points is not None and reference.points is not None:
        if pd.points.shape != reference.points.shape or not np.array_equal(
            pd.points, reference.points
        ):
            raise ShapeError("predictive and reference were evaluated at different points")


def agreement(pd: PredictiveDistribution, reference: PredictiveDistribution) -> float:
    """Fraction of points where both top-1 classes coincide (ties: lowest index)."""
    _check_pair(pd, reference)
    return float(np.mean(pd.probs.argmax(axis=1) == reference.probs.argmax(axis=1)))


def predictive_variance(pd: PredictiveDistribution, reference: PredictiveDistribution) -> float:
    """Mean total-variation distance between predictive rows, in [0, 1]."""
    _check_pair(pd, reference)
    return float(0.5 * np.abs(pd.probs - reference.probs).sum(axis=1).mean())


def ece(
    pd: PredictiveDistribution, labels: np.ndarray, n_bins: int = 15
) -> tuple[float, list[tuple[float, float, int]]]:
    """Expected calibration error over equal-width top-1 confidence bins.

    Returns the scalar gap and the reliability curve as
    (bin_confidence, bin_accuracy, bin_count) triples; empty bins report
    zeros with a zero count.
    """
    if n_bins < 1:
        raise ConfigError(f"need at least one bin, got {n_bins}")
    labels = np.asarray(labels)
    if labels.shape != (pd.n,):
        raise ShapeError("need one label per predictive row")
    if labels.min() < 0 or labels.max() >= pd.n_classes:
        raise DomainError(f"labels must lie in [0, {pd.n_classes})")
    confidence = pd.probs.max(axis=1)
    correct = pd.probs.argmax(axis=1) == labels
    bins = np.minimum((confidence * n_bins).astype(int), n_bins - 1)

    curve = []
    total_gap = 0.0
    for b in range(n_bins):
        members = bins == b
        count = int(members.sum())
        if count == 0:
            curve.append((0.0, 0.0, 0))
            continue
        conf = float(confidence[members].mean())
        acc = float(correct[members].mean())
        curve.append((conf, acc, count))
        total_gap += count / pd.n * abs(acc - conf)
    return total_gap, curve


def odd_auroc(entropy_in: np.ndarray, entropy_out: np.ndarray) -> float:
    """AUROC of an uncertainty score separating out-of-domain points.

    Out-of-domain is the positive class; computed from midranks, so ties
    contribute half, and any strictly monotone transform of the scores
    leaves the value unchanged.
    """
    entropy_in = np.asarray(entropy_in, dtype=np.float64)
    entropy_out = np.asarray(entropy_out, dtype=np.float64)
    if entropy_in.size == 0 or entropy_out.size == 0:
        raise ShapeError("both score arrays must be nonempty")
    ranks = rankdata(np.concatenate([entropy_out, entropy_in]), method="average")
    n_out, n_in = entropy_out.size, entropy_in.size
    rank_sum = ranks[:n_out].sum()
    return float((rank_sum - n_out * (n_out + 1) / 2.0) / (n_out * n_in))


def mean_abs_diff(map_a: np.ndarray, map_b: np.ndarray) -> float:
    """Mean absolute difference between two per-point maps."""
    a = np.asarray(map_a, dtype=np.float64)
    b = np.asarray(map_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"maps of shapes {a.shape} and {b.shape} do not align")
    return float(np.abs(a - b).mean())


def _has_member_info(pd: PredictiveDistribution) -> bool:
    return pd.member_stack is not None or pd.mean_member_entropy is not None


def evaluate(
    pd: PredictiveDistribution,
    labels: np.ndarray | None = None,
    reference: PredictiveDistribution | None = None,
    entropy_out: np.ndarray | None = None,
    n_bins: int = 15,
) -> MetricsReport:
    """Fill a metrics report from whatever inputs are available.

    ``labels`` unlock accuracy, mean test NLL, and calibration; ``reference``
    unlocks agreement, variance, and the entropy / mutual-information
    difference maps; ``entropy_out`` (scores of a matching out-of-domain
    evaluation) unlocks out-of-domain detection with this predictive's own
    entropy as the in-domain score.
    """
    report = {}
    curve = []
    if labels is not None:
        labels = np.asarray(labels)
        preds = pd.probs.argmax(axis=1)
        report["accuracy"] = float(np.mean(preds == labels))
        picked = pd.probs[np.arange(pd.n), labels]
        report["loss"] = float(-np.log(np.maximum(picked, 1e-300)).mean())
        report["ece"], curve = ece(pd, labels, n_bins=n_bins)
    if reference is not None:
        report["agreement"] = agreement(pd, reference)
        report["variance"] = predictive_variance(pd, reference)
        report["mean_abs_entropy_diff"] = mean_abs_diff(
            predictive_entropy(pd), predictive_entropy(reference)
        )
        if _has_member_info(pd) and _has_member_info(reference):
            report["mean_abs_mi_diff"] = mean_abs_diff(
                mutual_information(pd), mutual_information(reference)
            )
    if entropy_out is not None:
        report["odd_auroc"] = odd_auroc(predictive_entropy(pd), entropy_out)
    return MetricsReport(calibration_curve=curve, **report)
