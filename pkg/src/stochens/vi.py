"""Variational losses for ensemble posterior families.

An ensemble of K parameter sets, each blurred by an isotropic Gaussian of
variance ``sigma2``, defines a mixture family over network parameters.
Stochastic mechanisms (dropout, DropConnect, parameter exchange) refine each
member into a per-group two-component mixture, giving K * 2^G components in
total for G stochastic groups.

This module evaluates the KL divergence of such families against an
isotropic Gaussian prior as a sum of named terms: a dimension constant, a
(probability-weighted) L2 term, an ensembling reduction ``-log K``, a
stochasticity reduction ``sum_g sum_i p_i log p_i``, and a nonnegative
overlap correction that penalizes coinciding mixture components.  The
overlap correction has no elementary closed form; we evaluate a pairwise
upper bound built from Gaussian overlap integrals,

    bound = sum_{j != j'} sqrt(w_j w_j') exp(-||mu_j - mu_j'||^2 / (8 sigma2)),

exactly when components can be enumerated and by importance-weighted Monte
Carlo otherwise.  For uniform weights this reduces to the familiar
(1/K) sum_{k != k'} exp(-||w_k - w_k'||^2 / (8 sigma2)) form.

Everything here is validated against :func:`mc_kl_oracle`, a direct Monte
Carlo estimator of KL(q || p) that shares no code path with the closed-form
terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError
from .masks import (
    StochasticKind,
    StochasticSpec,
    apply_np_selection,
    sample_masks,
    stochastic_groups,
)
from .net import Dataset, MLPArch, ParamVector, PriorSpec, nll

__all__ = [
    "EnsembleFamilySpec",
    "KLBreakdown",
    "enll",
    "kl_deep_ensemble",
    "rf_upper_bound",
    "kl_stochastic_ensemble",
    "rf2_mc_bound",
    "mc_kl_oracle",
    "rf_exact_mc",
    "enumerate_stochastic_mixture",
    "l2_coordinate_weights",
    "effective_l2",
    "training_loss",
]

ENUMERATION_LIMIT = 4096


@dataclass(frozen=True)
class EnsembleFamilySpec:
    """Mixture family: K members, component variance, stochastic mechanism."""

    members: tuple[ParamVector, ...]
    sigma2: float
    stochastic: StochasticSpec
    prior: PriorSpec
    members_b: tuple[ParamVector, ...] | None = None

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) < 1:
            raise ConfigError("ensemble needs at least one member")
        arch = members[0].arch
        if any(m.arch != arch for m in members):
            raise ConfigError("ensemble members must share one architecture")
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ConfigError(f"component variance must be positive, got {self.sigma2}")
        object.__setattr__(self, "members", members)
        if self.stochastic.kind is StochasticKind.NP_EXCHANGE:
            if self.members_b is None or len(self.members_b) != len(members):
                raise ConfigError("parameter exchange needs one second set per member")
            members_b = tuple(self.members_b)
            if any(m.arch != arch for m in members_b):
                raise ConfigError("second parameter sets must share the architecture")
            object.__setattr__(self, "members_b", members_b)
        elif self.members_b is not None:
            raise ConfigError("second parameter sets only apply to parameter exchange")

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def arch(self) -> MLPArch:
        return self.members[0].arch


@dataclass(frozen=True)
class KLBreakdown:
    """Named terms of the ensemble-vs-prior KL divergence.

    ``total_upper_bound`` is the sum of the other five terms; it upper-bounds
    the true KL because ``rf_bound`` upper-bounds the exact overlap
    correction.
    """

    constant_term: float
    l2_term: float
    log_k_term: float
    stochastic_entropy_term: float
    rf_bound: float
    total_upper_bound: float

    def __post_init__(self):
        if self.rf_bound < 0:
            raise DomainError(f"overlap bound must be nonnegative, got {self.rf_bound}")
        if self.stochastic_entropy_term > 1e-12 or self.log_k_term > 1e-12:
            raise DomainError("reduction terms must be nonpositive")
        expected = (
            self.constant_term
            + self.l2_term
            + self.log_k_term
            + self.stochastic_entropy_term
            + self.rf_bound
        )
        if not math.isclose(self.total_upper_bound, expected, rel_tol=1e-12, abs_tol=1e-12):
            raise DomainError("total_upper_bound must equal the sum of its terms")

    def to_dict(self) -> dict:
        return {
            "constant_term": self.constant_term,
            "l2_term": self.l2_term,
            "log_k_term": self.log_k_term,
            "stochastic_entropy_term": self.stochastic_entropy_term,
            "rf_bound": self.rf_bound,
            "total_upper_bound": self.total_upper_bound,
        }


def _breakdown(constant, l2, log_k, entropy, rf) -> KLBreakdown:
    return KLBreakdown(
        constant_term=constant,
        l2_term=l2,
        log_k_term=log_k,
        stochastic_entropy_term=entropy,
        rf_bound=rf,
        total_upper_bound=constant + l2 + log_k + entropy + rf,
    )


def _constant_term(dim: int, lam: float, sigma2: float) -> float:
    return 0.5 * dim * (lam * sigma2 - math.log(sigma2) - 1.0 - math.log(lam))


def enll(
    ensemble: EnsembleFamilySpec,
    data: Dataset,
    passes_per_member: int = 1,
    rng: np.random.Generator | None = None,
    reduction: str = "sum",
) -> float:
    """Monte Carlo expected negative log-likelihood of the family.

    Averages the (masked) NLL over ``passes_per_member`` fresh mask draws
    for each member, then over members with equal 1/K weights.  The
    non-stochastic kind is deterministic and needs a single pass.
    """
    if passes_per_member < 1:
        raise ConfigError("passes_per_member must be >= 1")
    spec = ensemble.stochastic
    if spec.kind is not StochasticKind.NONE and rng is None:
        raise ConfigError("stochastic kinds need an rng for mask sampling")
    total = 0.0
    for k, member in enumerate(ensemble.members):
        if spec.kind is StochasticKind.NONE:
            total += nll(member, data, reduction=reduction)
            continue
        acc = 0.0
        for _ in range(passes_per_member):
            if spec.kind is StochasticKind.NP_EXCHANGE:
                selector = sample_masks(spec, member.arch, rng)
                effective = apply_np_selection(member, ensemble.members_b[k], selector)
                acc += nll(effective, data, reduction=reduction)
            else:
                masks = sample_masks(spec, member.arch, rng)
                acc += nll(member, data, masks=masks, reduction=reduction)
        total += acc / passes_per_member
    return total / ensemble.k


def rf_upper_bound(members, sigma2: float) -> float:
    """Pairwise Gaussian-overlap bound on the ensemble overlap correction.

    Exact evaluation of ``(1/K) sum_k sum_{k' != k}
    exp(-||w_k - w_k'||^2 / (8 sigma2))``; zero for a single member.
    """
    stack = np.stack([m.values if isinstance(m, ParamVector) else np.asarray(m) for m in members])
    k = stack.shape[0]
    if k == 1:
        return 0.0
    sq = ((stack[:, None, :] - stack[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(under="ignore"):
        overlaps = np.exp(-sq / (8.0 * sigma2))
    np.fill_diagonal(overlaps, 0.0)
    return float(overlaps.sum() / k)


def kl_deep_ensemble(ensemble: EnsembleFamilySpec) -> KLBreakdown:
    """Closed-form KL terms for a non-stochastic ensemble family."""
    if ensemble.stochastic.kind is not StochasticKind.NONE:
        raise ConfigError("deep-ensemble KL applies to the non-stochastic kind only")
    lam, sigma2 = ensemble.prior.lam, ensemble.sigma2
    dim = ensemble.arch.n_params
    l2 = 0.5 * lam * sum(float(m.values @ m.values) for m in ensemble.members) / ensemble.k
    return _breakdown(
        constant=_constant_term(dim, lam, sigma2),
        l2=l2,
        log_k=-math.log(ensemble.k),
        entropy=0.0,
        rf=rf_upper_bound(ensemble.members, sigma2),
    )


def l2_coordinate_weights(spec: StochasticSpec, arch: MLPArch) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate probability weights for the L2 term.

    Returns ``(c, d)``: coordinate ``j`` of the primary set enters the L2
    term with weight ``c_j`` (1 for deterministic coordinates, keep/selection
    probability inside stochastic groups) and coordinate ``j`` of the second
    set with weight ``d_j`` (nonzero only for parameter exchange).
    """
    dim = arch.n_params
    c = np.ones(dim)
    d = np.zeros(dim)
    for idx, p_first in stochastic_groups(spec, arch):
        c[idx] = p_first
        if spec.kind is StochasticKind.NP_EXCHANGE:
            d[idx] = 1.0 - p_first
    return c, d


def effective_l2(
    member: ParamVector, member_b: ParamVector | None, spec: StochasticSpec, arch: MLPArch
) -> float:
    """Probability-weighted squared norm of one member's parameters."""
    c, d = l2_coordinate_weights(spec, arch)
    total = float(c @ (member.values**2))
    if member_b is not None:
        total += float(d @ (member_b.values**2))
    return total


def _entropy_reduction(spec: StochasticSpec, arch: MLPArch) -> float:
    def plogp(p):
        return p * math.log(p) if 0.0 < p < 1.0 else 0.0

    return sum(plogp(p) + plogp(1.0 - p) for _, p in stochastic_groups(spec, arch))


def enumerate_stochastic_mixture(
    ensemble: EnsembleFamilySpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Explicit (weights, means) of every mixture component of the family.

    Walks all 2^G realizations of the G stochastic groups for each member.
    Zero-probability realizations are dropped.  Intended for oracle-scale
    problems; refuses to enumerate more than a few thousand components.
    """
    spec = ensemble.stochastic
    groups = stochastic_groups(spec, ensemble.arch)
    n_components = ensemble.k * (2 ** len(groups))
    if n_components > ENUMERATION_LIMIT:
        raise ConfigError(
            f"{n_components} mixture components exceed the enumeration limit"
        )
    weights, means = [], []
    for k, member in enumerate(ensemble.members):
        base = member.values
        second = (
            ensemble.members_b[k].values
            if spec.kind is StochasticKind.NP_EXCHANGE
            else np.zeros_like(base)
        )
        for bits in range(2 ** len(groups)):
            w = 1.0 / ensemble.k
            mean = base.copy()
            for g, (idx, p_first) in enumerate(groups):
                if bits >> g & 1:
                    w *= p_first
                else:
                    w *= 1.0 - p_first
                    mean[idx] = second[idx]
            if w > 0.0:
                weights.append(w)
                means.append(mean)
    return np.asarray(weights), np.asarray(means)


def _pairwise_overlap_bound(weights: np.ndarray, means: np.ndarray, sigma2: float) -> float:
    sq = ((means[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(under="ignore"):
        overlaps = np.sqrt(np.outer(weights, weights)) * np.exp(-sq / (8.0 * sigma2))
    np.fill_diagonal(overlaps, 0.0)
    return float(overlaps.sum())


def rf2_mc_bound(
    ensemble: EnsembleFamilySpec,
    rng: np.random.Generator,
    n_samples: int = 100_000,
) -> tuple[float, float]:
    """Monte Carlo estimate of the probability-weighted overlap bound.

    Draws pairs of stochastic realizations from the family and importance-
    weights their Gaussian overlap, estimating the same pairwise sum that
    :func:`enumerate_stochastic_mixture` + exact evaluation would give.
    Returns (estimate, standard error).  Collapses to zero as ``sigma2``
    shrinks to machine precision.
    """
    if n_samples < 2:
        raise ConfigError("need at least 2 samples for a standard error")
    spec = ensemble.stochastic
    groups = stochastic_groups(spec, ensemble.arch)
    k = ensemble.k
    primary = np.stack([m.values for m in ensemble.members])
    if spec.kind is StochasticKind.NP_EXCHANGE:
        second = np.stack([m.values for m in ensemble.members_b])
    else:
        second = np.zeros_like(primary)

    p_first = np.array([p for _, p in groups])
    log_k = math.log(k)

    def draw(count):
        ks = rng.integers(0, k, size=count)
        bits = rng.random((count, len(groups))) < p_first
        means = primary[ks].copy()
        for g, (idx, _) in enumerate(groups):
            drop = ~bits[:, g]
            if drop.any():
                means[np.ix_(drop, idx)] = second[ks[drop]][:, idx]
        with np.errstate(divide="ignore"):
            log_w = (
                -log_k
                + np.where(bits, np.log(p_first), np.log1p(-p_first)).sum(axis=1)
            )
        return ks, bits, means, log_w

    ks1, bits1, means1, logw1 = draw(n_samples)
    ks2, bits2, means2, logw2 = draw(n_samples)
    same = (ks1 == ks2) & (bits1 == bits2).all(axis=1)
    sq = ((means1 - means2) ** 2).sum(axis=1)
    with np.errstate(under="ignore", over="ignore"):
        vals = np.exp(-sq / (8.0 * ensemble.sigma2) - 0.5 * (logw1 + logw2))
    vals[same] = 0.0
    if not np.all(np.isfinite(vals)):
        raise DomainError("overlap estimator overflowed; component weights too extreme")
    estimate = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(n_samples))
    return estimate, stderr


def kl_stochastic_ensemble(
    ensemble: EnsembleFamilySpec,
    rng: np.random.Generator | None = None,
    rf_samples: int = 100_000,
) -> KLBreakdown:
    """KL terms for a stochastic ensemble family.

    The overlap bound is evaluated by exact component enumeration when the
    family is small enough, otherwise by :func:`rf2_mc_bound` (which then
    requires ``rng``).
    """
    spec = ensemble.stochastic
    if spec.kind is StochasticKind.NONE:
        raise ConfigError("use kl_deep_ensemble for the non-stochastic kind")
    lam, sigma2 = ensemble.prior.lam, ensemble.sigma2
    arch = ensemble.arch
    dim = arch.n_params
    l2 = 0.0
    for k, member in enumerate(ensemble.members):
        member_b = ensemble.members_b[k] if ensemble.members_b is not None else None
        l2 += effective_l2(member, member_b, spec, arch)
    l2 *= 0.5 * lam / ensemble.k

    groups = stochastic_groups(spec, arch)
    n_components = ensemble.k * (2 ** len(groups))
    if n_components <= ENUMERATION_LIMIT:
        weights, means = enumerate_stochastic_mixture(ensemble)
        rf = _pairwise_overlap_bound(weights, means, sigma2)
    else:
        if rng is None:
            raise ConfigError("family too large to enumerate; provide an rng for MC")
        rf, _ = rf2_mc_bound(ensemble, rng, rf_samples)

    return _breakdown(
        constant=_constant_term(dim, lam, sigma2),
        l2=l2,
        log_k=-math.log(ensemble.k),
        entropy=_entropy_reduction(spec, arch),
        rf=max(rf, 0.0),
    )


def _check_mixture(weights, means, sigma2):
    weights = np.asarray(weights, dtype=np.float64)
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if weights.ndim != 1 or weights.shape[0] != means.shape[0]:
        raise ConfigError("need one weight per mixture component")
    if not math.isclose(float(weights.sum()), 1.0, rel_tol=1e-9, abs_tol=1e-9):
        raise ConfigError(f"mixture weights sum to {weights.sum()}, expected 1")
    if np.any(weights < 0):
        raise ConfigError("mixture weights must be nonnegative")
    if not (sigma2 > 0 and np.isfinite(sigma2)):
        raise DomainError(f"component variance must be positive, got {sigma2}")
    if means.shape[1] > 16:
        raise ConfigError("oracle is restricted to dimension <= 16")
    return weights, means


def _log_mixture_pdf(theta, weights, means, sigma2):
    dim = means.shape[1]
    log_norm = -0.5 * dim * math.log(2.0 * math.pi * sigma2)
    sq = ((theta[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(divide="ignore"):
        comp = np.log(weights)[None, :] + log_norm - sq / (2.0 * sigma2)
    return logsumexp(comp, axis=1)


def _sample_mixture(weights, means, sigma2, count, rng):
    comp = rng.choice(weights.shape[0], size=count, p=weights)
    eps = rng.standard_normal((count, means.shape[1]))
    return means[comp] + math.sqrt(sigma2) * eps


def mc_kl_oracle(
    weights,
    means,
    sigma2: float,
    prior: PriorSpec,
    n_samples: int,
    rng: np.random.Generator,
    batch: int = 500_000,
) -> tuple[float, float]:
    """Direct Monte Carlo estimate of KL(mixture || isotropic prior).

    Samples the mixture and averages ``log q - log p``.  Returns
    (estimate, standard error).  Independent of every closed-form code path,
    so it serves as the validation oracle for the KL term decompositions.
    """
    weights, means = _check_mixture(weights, means, sigma2)
    if n_samples < 2:
        raise ConfigError("need at least 2 samples for a standard error")
    dim = means.shape[1]
    lam = prior.lam
    log_prior_norm = -0.5 * dim * math.log(2.0 * math.pi / lam)
    total, total_sq, seen = 0.0, 0.0, 0
    while seen < n_samples:
        count = min(batch, n_samples - seen)
        theta = _sample_mixture(weights, means, sigma2, count, rng)
        log_q = _log_mixture_pdf(theta, weights, means, sigma2)
        log_p = log_prior_norm - 0.5 * lam * (theta**2).sum(axis=1)
        vals = log_q - log_p
        if not np.all(np.isfinite(vals)):
            raise DomainError("log-density overflow in the KL oracle")
        total += float(vals.sum())
        total_sq += float((vals**2).sum())
        seen += count
    mean = total / n_samples
    var = max(total_sq / n_samples - mean**2, 0.0) * n_samples / (n_samples - 1)
    return mean, math.sqrt(var / n_samples)


def rf_exact_mc(
    weights,
    means,
    sigma2: float,
    n_samples: int,
    rng: np.random.Generator,
    batch: int = 500_000,
) -> tuple[float, float]:
    """Monte Carlo estimate of the exact overlap correction of a mixture.

    The correction is the gap between the mixture's negative entropy and its
    no-overlap value ``sum_j w_j log w_j - (dim/2)(log(2 pi sigma2) + 1)``;
    it is nonnegative and vanishes for well-separated components.  Estimated
    by sampling ``E_q[log q]`` directly, so it is an independent route to the
    quantity that :func:`rf_upper_bound` and :func:`rf2_mc_bound` bound.
    """
    weights, means = _check_mixture(weights, means, sigma2)
    if n_samples < 2:
        raise ConfigError("need at least 2 samples for a standard error")
    dim = means.shape[1]
    with np.errstate(divide="ignore"):
        log_w = np.where(weights > 0, np.log(weights), 0.0)
    offset = 0.5 * dim * (math.log(2.0 * math.pi * sigma2) + 1.0) - float(weights @ log_w)
    total, total_sq, seen = 0.0, 0.0, 0
    while seen < n_samples:
        count = min(batch, n_samples - seen)
        theta = _sample_mixture(weights, means, sigma2, count, rng)
        vals = _log_mixture_pdf(theta, weights, means, sigma2) + offset
        total += float(vals.sum())
        total_sq += float((vals**2).sum())
        seen += count
    mean = total / n_samples
    var = max(total_sq / n_samples - mean**2, 0.0) * n_samples / (n_samples - 1)
    return mean, math.sqrt(var / n_samples)


def training_loss(
    member,
    batch: Dataset,
    spec: StochasticSpec,
    prior: PriorSpec,
    k_members: int = 1,
    rng: np.random.Generator | None = None,
) -> float:
    """Per-member minibatch loss: one-pass masked mean NLL plus scaled L2.

    The L2 term is the probability-weighted squared norm divided by the
    batch size, so full-objective and minibatch gradients agree under mean
    reduction.  Terms shared by all members (the dimension constant, the
    ensembling and stochasticity reductions, the overlap correction in the
    small-variance regime) are omitted as they do not affect optimization;
    ``k_members`` is accepted for interface symmetry only.
    """
    del k_members
    if spec.kind is StochasticKind.NP_EXCHANGE:
        member_a, member_b = member
        if rng is None:
            raise ConfigError("stochastic kinds need an rng")
        selector = sample_masks(spec, member_a.arch, rng)
        effective = apply_np_selection(member_a, member_b, selector)
        data_term = nll(effective, batch, reduction="mean")
        l2 = effective_l2(member_a, member_b, spec, member_a.arch)
    elif spec.kind is StochasticKind.NONE:
        data_term = nll(member, batch, reduction="mean")
        l2 = float(member.values @ member.values)
    else:
        if rng is None:
            raise ConfigError("stochastic kinds need an rng")
        masks = sample_masks(spec, member.arch, rng)
        data_term = nll(member, batch, masks=masks, reduction="mean")
        l2 = effective_l2(member, None, spec, member.arch)
    return data_term + 0.5 * prior.lam * l2 / batch.n
