"""Ground-truth posterior sampling with the No-U-Turn sampler.

A self-contained NUTS implementation over the network potential: leapfrog
integration with an identity mass matrix, multinomial selection within the
doubled trajectory tree, dual-averaging step-size adaptation during warmup,
and a fixed energy-error divergence threshold.  Multiple independent chains
are stacked into one posterior sample store, with split-Rhat convergence
diagnostics per parameter coordinate.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ArtifactError, ConfigError, SamplerError, ShapeError
from .net import (
    Dataset,
    MLPArch,
    PriorSpec,
    grad_nll_sum_raw,
    nll_sum_raw,
    potential_and_grad_raw,
    read_param_rows,
    write_param_rows,
)
from .parallel import parallel_map
from .rng import derive_rng

__all__ = [
    "HMCConfig",
    "PosteriorSamples",
    "leapfrog",
    "nuts_chain",
    "run_hmc",
    "rhat",
    "save_posterior",
    "load_posterior",
]

DIVERGENCE_THRESHOLD = 1000.0

# Dual-averaging constants (shrinkage gamma, iteration offset t0, decay kappa).
DA_GAMMA = 0.05
DA_T0 = 10.0
DA_KAPPA = 0.75


@dataclass(frozen=True)
class HMCConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_samples: int = 2000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_chains, self.n_warmup, self.n_samples, self.max_tree_depth) < 1:
            raise ConfigError("chain, warmup, sample, and tree-depth counts must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError(f"target_accept must be in (0, 1), got {self.target_accept}")
        if not self.init_scale > 0:
            raise ConfigError(f"init_scale must be positive, got {self.init_scale}")

    def to_dict(self) -> dict:
        return {
            "n_chains": self.n_chains,
            "n_warmup": self.n_warmup,
            "n_samples": self.n_samples,
            "target_accept": self.target_accept,
            "max_tree_depth": self.max_tree_depth,
            "init_scale": self.init_scale,
            "seed": self.seed,
        }


@dataclass
class PosteriorSamples:
    """Stacked posterior draws with their provenance."""

    samples: np.ndarray
    arch: MLPArch | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if samples.shape[0] < 1:
            raise ShapeError("posterior store must hold at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ShapeError("posterior samples contain non-finite values")
        if self.arch is not None and samples.shape[1] != self.arch.n_params:
            raise ShapeError("sample width does not match the architecture")
        self.samples = samples

    @property
    def n(self) -> int:
        return self.samples.shape[0]


def leapfrog(theta: np.ndarray, momentum: np.ndarray, epsilon: float, grad) -> tuple:
    """One symplectic step (half-kick, drift, half-kick), identity mass.

    ``grad`` maps a position to the gradient of the potential energy.
    """
    r = momentum - 0.5 * epsilon * grad(theta)
    theta_new = theta + epsilon * r
    r = r - 0.5 * epsilon * grad(theta_new)
    return theta_new, r


class _Tree:
    __slots__ = (
        "theta_minus", "r_minus", "grad_minus",
        "theta_plus", "r_plus", "grad_plus",
        "theta", "grad", "u", "log_sum_w",
        "alpha_sum", "n_alpha", "divergent", "turned",
    )


def _leaf(theta, r, grad_theta, target, epsilon, h0):
    """One leapfrog step wrapped as a depth-0 tree."""
    r_half = r - 0.5 * epsilon * grad_theta
    theta_new = theta + epsilon * r_half
    u_new, grad_new = target(theta_new)
    r_new = r_half - 0.5 * epsilon * grad_new
    h_new = u_new + 0.5 * float(r_new @ r_new)

    t = _Tree()
    t.theta_minus = t.theta_plus = t.theta = theta_new
    t.r_minus = t.r_plus = r_new
    t.grad_minus = t.grad_plus = t.grad = grad_new
    t.u = u_new
    delta_h = h_new - h0
    if math.isfinite(delta_h):
        t.log_sum_w = -delta_h
        t.alpha_sum = min(1.0, math.exp(min(-delta_h, 0.0)))
        t.divergent = delta_h > DIVERGENCE_THRESHOLD
    else:
        t.log_sum_w = -math.inf
        t.alpha_sum = 0.0
        t.divergent = True
    t.n_alpha = 1
    t.turned = False
    return t


def _uturn(theta_minus, theta_plus, r_minus, r_plus) -> bool:
    span = theta_plus - theta_minus
    return float(span @ r_minus) < 0.0 or float(span @ r_plus) < 0.0


def _build_tree(tree, v, depth, target, epsilon, h0, rng):
    """Double away from one end of ``tree``; returns the new subtree."""
    if v == 1:
        theta, r, g = tree.theta_plus, tree.r_plus, tree.grad_plus
    else:
        theta, r, g = tree.theta_minus, tree.r_minus, tree.grad_minus

    if depth == 0:
        return _leaf(theta, r, g, target, v * epsilon, h0)

    first = _build_tree(tree, v, depth - 1, target, epsilon, h0, rng)
    if first.divergent or first.turned:
        return first
    second = _build_tree(first, v, depth - 1, target, epsilon, h0, rng)

    log_sum = np.logaddexp(first.log_sum_w, second.log_sum_w)
    if second.log_sum_w > -math.inf and math.log(rng.random()) < second.log_sum_w - log_sum:
        first.theta, first.grad, first.u = second.theta, second.grad, second.u
    first.log_sum_w = log_sum
    first.alpha_sum += second.alpha_sum
    first.n_alpha += second.n_alpha
    first.divergent = second.divergent
    if v == 1:
        first.theta_plus, first.r_plus = second.theta_plus, second.r_plus
        first.grad_plus = second.grad_plus
    else:
        first.theta_minus, first.r_minus = second.theta_minus, second.r_minus
        first.grad_minus = second.grad_minus
    first.turned = second.turned or _uturn(
        first.theta_minus, first.theta_plus, first.r_minus, first.r_plus
    )
    return first


def _find_reasonable_epsilon(theta, target, rng) -> float:
    """Doubling heuristic: bracket the step size where acceptance crosses 1/2."""
    epsilon = 1.0
    r = rng.standard_normal(theta.shape[0])
    u0, grad0 = target(theta)
    h0 = u0 + 0.5 * float(r @ r)

    def log_accept(eps):
        r_half = r - 0.5 * eps * grad0
        theta_new = theta + eps * r_half
        u_new, grad_new = target(theta_new)
        r_new = r_half - 0.5 * eps * grad_new
        h_new = u_new + 0.5 * float(r_new @ r_new)
        return h0 - h_new if math.isfinite(h_new) else -math.inf

    direction = 1.0 if log_accept(epsilon) > math.log(0.5) else -1.0
    for _ in range(100):
        if direction * log_accept(epsilon) <= -direction * math.log(2.0):
            break
        epsilon *= 2.0**direction
        if not 1e-12 < epsilon < 1e6:
            break
    return epsilon


def nuts_chain(
    potential,
    grad,
    dim: int,
    config: HMCConfig,
    chain_id: int = 0,
    theta0: np.ndarray | None = None,
    potential_and_grad=None,
) -> tuple[np.ndarray, dict]:
    """Run one NUTS chain; returns (post-warmup samples, chain statistics).

    The step size is adapted by dual averaging toward ``target_accept``
    during warmup and then frozen.  Tree doubling stops at the no-U-turn
    criterion or ``max_tree_depth``; leaves whose energy error exceeds
    the divergence threshold terminate the trajectory and are counted.
    ``potential_and_grad``, when given, evaluates both in one pass and
    replaces the separate callbacks on the hot path.
    """
    if potential_and_grad is not None:
        target = potential_and_grad
    else:
        def target(theta):
            return potential(theta), grad(theta)

    rng = derive_rng(config.seed, "hmc-chain", chain_id)
    if theta0 is None:
        theta0 = config.init_scale * rng.standard_normal(dim)
    theta = np.asarray(theta0, dtype=np.float64)

    epsilon = _find_reasonable_epsilon(theta, target, rng)
    mu = math.log(10.0 * epsilon)
    log_eps_bar, h_bar = 0.0, 0.0

    n_iter = config.n_warmup + config.n_samples
    samples = np.empty((config.n_samples, dim))
    u_theta, grad_theta = target(theta)
    divergences = 0
    warmup_divergences = 0
    accept_sum = 0.0
    depth_sum = 0

    for m in range(1, n_iter + 1):
        r0 = rng.standard_normal(dim)
        h0 = u_theta + 0.5 * float(r0 @ r0)

        tree = _Tree()
        tree.theta_minus = tree.theta_plus = tree.theta = theta
        tree.r_minus = tree.r_plus = r0
        tree.grad_minus = tree.grad_plus = tree.grad = grad_theta
        tree.u = u_theta
        tree.log_sum_w = 0.0
        tree.alpha_sum, tree.n_alpha = 0.0, 0
        tree.divergent = tree.turned = False

        alpha_sum, n_alpha = 0.0, 0
        diverged = False
        depth = 0
        while depth < config.max_tree_depth:
            v = 1 if rng.random() < 0.5 else -1
            subtree = _build_tree(tree, v, depth, target, epsilon, h0, rng)
            alpha_sum += subtree.alpha_sum
            n_alpha += subtree.n_alpha
            if subtree.divergent:
                diverged = True
                break
            if not subtree.turned:
                log_ratio = subtree.log_sum_w - tree.log_sum_w
                if log_ratio >= 0.0 or math.log(rng.random()) < log_ratio:
                    tree.theta, tree.grad, tree.u = subtree.theta, subtree.grad, subtree.u
            tree.log_sum_w = np.logaddexp(tree.log_sum_w, subtree.log_sum_w)
            if v == 1:
                tree.theta_plus, tree.r_plus = subtree.theta_plus, subtree.r_plus
                tree.grad_plus = subtree.grad_plus
            else:
                tree.theta_minus, tree.r_minus = subtree.theta_minus, subtree.r_minus
                tree.grad_minus = subtree.grad_minus
            if subtree.turned or _uturn(
                tree.theta_minus, tree.theta_plus, tree.r_minus, tree.r_plus
            ):
                break
            depth += 1

        theta, grad_theta, u_theta = tree.theta, tree.grad, tree.u
        accept_stat = alpha_sum / max(n_alpha, 1)

        if m <= config.n_warmup:
            if diverged:
                warmup_divergences += 1
            eta = 1.0 / (m + DA_T0)
            h_bar = (1.0 - eta) * h_bar + eta * (config.target_accept - accept_stat)
            log_eps = mu - math.sqrt(m) / DA_GAMMA * h_bar
            weight = m**-DA_KAPPA
            log_eps_bar = weight * log_eps + (1.0 - weight) * log_eps_bar
            epsilon = math.exp(log_eps)
            if m == config.n_warmup:
                epsilon = math.exp(log_eps_bar)
                if warmup_divergences == config.n_warmup:
                    raise SamplerError(
                        f"chain {chain_id}: every warmup iteration diverged "
                        f"(final step size {epsilon:.3e})"
                    )
        else:
            if diverged:
                divergences += 1
            accept_sum += accept_stat
            depth_sum += depth
            samples[m - config.n_warmup - 1] = theta

    stats = {
        "chain_id": chain_id,
        "step_size": epsilon,
        "mean_accept": accept_sum / config.n_samples,
        "divergences": divergences,
        "warmup_divergences": warmup_divergences,
        "mean_tree_depth": depth_sum / config.n_samples,
    }
    return samples, stats


def _posterior_closures(arch: MLPArch, data: Dataset, prior: PriorSpec):
    x = data.points
    labels = data.labels
    lam = prior.lam

    def potential(theta):
        if not np.all(np.isfinite(theta)):
            return math.inf
        with np.errstate(over="ignore", invalid="ignore"):
            u = nll_sum_raw(arch, theta, x, labels) + 0.5 * lam * float(theta @ theta)
        return u if math.isfinite(u) else math.inf

    def grad(theta):
        if not np.all(np.isfinite(theta)):
            return np.zeros_like(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            g = grad_nll_sum_raw(arch, theta, x, labels) + lam * theta
        return np.where(np.isfinite(g), g, 0.0)

    def target(theta):
        if not np.all(np.isfinite(theta)):
            return math.inf, np.zeros_like(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            u, g = potential_and_grad_raw(arch, theta, x, labels, lam)
        if not math.isfinite(u):
            return math.inf, np.zeros_like(theta)
        return u, np.where(np.isfinite(g), g, 0.0)

    return potential, grad, target


def _chain_worker(args):
    widths, points, labels, n_classes, lam, config_dict, chain_id = args
    arch = MLPArch(widths)
    data = Dataset(points, labels, n_classes=n_classes)
    potential, grad, target = _posterior_closures(arch, data, PriorSpec(lam))
    config = HMCConfig(**config_dict)
    samples, stats = nuts_chain(
        potential, grad, arch.n_params, config, chain_id, potential_and_grad=target
    )
    return samples, stats


def run_hmc(
    data: Dataset,
    prior: PriorSpec,
    config: HMCConfig,
    arch: MLPArch = MLPArch(),
    jobs: int = 1,
) -> PosteriorSamples:
    """Sample the network posterior with independent stacked NUTS chains.

    Chains use seeds derived from ``(config.seed, chain_id)`` and Gaussian
    starting points of scale ``init_scale``; results are concatenated in
    chain order so the store is independent of scheduling.  Any chain
    failure aborts the run rather than returning partial results.
    """
    tasks = [
        (arch.layer_widths, data.points, data.labels, data.n_classes,
         prior.lam, config.to_dict(), cid)
        for cid in range(config.n_chains)
    ]
    results = parallel_map(_chain_worker, tasks, jobs)
    chain_samples = [samples for samples, _ in results]
    chain_stats = [stats for _, stats in results]

    stacked = np.concatenate(chain_samples, axis=0)
    diagnostics = {}
    if config.n_chains >= 2 and config.n_samples >= 4:
        values = rhat(np.stack(chain_samples))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            diagnostics["max_rhat"] = float(np.nanmax(values))
    provenance = {
        "method": "hmc-nuts",
        "variant": "multinomial tree selection, identity mass, dual averaging",
        "config": config.to_dict(),
        "arch": list(arch.layer_widths),
        "prior_lambda": prior.lam,
        "chains": chain_stats,
        **diagnostics,
    }
    return PosteriorSamples(stacked, arch=arch, provenance=provenance)


def save_posterior(dirpath, posterior: PosteriorSamples) -> None:
    """Write ``meta.json`` + ``samples.bin`` (header line, then float64 rows)."""
    if posterior.arch is None:
        raise ConfigError("posterior store needs an architecture for the row header")
    os.makedirs(dirpath, exist_ok=True)
    write_param_rows(os.path.join(dirpath, "samples.bin"), posterior.arch, posterior.samples)
    meta = dict(posterior.provenance)
    meta["n_samples_total"] = posterior.n
    with open(os.path.join(dirpath, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_posterior(dirpath) -> PosteriorSamples:
    meta_path = os.path.join(dirpath, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing posterior metadata: {meta_path}") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt posterior metadata: {meta_path}") from exc
    arch, rows = read_param_rows(os.path.join(dirpath, "samples.bin"))
    if meta.get("n_samples_total") not in (None, rows.shape[0]):
        raise ArtifactError(f"{dirpath}: metadata and sample rows disagree on count")
    return PosteriorSamples(rows, arch=arch, provenance=meta)


def rhat(chains) -> np.ndarray:
    """Split potential-scale-reduction factor per parameter coordinate.

    ``chains`` is (n_chains, n_samples, dim) or a list of equal-shape sample
    arrays.  Each chain is split in half, so mixing failures within a single
    chain are also visible.  Coordinates with zero within-chain variance
    come back as NaN with a warning.
    """
    stack = np.stack([np.atleast_2d(c) for c in chains])
    if stack.ndim == 2:
        raise ShapeError("need per-chain sample arrays, got a single matrix")
    m, n = stack.shape[0], stack.shape[1]
    if m < 2 or n < 4:
        raise ConfigError("split-Rhat needs >= 2 chains with >= 4 samples each")
    half = n // 2
    halves = np.concatenate([stack[:, :half], stack[:, half : 2 * half]], axis=0)

    within = halves.var(axis=1, ddof=1).mean(axis=0)
    chain_means = halves.mean(axis=1)
    between = half * chain_means.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        var_plus = (half - 1) / half * within + between / half
        values = np.sqrt(var_plus / within)
    if np.any(within == 0.0):
        warnings.warn("zero within-chain variance; Rhat undefined for some coordinates")
        values = np.where(within == 0.0, np.nan, values)
    return values
