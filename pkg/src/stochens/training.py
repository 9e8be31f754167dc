"""Ensemble trainers and Monte Carlo predictive inference.

Five ensemble kinds share one training engine: plain independently-trained
members, weight-averaged members (a constant-rate averaging phase appended
to standard training), and the three stochastic kinds, whose members
resample their masks on every forward pass.  Each member minimizes the
per-member loss from :func:`stochens.vi.training_loss` (mean-reduced masked
NLL plus batch-scaled weighted L2) by minibatch gradient descent; the toy
problems default to full-batch Adam.

Prediction follows the Monte Carlo mixture rule: average the (stochastic)
softmax outputs over members and inference passes, retaining per-member
probabilities for mutual information when memory allows.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ArtifactError, ConfigError, TrainingError
from .hmc import PosteriorSamples
from .masks import (
    StochasticKind,
    StochasticSpec,
    masked_forward,
    sample_masks,
    selector_coordinate_mask,
)
from .metrics import PredictiveDistribution, entropy_of
from .net import (
    Dataset,
    MLPArch,
    ParamVector,
    PriorSpec,
    forward,
    nll_and_grad_sum_raw,
    read_param_rows,
    softmax,
    write_param_rows,
)
from .parallel import parallel_map
from .rng import derive_rng, derive_seed
from .vi import l2_coordinate_weights

__all__ = [
    "EnsembleKind",
    "SWAConfig",
    "TrainConfig",
    "EnsembleModel",
    "TrainedMember",
    "train_member",
    "train_ensemble",
    "swa_member",
    "predict",
    "default_stochastic_spec",
    "save_ensemble",
    "load_ensemble",
]


class EnsembleKind(str, enum.Enum):
    REGULAR = "regular"
    MULTISWA = "multiswa"
    SE1 = "se1"
    SE2 = "se2"
    SE3 = "se3"


_KIND_TO_STOCHASTIC = {
    EnsembleKind.REGULAR: StochasticKind.NONE,
    EnsembleKind.MULTISWA: StochasticKind.NONE,
    EnsembleKind.SE1: StochasticKind.DROPOUT,
    EnsembleKind.SE2: StochasticKind.DROPCONNECT,
    EnsembleKind.SE3: StochasticKind.NP_EXCHANGE,
}

DEFAULT_DROP_RATE = 0.1


def default_stochastic_spec(kind: EnsembleKind, drop_rate: float = DEFAULT_DROP_RATE):
    """The stochastic mechanism implied by an ensemble kind.

    Trained-ensemble defaults keep every mechanism on the hidden layers
    only: output-row exchange is supported by the mask machinery but adds
    logit-level inference noise that dominates at moderate ensemble sizes,
    so the exchange ensembles exclude it unless configured otherwise.
    """
    stochastic_kind = _KIND_TO_STOCHASTIC[EnsembleKind(kind)]
    if stochastic_kind in (StochasticKind.DROPOUT, StochasticKind.DROPCONNECT):
        return StochasticSpec(kind=stochastic_kind, drop_rates=drop_rate)
    if stochastic_kind is StochasticKind.NP_EXCHANGE:
        return StochasticSpec(kind=stochastic_kind, applies_to_output_layer=False)
    return StochasticSpec(kind=stochastic_kind)


@dataclass(frozen=True)
class SWAConfig:
    """Averaging phase: constant-rate training with periodic snapshots."""

    start_epoch: int
    snapshot_interval: int = 1
    cycle_length: int = 1
    swa_lr: float = 0.05

    def __post_init__(self):
        if self.start_epoch < 1:
            raise ConfigError("averaging must start after at least one epoch")
        if self.snapshot_interval < 1 or self.cycle_length < 1:
            raise ConfigError("snapshot_interval and cycle_length must be >= 1")
        if not self.swa_lr > 0:
            raise ConfigError(f"swa_lr must be positive, got {self.swa_lr}")

    def to_dict(self) -> dict:
        return {
            "start_epoch": self.start_epoch,
            "snapshot_interval": self.snapshot_interval,
            "cycle_length": self.cycle_length,
            "swa_lr": self.swa_lr,
        }


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-2
    schedule: str = "constant"
    epochs: int = 500
    batch_size: int | None = None
    momentum: float = 0.9
    milestones: tuple[int, ...] = ()
    decay: float = 0.1
    swa: SWAConfig | None = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "sgd-momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine", "piecewise"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.swa is not None and self.swa.start_epoch >= self.epochs:
            raise ConfigError("averaging phase must start before the last epoch")
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    def to_dict(self) -> dict:
        out = {
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "schedule": self.schedule,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "milestones": list(self.milestones),
            "decay": self.decay,
        }
        if self.swa is not None:
            out["swa"] = self.swa.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        swa = data.pop("swa", None)
        if swa is not None:
            swa = SWAConfig(**swa)
        milestones = tuple(data.pop("milestones", ()))
        return cls(swa=swa, milestones=milestones, **data)


@dataclass
class TrainedMember:
    """Final parameters of one member plus its per-epoch loss trajectory."""

    record: ParamVector | tuple[ParamVector, ParamVector]
    loss_history: np.ndarray


@dataclass
class EnsembleModel:
    """K trained members of one kind, plus the family metadata."""

    kind: EnsembleKind
    members: tuple
    stochastic: StochasticSpec
    prior: PriorSpec
    arch: MLPArch
    seed: int | None = None
    train_config: TrainConfig | None = None

    def __post_init__(self):
        self.kind = EnsembleKind(self.kind)
        members = tuple(self.members)
        if len(members) < 1:
            raise ConfigError("ensemble needs at least one member")
        paired = self.stochastic.kind is StochasticKind.NP_EXCHANGE
        for record in members:
            record_is_pair = isinstance(record, tuple)
            if record_is_pair != paired:
                raise ConfigError("member record arity does not match the stochastic kind")
            vectors = record if record_is_pair else (record,)
            if any(v.arch != self.arch for v in vectors):
                raise ConfigError("member architecture mismatch")
        self.members = members

    @property
    def k(self) -> int:
        return len(self.members)


def _schedule_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "constant":
        return cfg.learning_rate
    if cfg.schedule == "cosine":
        return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    drops = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.learning_rate * cfg.decay**drops


class _Optimizer:
    def __init__(self, cfg: TrainConfig, size: int):
        self.kind = cfg.optimizer
        self.momentum = cfg.momentum
        self.velocity = np.zeros(size)
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, vec: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self.kind == "sgd":
            return vec - lr * grad
        if self.kind == "sgd-momentum":
            self.velocity = self.momentum * self.velocity + grad
            return vec - lr * self.velocity
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad**2
        m_hat = self.m / (1.0 - 0.9**self.t)
        v_hat = self.v / (1.0 - 0.999**self.t)
        return vec - lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def _he_init(arch: MLPArch, rng: np.random.Generator) -> np.ndarray:
    chunks = []
    for (out_w, in_w), n_b in arch.layer_shapes():
        chunks.append(rng.normal(0.0, math.sqrt(2.0 / in_w), out_w * in_w))
        chunks.append(np.zeros(n_b))
    return np.concatenate(chunks)


def train_member(
    data: Dataset,
    kind: EnsembleKind,
    train_cfg: TrainConfig,
    prior: PriorSpec,
    member_seed: int,
    arch: MLPArch = MLPArch(),
    stochastic: StochasticSpec | None = None,
) -> TrainedMember:
    """Train one ensemble member to its final parameters (no early stopping).

    Stochastic kinds resample masks on every forward pass.  The run is a
    pure function of ``(data, configs, member_seed)``: repeating it yields
    bit-identical parameters.
    """
    kind = EnsembleKind(kind)
    spec = stochastic if stochastic is not None else default_stochastic_spec(kind)
    if spec.kind is not _KIND_TO_STOCHASTIC[kind]:
        raise ConfigError(f"kind {kind.value} is incompatible with {spec.kind.value} masks")
    if kind is EnsembleKind.MULTISWA and train_cfg.swa is None:
        raise ConfigError("weight-averaged training needs the swa sub-config")

    rng_init = derive_rng(member_seed, "init")
    rng_masks = derive_rng(member_seed, "masks")
    rng_batch = derive_rng(member_seed, "batches")
    paired = spec.kind is StochasticKind.NP_EXCHANGE
    if paired:
        vec = np.concatenate([_he_init(arch, rng_init), _he_init(arch, rng_init)])
    else:
        vec = _he_init(arch, rng_init)

    n = data.n
    batch_size = min(train_cfg.batch_size or n, n)
    lam = prior.lam
    l2_primary, l2_second = l2_coordinate_weights(spec, arch)
    dim = arch.n_params
    optimizer = _Optimizer(train_cfg, vec.size)

    swa_cfg = train_cfg.swa if kind is EnsembleKind.MULTISWA else None
    swa_sum = np.zeros_like(vec)
    swa_count = 0
    swa_steps = 0

    def batch_loss_and_grad(vec, xb, yb):
        # divergence shows up as a non-finite epoch loss; keep it quiet here
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            return _batch_loss_and_grad(vec, xb, yb)

    def _batch_loss_and_grad(vec, xb, yb):
        if paired:
            primary, second = vec[:dim], vec[dim:]
            selector = sample_masks(spec, arch, rng_masks)
            coord = selector_coordinate_mask(arch, selector)
            effective = coord * primary + (1.0 - coord) * second
            data_loss, g_eff = nll_and_grad_sum_raw(arch, effective, xb, yb)
            b = xb.shape[0]
            loss = (
                data_loss / b
                + 0.5 * lam * (l2_primary @ primary**2 + l2_second @ second**2) / n
            )
            g_primary = g_eff * coord / b + lam * l2_primary * primary / n
            g_second = g_eff * (1.0 - coord) / b + lam * l2_second * second / n
            return loss, np.concatenate([g_primary, g_second])
        masks = (
            sample_masks(spec, arch, rng_masks)
            if spec.kind is not StochasticKind.NONE
            else None
        )
        data_loss, g = nll_and_grad_sum_raw(arch, vec, xb, yb, masks)
        b = xb.shape[0]
        loss = data_loss / b + 0.5 * lam * (l2_primary @ vec**2) / n
        return loss, g / b + lam * l2_primary * vec / n

    loss_history = np.empty(train_cfg.epochs)
    for epoch in range(train_cfg.epochs):
        in_swa_phase = swa_cfg is not None and epoch >= swa_cfg.start_epoch
        lr = swa_cfg.swa_lr if in_swa_phase else _schedule_lr(train_cfg, epoch)
        order = rng_batch.permutation(n) if batch_size < n else np.arange(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grad = batch_loss_and_grad(vec, data.points[idx], data.labels[idx])
            epoch_loss += loss * idx.size
            vec = optimizer.step(vec, grad, lr)
            if in_swa_phase:
                swa_steps += 1
                if swa_steps % swa_cfg.snapshot_interval == 0:
                    swa_sum += vec
                    swa_count += 1
        epoch_loss /= n
        if not math.isfinite(epoch_loss):
            raise TrainingError(
                f"non-finite loss at epoch {epoch} (lr={lr:.3g}, kind={kind.value})"
            )
        loss_history[epoch] = epoch_loss

    if swa_cfg is not None:
        if swa_count == 0:
            raise ConfigError(
                "averaging phase collected no snapshots; "
                "shrink snapshot_interval or start earlier"
            )
        vec = swa_sum / swa_count

    if paired:
        record = (ParamVector(vec[:dim], arch), ParamVector(vec[dim:], arch))
    else:
        record = ParamVector(vec, arch)
    return TrainedMember(record=record, loss_history=loss_history)


def swa_member(
    data: Dataset,
    train_cfg: TrainConfig,
    prior: PriorSpec,
    seed: int,
    arch: MLPArch = MLPArch(),
) -> TrainedMember:
    """One weight-averaged member: standard phase, then snapshot averaging."""
    return train_member(data, EnsembleKind.MULTISWA, train_cfg, prior, seed, arch)


def _member_worker(args):
    (points, labels, n_classes, widths, kind, cfg_dict, lam, spec_dict, member_seed) = args
    data = Dataset(points, labels, n_classes=n_classes)
    trained = train_member(
        data,
        EnsembleKind(kind),
        TrainConfig.from_dict(cfg_dict),
        PriorSpec(lam),
        member_seed,
        arch=MLPArch(widths),
        stochastic=StochasticSpec.from_dict(spec_dict),
    )
    if isinstance(trained.record, tuple):
        return (trained.record[0].values, trained.record[1].values), trained.loss_history
    return trained.record.values, trained.loss_history


def train_ensemble(
    data: Dataset,
    kind: EnsembleKind,
    n_members: int,
    train_cfg: TrainConfig,
    prior: PriorSpec,
    seed: int,
    arch: MLPArch = MLPArch(),
    stochastic: StochasticSpec | None = None,
    jobs: int = 1,
) -> EnsembleModel:
    """Train K mutually independent members with seeds derived from ``seed``."""
    kind = EnsembleKind(kind)
    if n_members < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {n_members}")
    spec = stochastic if stochastic is not None else default_stochastic_spec(kind)
    tasks = [
        (
            data.points,
            data.labels,
            data.n_classes,
            arch.layer_widths,
            kind.value,
            train_cfg.to_dict(),
            prior.lam,
            spec.to_dict(),
            derive_seed(seed, "member", k),
        )
        for k in range(n_members)
    ]
    results = parallel_map(_member_worker, tasks, jobs)
    members = []
    for values, _ in results:
        if isinstance(values, tuple):
            members.append((ParamVector(values[0], arch), ParamVector(values[1], arch)))
        else:
            members.append(ParamVector(values, arch))
    return EnsembleModel(
        kind=kind,
        members=tuple(members),
        stochastic=spec,
        prior=prior,
        arch=arch,
        seed=seed,
        train_config=train_cfg,
    )


def predict(
    model: EnsembleModel | PosteriorSamples,
    points: np.ndarray,
    inferences_per_member: int = 1,
    rng: np.random.Generator | None = None,
    keep_stack: bool = True,
) -> PredictiveDistribution:
    """Monte Carlo predictive distribution of an ensemble or sample store.

    Averages softmax outputs over members (and over stochastic inference
    passes, one mask draw each).  Posterior sample stores are treated as
    equally-weighted deterministic members.  The per-member probability
    stack is retained unless ``keep_stack`` is off, in which case only the
    streaming mean member entropy is kept for mutual information.
    """
    if inferences_per_member < 1:
        raise ConfigError("inferences_per_member must be >= 1")
    points = np.asarray(points, dtype=np.float64)

    if isinstance(model, PosteriorSamples):
        if model.arch is None:
            raise ConfigError("posterior store lacks an architecture")
        passes = [(ParamVector(row, model.arch), None) for row in model.samples]
        spec = StochasticSpec(kind=StochasticKind.NONE)
    else:
        spec = model.stochastic
        n_passes = 1 if spec.kind is StochasticKind.NONE else inferences_per_member
        passes = [(record, i) for record in model.members for i in range(n_passes)]
        if spec.kind is not StochasticKind.NONE and rng is None:
            raise ConfigError("stochastic kinds need an rng for inference masks")

    prob_sum = None
    entropy_sum = None
    stack = [] if keep_stack else None
    for record, _ in passes:
        if spec.kind is StochasticKind.NONE:
            vector = record[0] if isinstance(record, tuple) else record
            probs = softmax(forward(vector, points))
        else:
            probs = masked_forward(record, spec, points, rng)
        if prob_sum is None:
            prob_sum = np.zeros_like(probs)
            entropy_sum = np.zeros(probs.shape[0])
        prob_sum += probs
        entropy_sum += entropy_of(probs)
        if stack is not None:
            stack.append(probs)

    m = len(passes)
    if stack is not None:
        stack = np.stack(stack)
        probs = stack.mean(axis=0)
    else:
        probs = prob_sum / m
    return PredictiveDistribution(
        probs=probs,
        member_stack=stack,
        points=points,
        mean_member_entropy=entropy_sum / m,
    )


# --- on-disk ensemble store -------------------------------------------------


def save_ensemble(dirpath, model: EnsembleModel) -> None:
    """Write ``meta.json`` + ``members.bin`` (pairs interleaved A, B)."""
    os.makedirs(dirpath, exist_ok=True)
    rows = []
    for record in model.members:
        if isinstance(record, tuple):
            rows.extend([record[0].values, record[1].values])
        else:
            rows.append(record.values)
    write_param_rows(os.path.join(dirpath, "members.bin"), model.arch, np.stack(rows))
    meta = {
        "kind": model.kind.value,
        "k": model.k,
        "arch": list(model.arch.layer_widths),
        "stochastic": model.stochastic.to_dict(),
        "prior_lambda": model.prior.lam,
        "seed": model.seed,
        "train_config": model.train_config.to_dict() if model.train_config else None,
    }
    with open(os.path.join(dirpath, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_ensemble(dirpath) -> EnsembleModel:
    meta_path = os.path.join(dirpath, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise ArtifactError(f"missing ensemble metadata: {meta_path}") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt ensemble metadata: {meta_path}") from exc
    arch, rows = read_param_rows(os.path.join(dirpath, "members.bin"))
    if tuple(meta["arch"]) != arch.layer_widths:
        raise ArtifactError(f"{dirpath}: metadata and member rows disagree on architecture")
    spec = StochasticSpec.from_dict(meta["stochastic"])
    paired = spec.kind is StochasticKind.NP_EXCHANGE
    expected_rows = meta["k"] * (2 if paired else 1)
    if rows.shape[0] != expected_rows:
        raise ArtifactError(
            f"{dirpath}: expected {expected_rows} member rows, found {rows.shape[0]}"
        )
    members = []
    if paired:
        for i in range(0, rows.shape[0], 2):
            members.append((ParamVector(rows[i], arch), ParamVector(rows[i + 1], arch)))
    else:
        members = [ParamVector(row, arch) for row in rows]
    train_config = meta.get("train_config")
    return EnsembleModel(
        kind=EnsembleKind(meta["kind"]),
        members=tuple(members),
        stochastic=spec,
        prior=PriorSpec(meta["prior_lambda"]),
        arch=arch,
        seed=meta.get("seed"),
        train_config=TrainConfig.from_dict(train_config) if train_config else None,
    )
