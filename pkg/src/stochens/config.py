"""Experiment configuration: JSON schema, validation, seed plumbing.

One JSON file describes one run: the dataset (generated or loaded), the
prior, exactly one method, its sub-configuration, and evaluation settings.
Validation happens before any compute and reports every violated invariant
at once.  All randomness flows from the single ``seed`` (overridable via
the ``STOCHENS_SEED`` environment variable) through the hash-derived
streams in :mod:`stochens.rng`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError, StochensError
from .hmc import HMCConfig
from .masks import StochasticKind, StochasticSpec
from .net import MLPArch, PriorSpec
from .toydata import ToySpec
from .training import EnsembleKind, TrainConfig, default_stochastic_spec
from .rng import derive_seed

__all__ = ["ExperimentConfig", "EvalConfig", "SCHEMA_VERSION", "SEED_ENV_VAR"]

SCHEMA_VERSION = 1
SEED_ENV_VAR = "STOCHENS_SEED"

METHODS = ("regular", "multiswa", "se1", "se2", "se3", "hmc")


@dataclass(frozen=True)
class EvalConfig:
    resolution_in: int = 41
    resolution_out: int = 101
    inferences_per_member: int = 1
    sigma2: float = 1e-8

    def __post_init__(self):
        if self.resolution_in < 2 or self.resolution_out < 2:
            raise ConfigError("grid resolutions must be >= 2")
        if self.inferences_per_member < 1:
            raise ConfigError("inferences_per_member must be >= 1")
        if not self.sigma2 > 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")

    def to_dict(self) -> dict:
        return {
            "resolution_in": self.resolution_in,
            "resolution_out": self.resolution_out,
            "inferences_per_member": self.inferences_per_member,
            "sigma2": self.sigma2,
        }


def _parse_stochastic(raw: dict, method: str) -> StochasticSpec:
    """Accept either the canonical spec dict or the rates shorthand.

    The shorthand mirrors the config examples: ``{"kind": "dropout",
    "rates": {"hidden": 0.1}}`` applies one drop rate to all hidden layers;
    ``{"rates": {"per_layer": [...]}}`` lists them explicitly.
    """
    raw = dict(raw)
    raw.setdefault("kind", default_stochastic_spec(EnsembleKind(method)).kind.value)
    rates = raw.pop("rates", None)
    if rates is not None and "drop_rates" not in raw:
        if "hidden" in rates:
            raw["drop_rates"] = rates["hidden"]
        elif "per_layer" in rates:
            raw["drop_rates"] = tuple(rates["per_layer"])
        else:
            raise ConfigError(f"rates must carry 'hidden' or 'per_layer', got {rates}")
    return StochasticSpec.from_dict(raw)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    method: str
    dataset: ToySpec | str
    prior: PriorSpec = PriorSpec(1.0)
    arch: MLPArch = MLPArch()
    k: int = 1024
    train: TrainConfig = field(default_factory=TrainConfig)
    hmc: HMCConfig = field(default_factory=HMCConfig)
    stochastic: StochasticSpec | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.k < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.k}")
        if self.method in ("se1", "se2", "se3") and self.stochastic is not None:
            expected = default_stochastic_spec(EnsembleKind(self.method)).kind
            if self.stochastic.kind is not expected:
                raise ConfigError(
                    f"method {self.method} requires {expected.value} masks, "
                    f"got {self.stochastic.kind.value}"
                )

    @property
    def dataset_seed(self) -> int:
        if isinstance(self.dataset, ToySpec):
            return self.dataset.seed
        raise ConfigError("dataset is a file path; it has no generation seed")

    def resolved_stochastic(self) -> StochasticSpec:
        if self.stochastic is not None:
            return self.stochastic
        if self.method == "hmc":
            return StochasticSpec(kind=StochasticKind.NONE)
        return default_stochastic_spec(EnsembleKind(self.method))

    def hmc_with_seed(self) -> HMCConfig:
        merged = self.hmc.to_dict()
        merged["seed"] = derive_seed(self.seed, "hmc")
        return HMCConfig(**merged)

    def to_dict(self) -> dict:
        dataset = (
            self.dataset.to_dict() if isinstance(self.dataset, ToySpec)
            else {"path": self.dataset}
        )
        out = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "method": self.method,
            "dataset": dataset,
            "prior": {"lambda": self.prior.lam},
            "arch": list(self.arch.layer_widths),
            "k": self.k,
            "train": self.train.to_dict(),
            "hmc": {k: v for k, v in self.hmc.to_dict().items() if k != "seed"},
            "eval": self.eval.to_dict(),
            "output_dir": self.output_dir,
        }
        if self.stochastic is not None:
            out["stochastic"] = self.stochastic.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        """Build a validated config, reporting every violation at once."""
        problems: list[str] = []

        def attempt(label, fn, default=None):
            try:
                return fn()
            except (StochensError, KeyError, TypeError, ValueError) as exc:
                problems.append(f"{label}: {exc}")
                return default

        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            problems.append(f"schema_version: expected {SCHEMA_VERSION}, got {version}")

        seed = raw.get("seed", 0)
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed is not None:
            seed = attempt("seed override", lambda: int(env_seed), seed)
        if not isinstance(seed, int):
            problems.append(f"seed: must be an integer, got {seed!r}")
            seed = 0

        method = raw.get("method")
        if method not in METHODS:
            problems.append(f"method: must be one of {METHODS}, got {method!r}")
            method = "regular"

        dataset_raw = raw.get("dataset", {})
        if isinstance(dataset_raw, dict) and "path" in dataset_raw:
            dataset = dataset_raw["path"]
        else:
            def build_dataset():
                spec = dict(dataset_raw)
                spec.setdefault("seed", derive_seed(seed, "toy-data"))
                return ToySpec(**spec)

            dataset = attempt("dataset", build_dataset, ToySpec())

        prior = attempt(
            "prior", lambda: PriorSpec(float(raw.get("prior", {}).get("lambda", 1.0))),
            PriorSpec(1.0),
        )
        arch = attempt(
            "arch", lambda: MLPArch(tuple(raw.get("arch", (2, 10, 10, 2)))), MLPArch()
        )
        train = attempt(
            "train", lambda: TrainConfig.from_dict(raw.get("train", {})), TrainConfig()
        )
        hmc_cfg = attempt(
            "hmc",
            lambda: HMCConfig(**{**raw.get("hmc", {}), "seed": 0}),
            HMCConfig(),
        )
        stochastic = None
        if "stochastic" in raw:
            stochastic = attempt(
                "stochastic", lambda: _parse_stochastic(raw["stochastic"], method)
            )
        eval_cfg = attempt("eval", lambda: EvalConfig(**raw.get("eval", {})), EvalConfig())
        k = raw.get("k", 1024)

        config = None
        if not problems:
            config = attempt(
                "config",
                lambda: cls(
                    seed=seed,
                    method=method,
                    dataset=dataset,
                    prior=prior,
                    arch=arch,
                    k=k,
                    train=train,
                    hmc=hmc_cfg,
                    stochastic=stochastic,
                    eval=eval_cfg,
                    output_dir=raw.get("output_dir", "runs"),
                ),
            )
        if problems or config is None:
            raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(problems))
        return config

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)
