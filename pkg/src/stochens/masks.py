"""Samplers and appliers for stochastic network mechanisms.

Three mechanisms are supported, all expressed as binary masks over a fixed
architecture:

* activation dropout: Bernoulli node masks multiply post-activation values
  of hidden layers (no 1/p rescaling, at train or test time);
* weight dropout (DropConnect): Bernoulli masks multiply weights and biases
  elementwise;
* non-parametric exchange: two full parameter sets, with each output node's
  incoming row (weights + bias) drawn from set A or set B with probability
  1/2, on every layer including the output.

Mask sampling is reproducible: the same generator state yields bit-identical
masks.  Concurrent use requires independent generator streams (see
:mod:`stochens.rng`).
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .net import MLPArch, ParamVector, forward, softmax, unpack

__all__ = [
    "StochasticKind",
    "StochasticSpec",
    "MaskSet",
    "sample_masks",
    "apply_np_selection",
    "masked_forward",
    "node_index_groups",
    "stochastic_groups",
    "selector_coordinate_mask",
]

NP_EXCHANGE_PROB = 0.5


class StochasticKind(str, enum.Enum):
    NONE = "none"
    DROPOUT = "dropout"
    DROPCONNECT = "dropconnect"
    NP_EXCHANGE = "np_exchange"


@dataclass(frozen=True)
class StochasticSpec:
    """Which stochastic mechanism applies, and with what drop rate(s).

    ``drop_rates`` is a single probability applied to every affected layer,
    or one probability per affected layer.  It must be present exactly for
    the dropout and DropConnect kinds.  The exchange mechanism has fixed,
    equal selection probabilities and takes no rates.
    """

    kind: StochasticKind = StochasticKind.NONE
    drop_rates: float | tuple[float, ...] | None = None
    applies_to_output_layer: bool | None = None

    def __post_init__(self):
        kind = StochasticKind(self.kind)
        object.__setattr__(self, "kind", kind)
        rated = kind in (StochasticKind.DROPOUT, StochasticKind.DROPCONNECT)
        if rated and self.drop_rates is None:
            raise ConfigError(f"{kind.value} requires drop_rates")
        if not rated and self.drop_rates is not None:
            raise ConfigError(f"{kind.value} takes no drop_rates")
        if self.drop_rates is not None:
            rates = self.drop_rates
            rates = (float(rates),) if np.isscalar(rates) else tuple(float(r) for r in rates)
            if any(not (0.0 <= r <= 1.0) for r in rates):
                raise ConfigError(f"drop rates must lie in [0, 1], got {rates}")
            object.__setattr__(self, "drop_rates", rates)
        if self.applies_to_output_layer is None:
            object.__setattr__(
                self, "applies_to_output_layer", kind is StochasticKind.NP_EXCHANGE
            )

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "applies_to_output_layer": self.applies_to_output_layer}
        if self.drop_rates is not None:
            out["drop_rates"] = list(self.drop_rates)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StochasticSpec":
        rates = data.get("drop_rates")
        if rates is not None and not np.isscalar(rates):
            rates = tuple(rates)
        return cls(
            kind=StochasticKind(data["kind"]),
            drop_rates=rates,
            applies_to_output_layer=data.get("applies_to_output_layer"),
        )

    def affected_layers(self, arch: MLPArch) -> list[int]:
        if self.kind is StochasticKind.NONE:
            return []
        layers = list(range(arch.n_layers - 1))
        if self.applies_to_output_layer:
            layers.append(arch.n_layers - 1)
        return layers

    def layer_drop_rate(self, arch: MLPArch, layer: int) -> float:
        affected = self.affected_layers(arch)
        if self.kind is StochasticKind.NP_EXCHANGE:
            return NP_EXCHANGE_PROB if layer in affected else 0.0
        if layer not in affected:
            return 0.0
        rates = self.drop_rates
        if len(rates) == 1:
            return rates[0]
        if len(rates) != len(affected):
            raise ConfigError(
                f"got {len(rates)} drop rates for {len(affected)} affected layers"
            )
        return rates[affected.index(layer)]


@dataclass(frozen=True)
class MaskSet:
    """One sampled realization of a stochastic mechanism.

    Lists are indexed by layer; ``None`` entries leave that layer untouched.
    ``node_masks`` multiply layer outputs, ``weight_masks`` hold (W, b) mask
    pairs, ``selectors`` hold per-node A/B bits for parameter exchange.
    All mask entries are 0.0 or 1.0.
    """

    kind: StochasticKind
    node_masks: tuple | None = None
    weight_masks: tuple | None = None
    selectors: tuple | None = None


def _bernoulli(rng: np.random.Generator, keep_prob: float, shape) -> np.ndarray:
    return (rng.random(shape) < keep_prob).astype(np.float64)


def sample_masks(spec: StochasticSpec, arch: MLPArch, rng: np.random.Generator) -> MaskSet:
    """Draw one i.i.d. Bernoulli mask realization for the given mechanism."""
    shapes = arch.layer_shapes()
    if spec.kind is StochasticKind.NONE:
        return MaskSet(kind=spec.kind)
    affected = spec.affected_layers(arch)

    if spec.kind is StochasticKind.DROPOUT:
        masks = []
        for l, ((out_w, _), _) in enumerate(shapes):
            if l in affected:
                masks.append(_bernoulli(rng, 1.0 - spec.layer_drop_rate(arch, l), out_w))
            else:
                masks.append(None)
        return MaskSet(kind=spec.kind, node_masks=tuple(masks))

    if spec.kind is StochasticKind.DROPCONNECT:
        masks = []
        for l, (w_shape, n_b) in enumerate(shapes):
            if l in affected:
                keep = 1.0 - spec.layer_drop_rate(arch, l)
                masks.append((_bernoulli(rng, keep, w_shape), _bernoulli(rng, keep, n_b)))
            else:
                masks.append(None)
        return MaskSet(kind=spec.kind, weight_masks=tuple(masks))

    selectors = []
    for l, ((out_w, _), _) in enumerate(shapes):
        if l in affected:
            selectors.append(_bernoulli(rng, NP_EXCHANGE_PROB, out_w))
        else:
            selectors.append(None)
    return MaskSet(kind=spec.kind, selectors=tuple(selectors))


def apply_np_selection(
    params_a: ParamVector, params_b: ParamVector, selector: MaskSet
) -> ParamVector:
    """Assemble an effective parameter vector by per-node row selection.

    For each layer output node, the incoming weight row and bias come from
    ``params_a`` where the selector bit is 1 and from ``params_b`` where it
    is 0.  Layers without a selector fall back to ``params_a``.
    """
    if params_a.arch != params_b.arch:
        raise ShapeError("parameter sets have different architectures")
    if selector.kind is not StochasticKind.NP_EXCHANGE or selector.selectors is None:
        raise ConfigError("selector mask set must be of the exchange kind")
    out = params_a.values.copy()
    layers_out = unpack(params_a.arch, out)
    layers_b = unpack(params_b.arch, params_b.values)
    for (w_out, b_out), (w_b, b_b), bits in zip(layers_out, layers_b, selector.selectors):
        if bits is None:
            continue
        take_b = bits == 0.0
        w_out[take_b, :] = w_b[take_b, :]
        b_out[take_b] = b_b[take_b]
    return ParamVector(out, params_a.arch)


def masked_forward(
    params,
    spec: StochasticSpec,
    points: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """One stochastic forward pass; returns softmax probabilities.

    ``params`` is a single :class:`ParamVector` for the none/dropout/
    DropConnect kinds and an (A, B) pair for parameter exchange.  A fresh
    mask realization is drawn from ``rng`` on every call.
    """
    if spec.kind is StochasticKind.NP_EXCHANGE:
        try:
            params_a, params_b = params
        except (TypeError, ValueError):
            raise ConfigError("parameter exchange needs a pair of parameter sets") from None
        masks = sample_masks(spec, params_a.arch, rng)
        effective = apply_np_selection(params_a, params_b, masks)
        return softmax(forward(effective, points))
    if not isinstance(params, ParamVector):
        raise ConfigError(f"{spec.kind.value} takes a single parameter set")
    if spec.kind is StochasticKind.NONE:
        return softmax(forward(params, points))
    masks = sample_masks(spec, params.arch, rng)
    return softmax(forward(params, points, masks))


@functools.lru_cache(maxsize=16)
def node_index_groups(arch: MLPArch) -> list[list[np.ndarray]]:
    """Flat-vector indices of each output node's incoming row plus bias.

    Returns one list per layer, each holding one index array per output
    node.  These are the per-node parameter groups that node masks and the
    exchange selector act on.
    """
    groups = []
    offset = 0
    for (out_w, in_w), n_b in arch.layer_shapes():
        w_start, b_start = offset, offset + out_w * in_w
        layer = []
        for n in range(out_w):
            row = np.arange(w_start + n * in_w, w_start + (n + 1) * in_w)
            layer.append(np.append(row, b_start + n))
        groups.append(layer)
        offset = b_start + n_b
    return groups


def selector_coordinate_mask(arch: MLPArch, selector: MaskSet) -> np.ndarray:
    """Expand per-node selector bits to a per-coordinate 0/1 vector.

    Coordinate value 1 means the primary parameter set supplies that
    coordinate; layers without a selector default to the primary set.
    """
    if selector.kind is not StochasticKind.NP_EXCHANGE or selector.selectors is None:
        raise ConfigError("selector mask set must be of the exchange kind")
    coord = np.ones(arch.n_params)
    for layer_groups, bits in zip(node_index_groups(arch), selector.selectors):
        if bits is None:
            continue
        for n, idx in enumerate(layer_groups):
            coord[idx] = bits[n]
    return coord


def stochastic_groups(spec: StochasticSpec, arch: MLPArch) -> list[tuple[np.ndarray, float]]:
    """Parameter groups carrying a two-way stochastic choice.

    Each entry is ``(flat_indices, p_first)`` where ``p_first`` is the
    probability that the group takes its first realization (the kept /
    set-A one).  Dropout and exchange factorize per node; DropConnect
    factorizes per individual weight and bias.  Parameters outside any
    group are deterministic.
    """
    if spec.kind is StochasticKind.NONE:
        return []
    groups = []
    node_groups = node_index_groups(arch)
    for layer in spec.affected_layers(arch):
        if spec.kind is StochasticKind.NP_EXCHANGE:
            p_first = NP_EXCHANGE_PROB
        else:
            p_first = 1.0 - spec.layer_drop_rate(arch, layer)
        for idx in node_groups[layer]:
            if spec.kind is StochasticKind.DROPCONNECT:
                groups.extend((np.array([j]), p_first) for j in idx)
            else:
                groups.append((idx, p_first))
    return groups
