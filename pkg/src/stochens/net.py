"""Feed-forward network core.

A small fully-connected ReLU/softmax classifier stored as a single flat
float64 parameter vector.  The flat layout is layer-major: W1 (row-major,
shape out x in), b1, W2, b2, ...  Row ``n`` of a layer's weight matrix holds
the incoming weights of output node ``n``, so per-node operations (masking,
parameter exchange) act on contiguous rows.

All operations here are pure functions of their inputs; gradients are
hand-derived backpropagation for this fixed architecture family and are
validated against a central finite-difference oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "MLPArch",
    "ParamVector",
    "PriorSpec",
    "Dataset",
    "forward",
    "softmax",
    "nll",
    "grad_nll",
    "potential",
    "grad_potential",
    "finite_diff_grad",
    "random_params",
    "write_param_rows",
    "read_param_rows",
    "save_param_vector",
    "load_param_vector",
]


@dataclass(frozen=True)
class MLPArch:
    """Layer widths of a fully-connected ReLU network with softmax output."""

    layer_widths: tuple[int, ...] = (2, 10, 10, 2)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ShapeError("architecture needs at least an input and an output layer")
        if any(w < 1 for w in widths):
            raise ShapeError(f"all layer widths must be >= 1, got {widths}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def n_classes(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_params(self) -> int:
        ws = self.layer_widths
        return sum(ws[l] * ws[l + 1] + ws[l + 1] for l in range(self.n_layers))

    def layer_shapes(self) -> list[tuple[tuple[int, int], int]]:
        """Per layer: ((out, in) weight shape, bias length)."""
        ws = self.layer_widths
        return [((ws[l + 1], ws[l]), ws[l + 1]) for l in range(self.n_layers)]

    def header(self) -> str:
        widths = ",".join(str(w) for w in self.layer_widths)
        return f"arch={widths};count={self.n_params}"


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector bound to an architecture."""

    values: np.ndarray
    arch: MLPArch

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != self.arch.n_params:
            raise ShapeError(
                f"parameter vector has length {values.shape}, "
                f"architecture needs {self.arch.n_params}"
            )
        if not np.all(np.isfinite(values)):
            raise DomainError("parameter vector contains non-finite entries")
        object.__setattr__(self, "values", values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.arch)


@dataclass(frozen=True)
class PriorSpec:
    """Isotropic Gaussian prior over parameters with precision ``lam``."""

    lam: float = 1.0

    def __post_init__(self):
        if not (self.lam > 0 and np.isfinite(self.lam)):
            raise DomainError(f"prior precision must be positive and finite, got {self.lam}")


@dataclass(frozen=True)
class Dataset:
    """Classification dataset: n x d points with integer labels in [0, C)."""

    points: np.ndarray
    labels: np.ndarray
    domain_bounds: tuple[tuple[float, float], tuple[float, float]] = ((-1.0, 1.0), (-1.0, 1.0))
    n_classes: int = 2

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if points.ndim != 2 or points.shape[0] < 1:
            raise ShapeError(f"points must be a nonempty 2-d array, got shape {points.shape}")
        if labels.shape != (points.shape[0],):
            raise ShapeError("labels must be one integer per point")
        if not np.all(np.isfinite(points)):
            raise DomainError("points contain non-finite values")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise DomainError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.points.shape[0]


def unpack(arch: MLPArch, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of the flat vector as per-layer (W, b) pairs."""
    layers = []
    offset = 0
    for (out_w, in_w), n_b in arch.layer_shapes():
        w = values[offset : offset + out_w * in_w].reshape(out_w, in_w)
        offset += out_w * in_w
        b = values[offset : offset + n_b]
        offset += n_b
        layers.append((w, b))
    return layers


def _effective_layers(arch, values, masks):
    layers = unpack(arch, values)
    if masks is None or getattr(masks, "weight_masks", None) is None:
        return layers
    masked = []
    for (w, b), wm in zip(layers, masks.weight_masks):
        if wm is None:
            masked.append((w, b))
        else:
            w_mask, b_mask = wm
            masked.append((w * w_mask, b * b_mask))
    return masked


def _check_points(arch: MLPArch, points: np.ndarray) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.in_dim:
        raise ShapeError(f"points of shape {x.shape} do not match input width {arch.in_dim}")
    if not np.all(np.isfinite(x)):
        raise DomainError("input points contain non-finite values")
    return x


def forward(params: ParamVector, points: np.ndarray, masks=None) -> np.ndarray:
    """Pre-softmax logits for a batch of points.

    ``masks`` may carry per-layer node masks (applied after the ReLU of each
    hidden layer, or to the raw logits for the output layer) and per-layer
    weight/bias masks (applied to the parameters before use).  ``None``
    entries leave a layer untouched.
    """
    x = _check_points(params.arch, points)
    layers = _effective_layers(params.arch, params.values, masks)
    node_masks = getattr(masks, "node_masks", None) if masks is not None else None
    h = x
    last = len(layers) - 1
    for l, (w, b) in enumerate(layers):
        z = h @ w.T + b
        h = np.maximum(z, 0.0) if l < last else z
        if node_masks is not None and node_masks[l] is not None:
            h = h * node_masks[l]
    return h


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DomainError("logits contain non-finite values")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_nll(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return lse - logits[np.arange(logits.shape[0]), labels]


def nll_sum_raw(arch: MLPArch, values: np.ndarray, x: np.ndarray, labels: np.ndarray) -> float:
    """Sum-reduced NLL on raw arrays, no validation; sampler hot path."""
    layers = unpack(arch, values)
    h = x
    last = len(layers) - 1
    for l, (w, b) in enumerate(layers):
        z = h @ w.T + b
        h = np.maximum(z, 0.0) if l < last else z
    return float(_log_softmax_nll(h, labels).sum())


def nll(params: ParamVector, data: Dataset, masks=None, reduction: str = "sum") -> float:
    """Negative log-likelihood of the labels under the softmax output."""
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    if data.labels.max() >= params.arch.n_classes:
        raise DomainError("label out of range for the network's output width")
    logits = forward(params, data.points, masks)
    per_point = _log_softmax_nll(logits, data.labels)
    total = float(per_point.sum())
    return total / data.n if reduction == "mean" else total


def _forward_trace(arch, values, x, masks):
    """Forward pass retaining everything backprop needs."""
    layers = _effective_layers(arch, values, masks)
    node_masks = getattr(masks, "node_masks", None) if masks is not None else None
    pre, post = [], []
    h = x
    last = len(layers) - 1
    for l, (w, b) in enumerate(layers):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if l < last else z
        if node_masks is not None and node_masks[l] is not None:
            h = h * node_masks[l]
        post.append(h)
    return layers, pre, post


def nll_and_grad_sum_raw(
    arch: MLPArch, values: np.ndarray, x: np.ndarray, labels: np.ndarray, masks=None
) -> tuple[float, np.ndarray]:
    """Sum-reduced NLL and its backprop gradient in one forward pass."""
    layers, pre, post = _forward_trace(arch, values, x, masks)
    node_masks = getattr(masks, "node_masks", None) if masks is not None else None
    weight_masks = getattr(masks, "weight_masks", None) if masks is not None else None

    n = x.shape[0]
    rows = np.arange(n)
    logits = post[-1]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    norm = e.sum(axis=1, keepdims=True)
    loss = float((m[:, 0] + np.log(norm[:, 0]) - logits[rows, labels]).sum())
    delta = e / norm
    delta[rows, labels] -= 1.0

    grad = np.zeros_like(values)
    grads = unpack(arch, grad)
    last = len(layers) - 1
    for l in range(last, -1, -1):
        if node_masks is not None and node_masks[l] is not None:
            delta = delta * node_masks[l]
        inputs = x if l == 0 else post[l - 1]
        gw, gb = grads[l]
        gw_val = delta.T @ inputs
        gb_val = delta.sum(axis=0)
        if weight_masks is not None and weight_masks[l] is not None:
            w_mask, b_mask = weight_masks[l]
            gw_val = gw_val * w_mask
            gb_val = gb_val * b_mask
        gw[...] = gw_val
        gb[...] = gb_val
        if l > 0:
            w_eff = layers[l][0]
            delta = (delta @ w_eff) * (pre[l - 1] > 0)
    return loss, grad


def grad_nll_sum_raw(
    arch: MLPArch, values: np.ndarray, x: np.ndarray, labels: np.ndarray, masks=None
) -> np.ndarray:
    """Backprop gradient of the sum-reduced NLL on raw arrays."""
    return nll_and_grad_sum_raw(arch, values, x, labels, masks)[1]


def potential_and_grad_raw(
    arch: MLPArch, values: np.ndarray, x: np.ndarray, labels: np.ndarray, lam: float
) -> tuple[float, np.ndarray]:
    """Potential energy and its gradient in one fused pass (sampler hot path)."""
    loss, grad = nll_and_grad_sum_raw(arch, values, x, labels)
    u = loss + 0.5 * lam * float(values @ values)
    grad += lam * values
    return u, grad


def grad_nll(params: ParamVector, data: Dataset, masks=None) -> np.ndarray:
    """Flat gradient of the sum-reduced NLL, same layout as the parameters."""
    arch = params.arch
    x = _check_points(arch, data.points)
    if data.labels.max() >= arch.n_classes:
        raise DomainError("label out of range for the network's output width")
    return grad_nll_sum_raw(arch, params.values, x, data.labels, masks)


def potential(params: ParamVector, data: Dataset | None, prior: PriorSpec) -> float:
    """Negative log of (likelihood x Gaussian prior), constants dropped.

    ``data=None`` gives the prior-only quadratic, used as a test hook.
    """
    u = 0.5 * prior.lam * float(params.values @ params.values)
    if data is not None:
        u += nll(params, data, reduction="sum")
    return u


def grad_potential(params: ParamVector, data: Dataset | None, prior: PriorSpec) -> ParamVector:
    """Exact gradient of :func:`potential` via backpropagation."""
    g = prior.lam * params.values
    if data is not None:
        g = g + grad_nll(params, data)
    return ParamVector(g, params.arch)


def finite_diff_grad(
    params: ParamVector, data: Dataset | None, prior: PriorSpec, h: float = 1e-5
) -> ParamVector:
    """Central-difference gradient of the potential, one coordinate at a time."""
    if not h > 0:
        raise DomainError(f"step size must be positive, got {h}")
    base = params.values
    grad = np.empty_like(base)
    for j in range(base.shape[0]):
        plus = base.copy()
        minus = base.copy()
        plus[j] += h
        minus[j] -= h
        u_plus = potential(ParamVector(plus, params.arch), data, prior)
        u_minus = potential(ParamVector(minus, params.arch), data, prior)
        grad[j] = (u_plus - u_minus) / (2.0 * h)
    return ParamVector(grad, params.arch)


def random_params(arch: MLPArch, rng: np.random.Generator, scale: float = 1.0) -> ParamVector:
    """Gaussian parameter vector, mostly for tests and sampler starts."""
    return ParamVector(scale * rng.standard_normal(arch.n_params), arch)


# --- binary serialization -------------------------------------------------
#
# One ASCII header line "arch=2,10,10,2;count=162\n" followed by rows of
# little-endian float64, one row per parameter vector.


def _parse_header(line: bytes) -> MLPArch:
    try:
        text = line.decode("ascii").strip()
        fields = dict(part.split("=", 1) for part in text.split(";"))
        widths = tuple(int(w) for w in fields["arch"].split(","))
        count = int(fields["count"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise ShapeError(f"malformed parameter header: {line!r}") from exc
    arch = MLPArch(widths)
    if arch.n_params != count:
        raise ShapeError(f"header count {count} does not match arch {widths}")
    return arch


def write_param_rows(path, arch: MLPArch, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f8").reshape(-1, arch.n_params)
    with open(path, "wb") as fh:
        fh.write((arch.header() + "\n").encode("ascii"))
        fh.write(rows.tobytes())


def read_param_rows(path) -> tuple[MLPArch, np.ndarray]:
    with open(path, "rb") as fh:
        header = fh.readline()
        arch = _parse_header(header)
        payload = fh.read()
    row_bytes = 8 * arch.n_params
    if len(payload) == 0 or len(payload) % row_bytes != 0:
        raise ShapeError(f"{path}: payload of {len(payload)} bytes is not whole rows")
    rows = np.frombuffer(payload, dtype="<f8").reshape(-1, arch.n_params).astype(np.float64)
    return arch, rows


def save_param_vector(path, params: ParamVector) -> None:
    write_param_rows(path, params.arch, params.values[None, :])


def load_param_vector(path) -> ParamVector:
    arch, rows = read_param_rows(path)
    if rows.shape[0] != 1:
        raise ShapeError(f"{path}: expected one parameter vector, found {rows.shape[0]}")
    return ParamVector(rows[0], arch)
