"""Small dense feed-forward networks.

Forward traces, exact reverse-mode gradients, activation-pattern
fingerprints and a central finite-difference oracle.  Layer indices in the
public API are 1-based: layer ``l`` maps ``a_l`` to ``a_{l+1}`` and ``a_1``
is the network input.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import ClassIndexError, InputShapeError

ACTIVATIONS = ("relu", "softplus", "identity")

MAX_WIDTH = 512
MAX_DEPTH = 32


def check_vector(x, dim: Optional[int] = None, name: str = "x") -> np.ndarray:
    """Return ``x`` as a finite 1-d float64 array, optionally of length ``dim``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InputShapeError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise InputShapeError(f"{name} has length {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise InputShapeError(f"{name} contains non-finite entries")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One affine map followed by an elementwise activation."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    beta: float = 1.0

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if W.ndim != 2:
            raise InputShapeError(f"weights must be a matrix, got shape {W.shape}")
        if b.ndim != 1 or b.shape[0] != W.shape[0]:
            raise InputShapeError(
                f"bias length {b.shape} does not match weight rows {W.shape[0]}"
            )
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise InputShapeError("layer parameters must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "softplus" and not self.beta > 0:
            raise ValueError("softplus beta must be positive")
        object.__setattr__(self, "weights", _frozen(W))
        object.__setattr__(self, "bias", _frozen(b))
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def piecewise_linear(self) -> bool:
        return self.activation in ("relu", "identity")

    def preactivation(self, a: np.ndarray) -> np.ndarray:
        return self.weights @ a + self.bias

    def activate(self, z: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.where(mask, z, 0.0)
        if self.activation == "softplus":
            return np.logaddexp(0.0, self.beta * z) / self.beta
        return z.copy()

    def derivative(self, z: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Elementwise activation derivative at ``z`` (hinges resolved by ``mask``)."""
        if self.activation == "relu":
            return mask.astype(np.float64)
        if self.activation == "softplus":
            return 0.5 * (1.0 + np.tanh(0.5 * self.beta * z))
        return np.ones_like(z)

    def to_dict(self) -> dict:
        d = {
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "activation": self.activation,
        }
        if self.activation == "softplus":
            d["beta"] = self.beta
        return d

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        return (
            self.activation == other.activation
            and self.beta == other.beta
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
        )

    __hash__ = None


@dataclass(frozen=True)
class Network:
    """Ordered stack of layers ``f = f_n o ... o f_1``."""

    layers: tuple
    max_width: int = field(default=MAX_WIDTH, compare=False, repr=False)
    max_depth: int = field(default=MAX_DEPTH, compare=False, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise InputShapeError("a network needs at least one layer")
        if len(layers) > self.max_depth:
            raise InputShapeError(f"depth {len(layers)} exceeds cap {self.max_depth}")
        for k, (lower, upper) in enumerate(zip(layers[:-1], layers[1:]), start=1):
            if lower.out_dim != upper.in_dim:
                raise InputShapeError(
                    f"layer {k} outputs {lower.out_dim} units but layer {k + 1} "
                    f"expects {upper.in_dim}"
                )
        widths = [layers[0].in_dim] + [layer.out_dim for layer in layers]
        if max(widths) > self.max_width:
            raise InputShapeError(f"width {max(widths)} exceeds cap {self.max_width}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def piecewise_linear(self) -> bool:
        return all(layer.piecewise_linear for layer in self.layers)

    def layer(self, l: int) -> LayerSpec:
        """The 1-based layer ``l``."""
        if not 1 <= l <= self.depth:
            raise IndexError(f"layer index {l} outside 1..{self.depth}")
        return self.layers[l - 1]

    def suffix(self, l: int) -> "Network":
        """The sub-network ``f_n o ... o f_l``."""
        if not 1 <= l <= self.depth:
            raise IndexError(f"layer index {l} outside 1..{self.depth}")
        return Network(self.layers[l - 1:], self.max_width, self.max_depth)

    def replace_layer(self, l: int, layer: LayerSpec) -> "Network":
        layers = list(self.layers)
        layers[l - 1] = layer
        return Network(tuple(layers), self.max_width, self.max_depth)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, data: dict) -> "Network":
        try:
            layers = tuple(
                LayerSpec(
                    np.asarray(spec["weights"], dtype=np.float64),
                    np.asarray(spec["bias"], dtype=np.float64),
                    spec.get("activation", "relu"),
                    spec.get("beta", 1.0),
                )
                for spec in data["layers"]
            )
        except KeyError as exc:
            raise InputShapeError(f"network JSON is missing field {exc}") from None
        net = cls(layers)
        if "input_dim" in data and int(data["input_dim"]) != net.input_dim:
            raise InputShapeError(
                f"input_dim {data['input_dim']} does not match first layer ({net.input_dim})"
            )
        return net


def load_network(path) -> Network:
    with open(path) as fh:
        return Network.from_dict(json.load(fh))


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(net.to_dict()) + "\n")


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Layer inputs ``a_1..a_{n+1}``, pre-activations ``z_1..z_n`` and masks."""

    inputs: tuple
    pre_activations: tuple
    masks: tuple

    @property
    def output(self) -> np.ndarray:
        return self.inputs[-1]

    @property
    def depth(self) -> int:
        return len(self.pre_activations)


def _resolve_masks(layer, z, hinge_tol, reference):
    if layer.activation != "relu":
        return np.ones(z.shape, dtype=bool)
    if reference is None:
        return z >= -hinge_tol
    on_hinge = np.abs(z) <= hinge_tol
    return np.where(on_hinge, reference, z > 0)


def forward(
    net: Network,
    x,
    hinge_tol: float = 0.0,
    reference: Optional[Sequence[np.ndarray]] = None,
) -> ForwardTrace:
    """Run ``net`` on ``x`` and record every intermediate quantity.

    A ReLU unit counts as active when ``z >= 0``.  With ``hinge_tol > 0``
    units with ``|z| <= hinge_tol`` are treated as lying on their hinge; such
    ties are resolved to the matching entry of ``reference`` (one mask per
    layer) when given, otherwise to active.
    """
    a = check_vector(x, net.input_dim)
    inputs, pre, masks = [a], [], []
    for k, layer in enumerate(net.layers):
        z = layer.preactivation(a)
        ref = None if reference is None else np.asarray(reference[k], dtype=bool)
        m = _resolve_masks(layer, z, hinge_tol, ref)
        a = layer.activate(z, m)
        inputs.append(a)
        pre.append(z)
        masks.append(m)
    return ForwardTrace(tuple(inputs), tuple(pre), tuple(masks))


def _check_class(net: Network, xi: int) -> int:
    if not 0 <= int(xi) < net.output_dim:
        raise ClassIndexError(f"class index {xi} outside 0..{net.output_dim - 1}")
    return int(xi)


@dataclass(frozen=True, eq=False)
class GradientResult:
    value: float
    gradient: np.ndarray
    class_index: int
    wrt_layer: int = 1


def backprop(net: Network, trace: ForwardTrace, xi: int, wrt_layer: int = 1) -> np.ndarray:
    """Gradient of output ``xi`` with respect to ``a_{wrt_layer}`` along ``trace``."""
    g = np.zeros(net.output_dim)
    g[xi] = 1.0
    for k in range(net.depth, wrt_layer - 1, -1):
        layer = net.layers[k - 1]
        g = layer.weights.T @ (g * layer.derivative(trace.pre_activations[k - 1], trace.masks[k - 1]))
    return g


def gradient(
    net: Network,
    x,
    xi: int,
    wrt_layer: int = 1,
    hinge_tol: float = 0.0,
    reference=None,
) -> GradientResult:
    """Exact gradient of ``f_xi`` with respect to the layer input ``a_{wrt_layer}``.

    ``x`` is always the network input; ``wrt_layer`` ranges over ``1..n+1``.
    """
    xi = _check_class(net, xi)
    if not 1 <= wrt_layer <= net.depth + 1:
        raise IndexError(f"wrt_layer {wrt_layer} outside 1..{net.depth + 1}")
    trace = forward(net, x, hinge_tol, reference)
    return GradientResult(
        float(trace.output[xi]), backprop(net, trace, xi, wrt_layer), xi, wrt_layer
    )


def layer_jacobian(layer: LayerSpec, a, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """``d f_l(a) / d a`` as a dense ``d_out x d_in`` matrix."""
    z = layer.preactivation(np.asarray(a, dtype=np.float64))
    if mask is None:
        mask = _resolve_masks(layer, z, 0.0, None)
    return layer.derivative(z, mask)[:, None] * layer.weights


@dataclass(frozen=True, eq=False)
class RegionFingerprint:
    """Activation patterns of layers ``from_layer..n``.

    Equal fingerprints imply the same affine piece of the suffix network and
    therefore equal gradients.  They are a necessary-condition proxy for
    membership in the same linear region; path connectivity is not checked.
    """

    from_layer: int
    patterns: tuple

    @property
    def key(self) -> bytes:
        return self.from_layer.to_bytes(2, "little") + b"".join(
            np.packbits(p.astype(np.uint8)).tobytes() + len(p).to_bytes(2, "little")
            for p in self.patterns
        )

    def digest(self, length: int = 12) -> str:
        return hashlib.sha256(self.key).hexdigest()[:length]

    def suffix(self, m: int) -> "RegionFingerprint":
        """Fingerprint of the shorter suffix starting at layer ``m >= from_layer``."""
        return RegionFingerprint(m, self.patterns[m - self.from_layer:])

    def __eq__(self, other):
        if not isinstance(other, RegionFingerprint):
            return NotImplemented
        return self.key == other.key

    def __hash__(self):
        return hash(self.key)


def fingerprint(trace: ForwardTrace, from_layer: int = 1) -> RegionFingerprint:
    if not 1 <= from_layer <= trace.depth:
        raise IndexError(f"from_layer {from_layer} outside 1..{trace.depth}")
    return RegionFingerprint(
        from_layer, tuple(np.array(m, dtype=bool) for m in trace.masks[from_layer - 1:])
    )


def hinge_margin(trace: ForwardTrace, net: Network) -> float:
    """Smallest ``|z|`` over all ReLU units (``inf`` if there are none)."""
    margins = [
        np.min(np.abs(z))
        for z, layer in zip(trace.pre_activations, net.layers)
        if layer.activation == "relu" and z.size
    ]
    return float(min(margins)) if margins else float("inf")


def finite_difference_gradient(net: Network, x, xi: int, step: float = 1e-4) -> np.ndarray:
    """Central-difference estimate of the gradient of ``f_xi`` at ``x``.

    Unreliable when a step crosses a ReLU hinge; callers should keep every
    ``|z|`` well above ``step`` times the weight scale.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    xi = _check_class(net, xi)
    x = check_vector(x, net.input_dim)
    grad = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = step
        f_plus = forward(net, x + e).output[xi]
        f_minus = forward(net, x - e).output[xi]
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad
