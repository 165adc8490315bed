"""Recursive DTD with exact nested differentiation.

``R^l(a)`` is defined recursively: pick root(s) for ``a``, evaluate the
upstream relevance at ``f_l(root)``, differentiate it with respect to the
root and multiply by ``a - root``.  Upstream relevances themselves depend on
roots chosen further up, so the derivative has to flow through the whole
recursion, including the root functions.  torch (float64, ``create_graph``)
provides that; finite differences are only used by the diagnostics.

ReLU units whose pre-activation lies within ``hinge_tol`` of zero take their
activity from a reference pattern, by default the pattern of the explained
input.  Roots found by the hyperplane rules sit exactly on a hinge, and this
is the one-sided derivative DTD prescribes for them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional

import numpy as np

from . import rules as _rules
from .engine import RelevanceTrace, RuleSpec, rules_per_layer
from .exceptions import (
    DegenerateDenominator,
    OrthogonalDirection,
    RootUnavailable,
)
from .network import (
    Network,
    RegionFingerprint,
    _check_class,
    _resolve_masks,
    check_vector,
    fingerprint,
    forward,
)
from .rules import DENOMINATOR_TOL, RootPoint

HINGE_TOL = 1e-9


def _torch():
    import torch

    return torch


@dataclass
class _Root:
    neuron: Optional[int]
    point: object  # torch tensor
    direction: object = None
    t: Optional[float] = None


class RootPolicy:
    """Base class: maps a layer input to the roots used at that layer.

    ``roots`` returns ``_Root`` entries; ``neuron=None`` marks a root shared by
    every neuron of the layer.
    """

    label = "policy"

    def roots(self, engine: "RecursiveRelevance", l: int, a) -> list:
        raise NotImplementedError

    def __str__(self):
        return self.label


class RuleBased(RootPolicy):
    """Per-neuron roots from a propagation rule, removing each ``z_j`` fully.

    Neurons whose pre-activation is exactly zero are skipped.  Orthogonal
    directions are skipped (``on_orthogonal="skip"``) or raised (``"raise"``).
    """

    def __init__(self, rule: RuleSpec, on_orthogonal: str = "skip", tol: float = DENOMINATOR_TOL):
        if on_orthogonal not in ("skip", "raise"):
            raise ValueError("on_orthogonal must be 'skip' or 'raise'")
        self.rule = rule
        self.on_orthogonal = on_orthogonal
        self.tol = tol
        self._cache = {}

    @property
    def label(self):
        from .engine import rule_label

        if isinstance(self.rule, (str, _rules.RuleKind)):
            return str(_rules.parse_rule(self.rule))
        return rule_label(tuple(_rules.parse_rule(r) for r in self.rule))

    def _rule_for(self, engine, l):
        key = engine.net.depth
        if key not in self._cache:
            self._cache[key] = rules_per_layer(self.rule, key)
        return self._cache[key][l - 1]

    def roots(self, engine, l, a):
        torch = _torch()
        rule = self._rule_for(engine, l)
        W, b = engine.params[l - 1]
        if rule.kind == "w2":
            V = W
        elif rule.kind == "zplus":
            V = torch.where(W >= 0, a.unsqueeze(0), torch.zeros_like(W))
        elif rule.kind == "gamma":
            V = a.unsqueeze(0) * (1.0 + rule.param * (W >= 0).to(W.dtype))
        else:
            V = a.unsqueeze(0).expand_as(W)
        z = W @ a + b
        if rule.hyperplane:
            denom = (W * V).sum(dim=1)
        else:
            sign = torch.where(z >= 0, torch.ones_like(z), -torch.ones_like(z))
            denom = z + rule.param * sign if rule.kind == "eps" else z
        out = []
        z_val = z.detach().numpy()
        d_val = denom.detach().numpy()
        for j in range(W.shape[0]):
            if rule.hyperplane and abs(d_val[j]) < self.tol:
                if self.on_orthogonal == "raise":
                    raise OrthogonalDirection(f"layer {l} neuron {j}: direction orthogonal to w")
                continue
            if z_val[j] == 0.0:
                continue
            if abs(d_val[j]) < self.tol:
                raise DegenerateDenominator(f"layer {l} neuron {j}: denominator vanished")
            t = z[j] / denom[j]
            out.append(_Root(j, a - t * V[j], V[j], float(t.detach())))
        return out


class ConstantPerRegion(RootPolicy):
    """One fixed root per (layer, region), shared by all neurons of the layer.

    ``table`` maps a :class:`RegionFingerprint` (its ``from_layer`` is the
    layer) to the root used for every input with that fingerprint.  Each root
    must itself carry its key's fingerprint; hinge ties at the root are
    resolved toward the key's pattern.
    """

    label = "constant"

    def __init__(self, net: Network, table: Mapping[RegionFingerprint, object],
                 hinge_tol: float = HINGE_TOL):
        self.hinge_tol = hinge_tol
        self.table = {}
        for key, root in table.items():
            l = key.from_layer
            layer_in = net.layer(l).in_dim
            root = check_vector(root, layer_in, "root")
            got = fingerprint(
                forward(net.suffix(l), root, hinge_tol, key.patterns), 1
            )
            if RegionFingerprint(l, got.patterns) != key:
                raise RootUnavailable(f"root for layer {l} lies outside its region")
            self.table[(l, key.key)] = root

    @classmethod
    def for_input(cls, net: Network, x, roots, hinge_tol: float = HINGE_TOL) -> "ConstantPerRegion":
        """Table for the regions visited by ``x``.

        ``roots`` is a mapping ``{layer: root}`` or a callable ``layer -> root``;
        the scalar ``0`` means the origin at every layer.
        """
        trace = forward(net, x)
        if np.isscalar(roots) and roots == 0:
            roots_fn = lambda l: np.zeros(net.layer(l).in_dim)  # noqa: E731
        elif callable(roots):
            roots_fn = roots
        else:
            roots_fn = roots.__getitem__
        table = {}
        for l in range(1, net.depth + 1):
            table[fingerprint(trace, l)] = roots_fn(l)
        return cls(net, table, hinge_tol)

    def roots(self, engine, l, a):
        torch = _torch()
        a_np = a.detach().numpy()
        ref = None if engine.reference is None else engine.reference[l - 1:]
        trace = forward(engine.net.suffix(l), a_np, engine.hinge_tol, ref)
        fp = fingerprint(trace, 1)
        key = RegionFingerprint(l, fp.patterns).key
        if (l, key) not in self.table:
            raise RootUnavailable(f"no root stored for the region of layer {l}")
        return [_Root(None, torch.as_tensor(self.table[(l, key)], dtype=torch.float64))]


class Custom(RootPolicy):
    """User root function ``fn(layer, a, neuron) -> tensor | None``.

    ``a`` is a float64 torch tensor and the result should be computed from it
    with torch operations so that its Jacobian is tracked.  With
    ``per_neuron=False`` the function is called once with ``neuron=None``.
    Returning ``None`` skips the neuron.
    """

    def __init__(self, fn: Callable, per_neuron: bool = False, label: str = "custom"):
        self.fn = fn
        self.per_neuron = per_neuron
        self.label = label

    def roots(self, engine, l, a):
        torch = _torch()
        neurons = range(engine.net.layer(l).out_dim) if self.per_neuron else [None]
        out = []
        for j in neurons:
            root = self.fn(l, a, j)
            if root is None:
                continue
            if not isinstance(root, torch.Tensor):
                root = torch.as_tensor(np.asarray(root, dtype=np.float64))
            if tuple(root.shape) != tuple(a.shape):
                raise RootUnavailable(f"custom root has shape {tuple(root.shape)}, expected {tuple(a.shape)}")
            out.append(_Root(j, root.to(torch.float64)))
        return out


def as_policy(policy) -> RootPolicy:
    if isinstance(policy, RootPolicy):
        return policy
    return RuleBased(policy)


class RecursiveRelevance:
    """Evaluator for the recursive relevance functions ``R^l`` of one network.

    ``reference`` is an input vector or a sequence of per-layer masks used to
    resolve hinge ties; ``None`` means ties count as active.
    """

    def __init__(self, net: Network, xi: int, policy, hinge_tol: float = HINGE_TOL,
                 reference=None, allow_degenerate: bool = False):
        torch = _torch()
        self.net = net
        self.xi = _check_class(net, xi)
        self.policy = as_policy(policy)
        self.hinge_tol = float(hinge_tol)
        self.allow_degenerate = allow_degenerate
        if reference is None:
            self.reference = None
        elif isinstance(reference, (list, tuple)) and all(np.ndim(m) == 1 for m in reference):
            if len(reference) != net.depth:
                raise ValueError(f"expected {net.depth} reference masks, got {len(reference)}")
            self.reference = [np.asarray(m, dtype=bool) for m in reference]
        else:
            self.reference = list(forward(net, reference).masks)
        self.params = [
            (torch.as_tensor(np.array(L.weights)), torch.as_tensor(np.array(L.bias)))
            for L in net.layers
        ]
        self._records = None

    # -- building blocks -------------------------------------------------

    def _ref(self, l):
        return None if self.reference is None else self.reference[l - 1]

    def layer_fn(self, l: int, y):
        torch = _torch()
        layer = self.net.layer(l)
        W, b = self.params[l - 1]
        z = W @ y + b
        if layer.activation == "relu":
            mask = _resolve_masks(layer, z.detach().numpy(), self.hinge_tol, self._ref(l))
            return z * torch.as_tensor(mask.astype(np.float64))
        if layer.activation == "softplus":
            beta = layer.beta
            return torch.logaddexp(torch.zeros_like(z), beta * z) / beta
        return z

    def _fingerprint(self, l, point):
        ref = None if self.reference is None else self.reference[l - 1:]
        trace = forward(self.net.suffix(l), point, self.hinge_tol, ref)
        return fingerprint(trace, 1).key

    def rel(self, l: int, a, top: bool = False):
        """Torch expression for ``R^l(a)``; ``a`` may carry a graph."""
        torch = _torch()
        n = self.net.depth
        if l == n + 1:
            onehot = torch.zeros_like(a)
            onehot[self.xi] = 1.0
            return a * onehot
        total = torch.zeros_like(a)
        for root in self.policy.roots(self, l, a):
            point = root.point
            if top and not self.allow_degenerate and torch.equal(point.detach(), a.detach()):
                raise RootUnavailable(
                    f"root equals the layer-{l} input; a root must differ from the point it explains"
                )
            if self._records is not None and top:
                self._record(l, a, root)
            y = point if point.requires_grad else point.detach().clone().requires_grad_(True)
            upper = self.rel(l + 1, self.layer_fn(l, y))
            target = upper.sum() if root.neuron is None else upper[root.neuron]
            if not target.requires_grad:
                continue
            (g,) = torch.autograd.grad(target, y, create_graph=True, allow_unused=True)
            if g is None:
                continue
            total = total + g * (a - point)
        return total

    def _record(self, l, a, root):
        a_np = a.detach().numpy()
        p = root.point.detach().numpy().copy()
        d = (a_np - p) if root.direction is None else root.direction.detach().numpy().copy()
        t = 1.0 if root.t is None else root.t
        residual = None
        if root.neuron is not None:
            layer = self.net.layer(l)
            residual = float(layer.weights[root.neuron] @ p + layer.bias[root.neuron])
        same = self._fingerprint(l, p) == self._fingerprint(l, a_np)
        self._records.append((RootPoint(l, root.neuron, p, d, float(t), residual), same))

    # -- numpy entry points ----------------------------------------------

    def _tensor(self, a, requires_grad=False):
        torch = _torch()
        return torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)

    def relevance(self, l: int, a) -> np.ndarray:
        """``R^l(a)`` as a numpy vector."""
        a = check_vector(a, self.net.layer(l).in_dim if l <= self.net.depth else self.net.output_dim)
        return self.rel(l, self._tensor(a), top=True).detach().numpy().copy()

    def root_entries(self, l: int, a) -> list:
        """``[(neuron, root)]`` chosen by the policy at layer ``l`` for input ``a``."""
        a = check_vector(a, self.net.layer(l).in_dim)
        return [
            (r.neuron, r.point.detach().numpy().copy())
            for r in self.policy.roots(self, l, self._tensor(a))
        ]

    def upstream_gradient(self, l: int, u, neurons=None) -> np.ndarray:
        """Gradient of ``sum_{m in neurons} R^{l+1}_m(f_l(u))`` with respect to ``u``."""
        y = self._tensor(check_vector(u, self.net.layer(l).in_dim), requires_grad=True)
        upper = self.rel(l + 1, self.layer_fn(l, y))
        if neurons is None:
            target = upper.sum()
        else:
            target = upper[list(np.atleast_1d(neurons))].sum()
        if not target.requires_grad:
            return np.zeros_like(u, dtype=np.float64)
        (g,) = _torch().autograd.grad(target, y, allow_unused=True)
        return np.zeros(len(u)) if g is None else g.numpy().copy()

    def relevance_jacobian(self, l: int, a) -> np.ndarray:
        """Jacobian of ``R^l`` at ``a`` through the full recursion."""
        torch = _torch()
        y = self._tensor(check_vector(a, self.net.layer(l).in_dim))
        jac = torch.autograd.functional.jacobian(lambda v: self.rel(l, v), y, create_graph=False)
        return jac.numpy().copy()

    def trace(self, x) -> RelevanceTrace:
        x = check_vector(x, self.net.input_dim)
        fwd = forward(self.net, x, self.hinge_tol, self.reference)
        per_layer = []
        self._records = []
        try:
            for l in range(1, self.net.depth + 2):
                if l > 1:
                    saved, self._records = self._records, None
                per_layer.append(self.relevance(l, fwd.inputs[l - 1]))
                if l > 1:
                    self._records = saved
            records = self._records
        finally:
            self._records = None
        return RelevanceTrace(
            tuple(per_layer),
            str(self.policy),
            self.xi,
            tuple(r for r, _ in records),
            "recursive",
            (),
            tuple(s for _, s in records),
        )


def relevance_recursive(net: Network, x, xi: int, policy, hinge_tol: float = HINGE_TOL,
                        allow_degenerate: bool = False, reference=None) -> RelevanceTrace:
    """Recursive DTD trace for input ``x``.

    ``policy`` is a :class:`RootPolicy` or anything :class:`RuleBased`
    accepts.  Hinge ties are resolved toward ``reference`` (default: ``x``).
    ``roots`` lists the roots used for ``R^1(x)`` and ``root_in_region``
    flags whether each root shares the fingerprint of the point it explains.
    """
    x = check_vector(x, net.input_dim)
    engine = RecursiveRelevance(
        net, xi, policy, hinge_tol, x if reference is None else reference, allow_degenerate
    )
    return engine.trace(x)


__all__ = [
    "ConstantPerRegion",
    "Custom",
    "RecursiveRelevance",
    "RootPolicy",
    "RuleBased",
    "as_policy",
    "relevance_recursive",
]
