"""Root-point search directions, explicit roots and closed-form propagation.

Every hyperplane rule moves the layer input ``a`` along a direction ``v``
until it meets a neuron's hyperplane (or, in the train-free model, until the
neuron's relevance ``R_j`` has been removed).  Substituting that root into the
first-order Taylor term gives the familiar per-layer rule
``R = sum_j (w_j * v_j) / (w_j . v_j) * R_j``.

LRP-0 and LRP-epsilon use the input itself as direction and divide by the
pre-activation (bias included), which is what makes LRP-0 coincide with
gradient x input on ReLU networks.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import DegenerateDenominator, OrthogonalDirection, ZeroRelevance

DENOMINATOR_TOL = 1e-12

HYPERPLANE_KINDS = ("w2", "zplus", "gamma")
KINDS = ("lrp0", "eps") + HYPERPLANE_KINDS


@dataclass(frozen=True)
class RuleKind:
    """A propagation rule; ``param`` holds epsilon or gamma where relevant."""

    kind: str
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        param = float(self.param)
        if self.kind == "eps" and not param > 0:
            raise ValueError("epsilon must be positive")
        if self.kind == "gamma" and not param >= 0:
            raise ValueError("gamma must be non-negative")
        if self.kind not in ("eps", "gamma"):
            param = 0.0
        object.__setattr__(self, "param", param)

    @property
    def hyperplane(self) -> bool:
        """Whether roots are sought on the neuron's hyperplane (conserving rules)."""
        return self.kind in HYPERPLANE_KINDS

    def __str__(self):
        if self.kind in ("eps", "gamma"):
            return f"{self.kind}:{self.param:g}"
        return self.kind


LRP0 = RuleKind("lrp0")
W2 = RuleKind("w2")
ZPLUS = RuleKind("zplus")


def epsilon(eps: float) -> RuleKind:
    return RuleKind("eps", eps)


def gamma(g: float) -> RuleKind:
    return RuleKind("gamma", g)


_RULE_RE = re.compile(r"^(lrp0|w2|zplus|eps:(?P<eps>\S+)|gamma:(?P<gamma>\S+)|ab:(?P<a>\S+):(?P<b>\S+))$")


def parse_rule(text) -> RuleKind:
    """Parse ``lrp0``, ``eps:<f>``, ``w2``, ``zplus``, ``gamma:<f>`` or ``ab:1:0``."""
    if isinstance(text, RuleKind):
        return text
    m = _RULE_RE.match(str(text).strip().lower())
    if m is None:
        raise ValueError(f"cannot parse rule {text!r}")
    try:
        if m.group("eps") is not None:
            return epsilon(float(m.group("eps")))
        if m.group("gamma") is not None:
            return gamma(float(m.group("gamma")))
        if m.group("a") is not None:
            if (float(m.group("a")), float(m.group("b"))) != (1.0, 0.0):
                raise ValueError("only the alpha=1, beta=0 rule is supported")
            return ZPLUS
    except ValueError as exc:
        raise ValueError(f"cannot parse rule {text!r}: {exc}") from None
    return RuleKind(m.group(1))


@dataclass(frozen=True, eq=False)
class RootPoint:
    """A Taylor root ``point = a - t * direction`` for one (layer, neuron).

    ``neuron`` is ``None`` for roots shared by a whole layer; ``residual`` is
    ``w_j . point + b_j`` and ``None`` when no single neuron is involved.
    """

    layer: int
    neuron: Optional[int]
    point: np.ndarray
    direction: np.ndarray
    t: float
    residual: Optional[float]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "neuron": self.neuron,
            "point": self.point.tolist(),
            "t": self.t,
            "residual": self.residual,
        }


def search_direction(rule: RuleKind, w_j, a) -> np.ndarray:
    w_j = np.asarray(w_j, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if w_j.shape != a.shape:
        raise ValueError(f"weight row {w_j.shape} and input {a.shape} differ in length")
    if rule.kind == "w2":
        return w_j.copy()
    if rule.kind == "zplus":
        return np.where(w_j >= 0, a, 0.0)
    if rule.kind == "gamma":
        return a * (1.0 + rule.param * (w_j >= 0))
    return a.copy()


def stabilized_denominator(rule: RuleKind, z):
    """Denominator used by LRP-0 / LRP-epsilon for pre-activation ``z``."""
    if rule.kind == "eps":
        return z + rule.param * np.where(z >= 0, 1.0, -1.0)
    return z


def lrp_denominator(rule: RuleKind, W, a, b):
    """LRP-0 / LRP-epsilon denominator for weight row(s) ``W`` and bias ``b``."""
    return stabilized_denominator(rule, W @ a + b)


def _root(rule, w_j, b_j, a, v, t, layer, neuron):
    point = a - t * v
    return RootPoint(layer, neuron, point, v, float(t), float(w_j @ point + b_j))


def find_root_linear(rule: RuleKind, w_j, b_j: float, a, *, layer: int = 0,
                     neuron: Optional[int] = None, tol: float = DENOMINATOR_TOL) -> RootPoint:
    """Root on the line ``a - t v`` that removes the whole pre-activation.

    Hyperplane rules land on ``w_j . x + b_j = 0``.  LRP-0 lands on the origin
    (``t = 1``); LRP-epsilon stops slightly short of it.
    """
    a = np.asarray(a, dtype=np.float64)
    w_j = np.asarray(w_j, dtype=np.float64)
    v = search_direction(rule, w_j, a)
    z = float(w_j @ a + b_j)
    if rule.hyperplane:
        denom = float(w_j @ v)
        if abs(denom) < tol:
            raise OrthogonalDirection(f"direction is orthogonal to w (w.v = {denom:g})")
    else:
        denom = float(lrp_denominator(rule, w_j, a, b_j))
    if z == 0.0:
        raise ZeroRelevance("input already lies on the neuron's hyperplane")
    if abs(denom) < tol:
        raise DegenerateDenominator(f"denominator {denom:g} vanished")
    return _root(rule, w_j, b_j, a, v, z / denom, layer, neuron)


def find_root_train_free(rule: RuleKind, w_j, b_j: float, a, relevance: float, *,
                         layer: int = 0, neuron: Optional[int] = None,
                         tol: float = DENOMINATOR_TOL) -> RootPoint:
    """Root that removes exactly the upstream relevance ``relevance`` of neuron j.

    For hyperplane rules ``w_j . (a - root) == relevance``.  For LRP-0/epsilon
    the step is ``relevance / z_j`` along ``a``, so with ``relevance == z_j``
    the LRP-0 root is the origin.
    """
    a = np.asarray(a, dtype=np.float64)
    w_j = np.asarray(w_j, dtype=np.float64)
    v = search_direction(rule, w_j, a)
    if rule.hyperplane:
        denom = float(w_j @ v)
        if abs(denom) < tol:
            raise OrthogonalDirection(f"direction is orthogonal to w (w.v = {denom:g})")
    else:
        denom = float(lrp_denominator(rule, w_j, a, b_j))
    if relevance == 0.0:
        raise ZeroRelevance("neuron carries no relevance")
    if abs(denom) < tol:
        raise DegenerateDenominator(f"denominator {denom:g} vanished")
    return _root(rule, w_j, b_j, a, v, relevance / denom, layer, neuron)


def direction_matrix(rule: RuleKind, W, a) -> np.ndarray:
    """Row ``j`` is ``search_direction(rule, W[j], a)``."""
    W = np.asarray(W, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if rule.kind == "w2":
        return W.copy()
    if rule.kind == "zplus":
        return np.where(W >= 0, a[None, :], 0.0)
    if rule.kind == "gamma":
        return a[None, :] * (1.0 + rule.param * (W >= 0))
    return np.broadcast_to(a, W.shape).copy()


def propagate_closed_form(rule: RuleKind, W, b, a, R_upper, tol: float = DENOMINATOR_TOL) -> np.ndarray:
    """Layer relevance ``R^l`` from ``R^{l+1}`` without constructing roots.

    Neurons with zero relevance contribute nothing, as do hyperplane-rule
    neurons whose direction is orthogonal to their weights.  For LRP-0 a
    vanishing pre-activation with non-zero relevance is an error.
    """
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    R_upper = np.asarray(R_upper, dtype=np.float64)
    if W.shape != (R_upper.shape[0], a.shape[0]) or b.shape != R_upper.shape:
        raise ValueError(
            f"shapes do not chain: W {W.shape}, b {b.shape}, a {a.shape}, R {R_upper.shape}"
        )
    V = direction_matrix(rule, W, a)
    contrib = W * V
    if rule.hyperplane:
        denom = contrib.sum(axis=1)
        valid = (R_upper != 0) & (np.abs(denom) >= tol)
    else:
        denom = lrp_denominator(rule, W, a, b)
        valid = R_upper != 0
        bad = valid & (np.abs(denom) < tol)
        if np.any(bad):
            raise DegenerateDenominator(
                f"pre-activation vanished for relevant neurons {np.flatnonzero(bad).tolist()}"
            )
    scale = np.zeros_like(R_upper)
    scale[valid] = R_upper[valid] / denom[valid]
    return contrib.T @ scale
