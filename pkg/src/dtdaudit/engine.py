"""End-to-end relevance computation.

``relevance_train_free`` follows the train-free model: upstream relevances
are computed at the actual activations and each neuron gets its own root.
``relevance_recursive`` (see :mod:`dtdaudit.recursive`) applies the Taylor
step recursively with exact nested differentiation.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import rules as _rules
from .exceptions import OrthogonalDirection, ZeroRelevance
from .network import Network, _check_class, check_vector, forward
from .rules import RootPoint, RuleKind, parse_rule

RuleSpec = Union[str, RuleKind, Sequence[Union[str, RuleKind]]]


class DegenerateSaliencyWarning(RuntimeWarning):
    """Min-max normalization was requested for a constant relevance map."""


def rules_per_layer(rule: RuleSpec, depth: int) -> tuple:
    """Expand a single rule or a per-layer list (layer 1 first) to ``depth`` rules."""
    if isinstance(rule, (str, RuleKind)):
        return (parse_rule(rule),) * depth
    expanded = tuple(parse_rule(r) for r in rule)
    if len(expanded) != depth:
        raise ValueError(f"got {len(expanded)} rules for a network of depth {depth}")
    return expanded


def rule_label(rule) -> str:
    if isinstance(rule, tuple):
        if len(set(rule)) == 1:
            return str(rule[0])
        return ",".join(str(r) for r in rule)
    return str(rule)


@dataclass(frozen=True, eq=False)
class RelevanceTrace:
    """Per-layer relevances ``R^1..R^{n+1}`` plus the roots that produced them."""

    per_layer: tuple
    rule: object
    class_index: int
    roots: tuple
    algorithm: str
    skipped: tuple = ()
    root_in_region: tuple = field(default=())

    def relevance(self, l: int) -> np.ndarray:
        if not 1 <= l <= len(self.per_layer):
            raise IndexError(f"layer {l} outside 1..{len(self.per_layer)}")
        return self.per_layer[l - 1]

    @property
    def input_relevance(self) -> np.ndarray:
        return self.per_layer[0]

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "rule": rule_label(self.rule),
            "class": self.class_index,
            "relevances": [r.tolist() for r in self.per_layer],
            "roots": [
                {k: v for k, v in root.to_dict().items()} for root in self.roots
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def relevance_train_free(net: Network, x, xi: int, rule: RuleSpec) -> RelevanceTrace:
    """Train-free DTD with explicit per-neuron roots.

    Neurons with zero relevance, and hyperplane-rule neurons whose direction
    is orthogonal to their weights, are skipped and listed in ``skipped``.
    """
    xi = _check_class(net, xi)
    layer_rules = rules_per_layer(rule, net.depth)
    trace = forward(net, check_vector(x, net.input_dim))
    R = np.zeros(net.output_dim)
    R[xi] = trace.output[xi]
    per_layer = [R]
    roots, skipped = [], []
    for l in range(net.depth, 0, -1):
        layer = net.layer(l)
        a = trace.inputs[l - 1]
        R_lower = np.zeros(layer.in_dim)
        for j in range(layer.out_dim):
            try:
                root = _rules.find_root_train_free(
                    layer_rules[l - 1], layer.weights[j], layer.bias[j], a, R[j],
                    layer=l, neuron=j,
                )
            except ZeroRelevance:
                skipped.append((l, j, "zero_relevance"))
                continue
            except OrthogonalDirection:
                skipped.append((l, j, "orthogonal_direction"))
                continue
            roots.append(root)
            # gradient of the affine pre-activation w.r.t. the root is w_j
            R_lower += layer.weights[j] * (a - root.point)
        R = R_lower
        per_layer.append(R)
    return RelevanceTrace(
        tuple(reversed(per_layer)), layer_rules, xi, tuple(roots), "train_free", tuple(skipped)
    )


def saliency(trace: RelevanceTrace, normalize: bool = False) -> np.ndarray:
    """Input relevance ``R^1``, optionally min-max scaled to ``[0, 1]``.

    A constant map cannot be scaled; zeros are returned and a
    :class:`DegenerateSaliencyWarning` is emitted.
    """
    r = np.array(trace.input_relevance, dtype=np.float64)
    if not normalize:
        return r
    lo, hi = r.min(), r.max()
    if hi - lo <= 0:
        warnings.warn("constant relevance map; normalized saliency set to zero",
                      DegenerateSaliencyWarning, stacklevel=2)
        return np.zeros_like(r)
    return (r - lo) / (hi - lo)


def relevance_at_layer(net: Network, x, xi: int, rule: RuleSpec, l: int) -> np.ndarray:
    """``R^l`` of the train-free trace, ``1 <= l <= n+1``."""
    if not 1 <= l <= net.depth + 1:
        raise IndexError(f"layer {l} outside 1..{net.depth + 1}")
    return relevance_train_free(net, x, xi, rule).relevance(l)


def relevance_closed_form(net: Network, x, xi: int, rule: RuleSpec) -> tuple:
    """Per-layer relevances from :func:`propagate_closed_form` alone (no roots)."""
    xi = _check_class(net, xi)
    layer_rules = rules_per_layer(rule, net.depth)
    trace = forward(net, x)
    R = np.zeros(net.output_dim)
    R[xi] = trace.output[xi]
    per_layer = [R]
    for l in range(net.depth, 0, -1):
        layer = net.layer(l)
        R = _rules.propagate_closed_form(
            layer_rules[l - 1], layer.weights, layer.bias, trace.inputs[l - 1], R
        )
        per_layer.append(R)
    return tuple(reversed(per_layer))


def relevance_recursive(net, x, xi, policy, **kwargs) -> RelevanceTrace:
    """Recursive DTD; see :func:`dtdaudit.recursive.relevance_recursive`."""
    from .recursive import relevance_recursive as _impl

    return _impl(net, x, xi, policy, **kwargs)


__all__ = [
    "DegenerateSaliencyWarning",
    "RelevanceTrace",
    "RootPoint",
    "relevance_at_layer",
    "relevance_closed_form",
    "relevance_recursive",
    "relevance_train_free",
    "rules_per_layer",
    "saliency",
]
