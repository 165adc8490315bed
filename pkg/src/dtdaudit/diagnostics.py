"""Checks of the assumptions DTD relies on.

Roots must stay inside the linear region of the point they explain, the
recursive relevance collapses to gradient x input for locally constant roots,
input-dependent roots add a root-Jacobian term, and smooth activations add
higher-order terms.  Each check here measures one of these numerically.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import DegenerateSaliencyWarning, relevance_train_free, saliency
from .exceptions import (
    BoundaryProximity,
    RootUnavailable,
    SamplerExhausted,
    UnreachableTarget,
)
from .network import (
    LayerSpec,
    Network,
    _check_class,
    _resolve_masks,
    backprop,
    check_vector,
    fingerprint,
    forward,
    gradient,
    hinge_margin,
)
from .recursive import HINGE_TOL, ConstantPerRegion, RecursiveRelevance
from .rules import RootPoint, RuleKind, parse_rule

GRAD_TOL = 1e-6
OUT_TOL = 1e-9


@dataclass(frozen=True)
class RegionCheckResult:
    same_gradient: bool
    gradient_gap: float
    same_fingerprint: bool
    same_output: bool
    output_gap: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_root_region(net: Network, x, root: RootPoint, from_layer: Optional[int] = None,
                      xi: int = 0, grad_tol: float = GRAD_TOL, out_tol: float = OUT_TOL,
                      hinge_tol: float = HINGE_TOL) -> RegionCheckResult:
    """Compare the suffix network ``f_n o ... o f_l`` at ``a_l`` and at the root.

    Hinge ties at the root resolve to the activity pattern of ``x``.
    """
    l = root.layer if from_layer is None else from_layer
    if root.layer != l:
        raise ValueError(f"root belongs to layer {root.layer}, not {l}")
    xi = _check_class(net, xi)
    return _region_check(net, forward(net, x), root, xi, grad_tol, out_tol, hinge_tol, {})


def _region_check(net, trace, root, xi, grad_tol, out_tol, hinge_tol, cache):
    l = root.layer
    if l not in cache:
        suffix = net.suffix(l)
        at_a = gradient(suffix, trace.inputs[l - 1], xi, 1)
        cache[l] = (suffix, at_a, fingerprint(trace, l).patterns)
    suffix, at_a, patterns = cache[l]
    ref = trace.masks[l - 1:]
    root_trace = forward(suffix, root.point, hinge_tol, ref)
    g_root = backprop(suffix, root_trace, xi, 1)
    grad_gap = float(np.max(np.abs(at_a.gradient - g_root)))
    same_fp = all(np.array_equal(p, q) for p, q in zip(root_trace.masks, patterns))
    out_gap = abs(at_a.value - float(root_trace.output[xi]))
    return RegionCheckResult(grad_gap <= grad_tol, grad_gap, bool(same_fp), out_gap <= out_tol, out_gap)


def sample_inputs(net: Network, n_samples: int, min_output: float = 0.1, seed: int = 0,
                  xi: int = 0, rng: Optional[np.random.Generator] = None) -> list:
    """Standard-normal inputs with ``f_xi(x) > min_output``, by rejection."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    xi = _check_class(net, xi)
    rng = np.random.default_rng(seed) if rng is None else rng
    accepted = []
    for _ in range(100 * n_samples):
        x = rng.standard_normal(net.input_dim)
        if forward(net, x).output[xi] > min_output:
            accepted.append(x)
            if len(accepted) == n_samples:
                return accepted
    raise SamplerExhausted(
        f"only {len(accepted)} of {n_samples} inputs exceeded {min_output} in {100 * n_samples} draws"
    )


@dataclass(frozen=True)
class Table1Report:
    """Fractions of train-free roots that stay in region / keep the output.

    The first five fields form the CSV row; the rest are extra diagnostics.
    """

    rule: RuleKind
    samples: int
    frac_same_region: float
    frac_same_output: float
    seed: int
    n_roots: int = 0
    frac_same_fingerprint: float = 0.0
    frac_samples_all_in_region: float = 0.0
    frac_negative_roots: float = 0.0
    nesting_violations: int = 0

    def __post_init__(self):
        if self.samples <= 0:
            raise ValueError("samples must be positive")
        for name in ("frac_same_region", "frac_same_output", "frac_same_fingerprint",
                     "frac_samples_all_in_region", "frac_negative_roots"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    def row(self) -> list:
        return [str(self.rule), self.samples, self.frac_same_region, self.frac_same_output, self.seed]


def _nesting_ok(net, trace, root, xi, hinge_tol):
    """A root valid for the suffix from layer l stays valid for every shorter suffix."""
    l = root.layer
    ref = trace.masks[l - 1:]
    root_trace = forward(net.suffix(l), root.point, hinge_tol, ref)
    for m in range(l + 1, net.depth + 1):
        point = root_trace.inputs[m - l]
        g_root = gradient(net.suffix(m), point, xi, 1, hinge_tol, trace.masks[m - 1:]).gradient
        g_a = gradient(net.suffix(m), trace.inputs[m - 1], xi, 1).gradient
        if np.max(np.abs(g_root - g_a)) > 1e-12:
            return False
    return True


def run_table1(net: Network, rules: Sequence, n_samples: int = 1000, min_output: float = 0.1,
               seed: int = 0, xi: int = 0, grad_tol: float = GRAD_TOL, out_tol: float = OUT_TOL,
               hinge_tol: float = HINGE_TOL, inputs: Optional[Sequence] = None) -> list:
    """Check every train-free root of every sampled input, per rule.

    Fractions are taken over roots (neurons with non-zero relevance).  One
    input set is drawn from ``seed`` and shared by all rules.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    xs = sample_inputs(net, n_samples, min_output, seed, xi) if inputs is None else list(inputs)
    traces = [forward(net, x) for x in xs]
    reports = []
    for rule in rules:
        rule = parse_rule(rule)
        n_roots = same_region = same_output = same_fp = negative = all_in = violations = 0
        n_relu_input_roots = 0
        for x, trace in zip(xs, traces):
            rt = relevance_train_free(net, x, xi, rule)
            sample_ok = True
            cache = {}
            for root in rt.roots:
                res = _region_check(net, trace, root, xi, grad_tol, out_tol, hinge_tol, cache)
                n_roots += 1
                same_region += res.same_gradient
                same_output += res.same_output
                same_fp += res.same_fingerprint
                sample_ok &= res.same_gradient
                if root.layer > 1 and net.layer(root.layer - 1).activation == "relu":
                    n_relu_input_roots += 1
                    negative += bool(np.min(root.point) < 0)
                if res.same_fingerprint and not _nesting_ok(net, trace, root, xi, hinge_tol):
                    violations += 1
            all_in += sample_ok
        denom = max(n_roots, 1)
        reports.append(Table1Report(
            rule, len(xs), same_region / denom, same_output / denom, seed,
            n_roots, same_fp / denom, all_in / len(xs),
            negative / max(n_relu_input_roots, 1), violations,
        ))
    return reports


def verify_prop2(net: Network, x, xi: int, policy: ConstantPerRegion,
                 hinge_tol: float = HINGE_TOL) -> float:
    """L-inf gap between ``R(x)`` and ``R(x~) + grad f_xi(x) * (x - x~)``.

    ``x~`` is the policy's first-layer root for ``x``.  A root equal to ``x``
    raises :class:`RootUnavailable`.
    """
    if not isinstance(policy, ConstantPerRegion):
        raise TypeError("verify_prop2 needs a ConstantPerRegion policy")
    x = check_vector(x, net.input_dim)
    engine = RecursiveRelevance(net, xi, policy, hinge_tol, reference=x)
    R_x = engine.relevance(1, x)
    (_, root), = engine.root_entries(1, x)
    at_root = RecursiveRelevance(net, xi, policy, hinge_tol, reference=x, allow_degenerate=True)
    R_root = at_root.relevance(1, root)
    grad = gradient(net, x, xi).gradient
    return float(np.max(np.abs(R_x - (R_root + grad * (x - root)))))


def _layer_output(layer: LayerSpec, a, hinge_tol, ref):
    z = layer.preactivation(a)
    mask = _resolve_masks(layer, z, hinge_tol, ref)
    return layer.activate(z, mask), layer.derivative(z, mask)[:, None] * layer.weights


def verify_prop3(net: Network, x, xi: int, l: int, policy, fd_step: float = 1e-5,
                 margin: float = 1e-4, ablate: bool = False,
                 hinge_tol: float = HINGE_TOL, fd_tol: float = 1e-5) -> float:
    """L-inf gap between ``R^{l-1}`` and its chain-rule expansion.

    The expansion uses the exact Jacobian of ``f_{l-1}`` at each lower root,
    exact upstream gradients at each upper root and a central-difference
    Jacobian of the layer-``l`` root function.  The higher-order term is
    omitted, which is exact for ReLU networks.  ``ablate=True`` drops the
    root-Jacobian term, as does a :class:`ConstantPerRegion` policy.

    The expansion is also assembled with half the step; if the two disagree
    by more than ``fd_tol`` the difference quotient is not trustworthy here
    and :class:`BoundaryProximity` is raised.
    """
    if not 2 <= l <= net.depth:
        raise IndexError(f"l must lie in 2..{net.depth}")
    x = check_vector(x, net.input_dim)
    trace = forward(net, x)
    if hinge_margin(trace, net) < margin:
        raise BoundaryProximity(f"a pre-activation lies within {margin:g} of a hinge")
    engine = RecursiveRelevance(net, xi, policy, hinge_tol, reference=x)
    ref = engine.reference
    a_prev = trace.inputs[l - 2]
    direct = engine.relevance(l - 1, a_prev)
    lower = net.layer(l - 1)
    assembled = np.zeros_like(a_prev)
    check = np.zeros_like(a_prev)
    for k, r_k in engine.root_entries(l - 1, a_prev):
        b, J = _layer_output(lower, r_k, hinge_tol, None if ref is None else ref[l - 2])
        K = np.ones(len(b), dtype=bool) if k is None else np.eye(len(b), dtype=bool)[k]
        grad_b = np.zeros_like(b)
        needed = []
        for m, u_m in engine.root_entries(l, b):
            g = engine.upstream_gradient(l, u_m, m) * K
            if np.any(g != 0):
                grad_b += g
                needed.append((m, u_m, g))
        grad_half = grad_b.copy()
        # a constant-per-region root has zero Jacobian inside its region
        if not ablate and needed and not isinstance(policy, ConstantPerRegion):
            jac = _root_jacobian(engine, l, b, needed, fd_step, hinge_tol)
            jac_half = _root_jacobian(engine, l, b, needed, fd_step / 2, hinge_tol)
            for (_, _, g), J_m, J_h in zip(needed, jac, jac_half):
                grad_b -= J_m.T @ g
                grad_half -= J_h.T @ g
        assembled += (J.T @ grad_b) * (a_prev - r_k)
        check += (J.T @ grad_half) * (a_prev - r_k)
    if np.max(np.abs(assembled - check)) > fd_tol:
        raise BoundaryProximity("finite-difference root Jacobian has not converged at this step")
    return float(np.max(np.abs(assembled - direct)))


def _root_jacobian(engine, l, b, needed, step, hinge_tol):
    """Central-difference Jacobians of the roots of the listed neurons at ``b``."""
    ref = None if engine.reference is None else engine.reference[l - 1:]
    suffix = engine.net.suffix(l)

    def key(u):
        return fingerprint(forward(suffix, u, hinge_tol, ref), 1).key

    keys = [key(u) for _, u, _ in needed]
    jac = [np.zeros((len(b), len(b))) for _ in needed]
    for i in range(len(b)):
        e = np.zeros_like(b)
        e[i] = step
        try:
            plus = dict(engine.root_entries(l, b + e))
            minus = dict(engine.root_entries(l, b - e))
        except RootUnavailable:
            raise BoundaryProximity("the stencil leaves the region the policy covers") from None
        for idx, (m, _, _) in enumerate(needed):
            if m not in plus or m not in minus:
                raise BoundaryProximity("a root disappears within the stencil")
            if key(plus[m]) != keys[idx] or key(minus[m]) != keys[idx]:
                raise BoundaryProximity("a root crosses a region boundary within the stencil")
            jac[idx][:, i] = (plus[m] - minus[m]) / (2.0 * step)
    return jac


def forge_relevance(layer, x, r, neuron: Optional[int] = None):
    """Root that makes the relevance of one active neuron proportional to ``r``.

    ``x~ = x - (h / sum r) * (r / w)`` so that ``w * (x - x~) = (h / sum r) r``
    and ``w . x~ + b = 0``.  Returns ``(RootPoint, achieved)``.
    """
    if isinstance(layer, Network):
        if layer.depth != 1:
            raise ValueError("forging needs a one-layer network")
        layer = layer.layer(1)
    x = check_vector(x, layer.in_dim)
    r = check_vector(r, layer.in_dim, "r")
    h_all = layer.preactivation(x)
    if neuron is None:
        active = np.flatnonzero(h_all > 0)
        if layer.out_dim == 1:
            neuron = 0
        elif len(active) == 1:
            neuron = int(active[0])
        else:
            raise ValueError("neuron must be given unless exactly one neuron is active")
    w = layer.weights[neuron]
    h = float(h_all[neuron])
    total = float(np.sum(r))
    if not h > 0:
        raise UnreachableTarget(f"neuron {neuron} is not active (h = {h:g})")
    if total == 0.0:
        raise UnreachableTarget("target relevance sums to zero")
    if np.any(w == 0):
        raise UnreachableTarget("a zero weight cannot carry relevance")
    direction = r / w
    t = h / total
    point = x - t * direction
    root = RootPoint(1, neuron, point, direction, t, float(w @ point + layer.bias[neuron]))
    return root, w * (x - point)


def _minmax(v):
    lo, hi = np.min(v), np.max(v)
    if hi - lo <= 0:
        return None
    return (v - lo) / (hi - lo)


def _cosine(u, v):
    if u is None or v is None:
        return np.nan
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return np.nan
    return float(u @ v / (nu * nv))


@dataclass(frozen=True, eq=False)
class ClassSimilarity:
    """Pairwise comparison of normalized saliency maps across classes.

    Missing entries (constant maps) are NaN.
    """

    classes: tuple
    cosine: np.ndarray
    mean_abs_diff: np.ndarray
    randomized_cosine: Optional[np.ndarray] = None
    maps: tuple = field(default=(), repr=False)

    @property
    def median_cosine(self) -> float:
        iu = np.triu_indices(len(self.classes), 1)
        vals = self.cosine[iu]
        vals = vals[~np.isnan(vals)]
        return float(np.median(vals)) if vals.size else float("nan")

    @property
    def median_randomized(self) -> float:
        if self.randomized_cosine is None:
            return float("nan")
        vals = self.randomized_cosine[~np.isnan(self.randomized_cosine)]
        return float(np.median(vals)) if vals.size else float("nan")

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in np.atleast_2d(a)]

        out = {
            "classes": list(self.classes),
            "cosine": clean(self.cosine),
            "mean_abs_diff": clean(self.mean_abs_diff),
        }
        if self.randomized_cosine is not None:
            out["randomized_cosine"] = clean(self.randomized_cosine)[0]
        return out


def _normalized_maps(net, x, rule, classes):
    maps = []
    for c in classes:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateSaliencyWarning)
            maps.append(_minmax(saliency(relevance_train_free(net, x, c, rule))))
    return maps


def rerandomize_last_layer(net: Network, seed: int) -> Network:
    """Copy of ``net`` with fresh N(0, 1/fan_in) weights in the last layer."""
    last = net.layer(net.depth)
    rng = np.random.default_rng(seed)
    W = rng.standard_normal(last.weights.shape) / np.sqrt(last.in_dim)
    return net.replace_layer(net.depth, LayerSpec(W, np.array(last.bias), last.activation, last.beta))


def class_insensitivity(net: Network, x, rule, classes: Optional[Sequence[int]] = None,
                        rerandomize_seed: Optional[int] = None) -> ClassSimilarity:
    """Cosine and mean-absolute-difference of min-max scaled saliency maps.

    With ``rerandomize_seed`` each class map is also compared with the map
    obtained after redrawing the last layer's weights.
    """
    if classes is None:
        classes = range(net.output_dim)
    classes = tuple(_check_class(net, c) for c in classes)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    rule = parse_rule(rule)
    maps = _normalized_maps(net, x, rule, classes)
    k = len(classes)
    cos = np.full((k, k), np.nan)
    mad = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(k):
            cos[i, j] = _cosine(maps[i], maps[j])
            if maps[i] is not None and maps[j] is not None:
                mad[i, j] = float(np.mean(np.abs(maps[i] - maps[j])))
    randomized = None
    if rerandomize_seed is not None:
        other = _normalized_maps(rerandomize_last_layer(net, rerandomize_seed), x, rule, classes)
        randomized = np.array([_cosine(a, b) for a, b in zip(maps, other)])
    return ClassSimilarity(classes, cos, mad, randomized, tuple(maps))


def higher_order_term(net: Network, x, xi: int, l: int, root, step: float = 1e-5,
                      policy=None, neuron: Optional[int] = None, margin: float = 1e-4,
                      hinge_tol: float = HINGE_TOL) -> float:
    """Magnitude of the derivative of the root-evaluated gradient, contracted with ``a_l - root``.

    The gradient is that of the suffix network output ``xi`` with respect to
    ``a_l`` (or, with ``policy``, of the upstream relevance ``R^{l+1}``).  Its
    derivative at the root is taken by central differences of exact
    gradients.  ReLU stencils that change an activation pattern raise
    :class:`BoundaryProximity`.
    """
    xi = _check_class(net, xi)
    x = check_vector(x, net.input_dim)
    trace = forward(net, x)
    a = trace.inputs[l - 1]
    point = root.point if isinstance(root, RootPoint) else check_vector(root, len(a), "root")
    suffix = net.suffix(l)
    relu = any(L.activation == "relu" for L in suffix.layers)
    ref = trace.masks[l - 1:]
    if policy is None:
        def grad_at(y):
            return gradient(suffix, y, xi, 1, hinge_tol, ref).gradient
    else:
        engine = RecursiveRelevance(net, xi, policy, hinge_tol, reference=x)

        def grad_at(y):
            return engine.upstream_gradient(l, y, neuron)
    if relu:
        center = forward(suffix, point, hinge_tol, ref)
        if hinge_margin(center, suffix) < margin:
            raise BoundaryProximity(f"root lies within {margin:g} of a hinge")
        key = fingerprint(center, 1).key
    H = np.zeros((len(a), len(a)))
    for k in range(len(a)):
        e = np.zeros_like(point)
        e[k] = step
        if relu:
            for y in (point + e, point - e):
                if fingerprint(forward(suffix, y, hinge_tol, ref), 1).key != key:
                    raise BoundaryProximity("finite-difference stencil crosses a hinge")
        H[:, k] = (grad_at(point + e) - grad_at(point - e)) / (2.0 * step)
    return float(np.max(np.abs(H @ (a - point))))


def bias_counterexample(dim: int = 2) -> tuple:
    """Network with all biases ``-1`` where the origin is not a usable root.

    ``f(0) = 0``, yet every unit is dead at the origin so its gradient is zero
    while the gradient at a positive input is not.  Returns
    ``(net, x, RegionCheckResult)`` for the root ``0``.
    """
    net = Network((
        LayerSpec(np.eye(dim), -np.ones(dim), "relu"),
        LayerSpec(np.ones((1, dim)), -np.ones(1), "relu"),
    ))
    x = np.full(dim, 2.0)
    root = RootPoint(1, None, np.zeros(dim), x.copy(), 1.0, None)
    return net, x, check_root_region(net, x, root)


__all__ = [
    "ClassSimilarity",
    "RegionCheckResult",
    "Table1Report",
    "bias_counterexample",
    "check_root_region",
    "class_insensitivity",
    "forge_relevance",
    "higher_order_term",
    "rerandomize_last_layer",
    "run_table1",
    "sample_inputs",
    "verify_prop2",
    "verify_prop3",
]
