"""Seeded network generation, input sampling and the verification suite."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import diagnostics as dg
from .engine import relevance_closed_form, relevance_train_free
from .exceptions import BoundaryProximity, RootUnavailable
from .network import LayerSpec, Network, forward, gradient, hinge_margin
from .recursive import ConstantPerRegion, RuleBased, relevance_recursive
from .rules import parse_rule

BIAS_MODES = ("nonpositive", "unrestricted", "zero")
TABLE1_RULES = ("lrp0", "gamma:1", "w2", "zplus")
ALL_RULES = ("lrp0", "eps:0.01", "w2", "zplus", "gamma:1")
INIT_NOTE = "weights N(0,1)/sqrt(fan_in); biases N(0,1)/sqrt(fan_in), -|b| when non-positive; inputs N(0,I)"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 10
    dims: tuple = (10, 10, 10, 10)
    bias_mode: str = "nonpositive"
    rules: tuple = TABLE1_RULES
    n_samples: int = 1000
    min_output: float = 0.1
    tol_gradient: float = 1e-6
    tol_output: float = 1e-9
    fd_step: float = 1e-5
    xi: int = 0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "rules", tuple(str(parse_rule(r)) for r in self.rules))
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError("dims needs at least two positive widths")
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias_mode must be one of {BIAS_MODES}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.min_output < 0:
            raise ValueError("min_output must be non-negative")
        for name in ("tol_gradient", "tol_output", "fd_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.xi < self.dims[-1]:
            raise ValueError("xi outside the output dimension")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["rules"] = list(self.rules)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _streams(seed: int):
    net_seq, input_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(net_seq), np.random.default_rng(input_seq)


def random_network(dims: Sequence[int], rng: np.random.Generator, bias_mode: str = "nonpositive",
                   activation: str = "relu", beta: float = 1.0) -> Network:
    """Dense network with N(0, 1/fan_in) weights and biases."""
    if bias_mode not in BIAS_MODES:
        raise ValueError(f"bias_mode must be one of {BIAS_MODES}")
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        W = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        b = rng.standard_normal(d_out) / np.sqrt(d_in)
        if bias_mode == "nonpositive":
            b = -np.abs(b)
        elif bias_mode == "zero":
            b = np.zeros(d_out)
        layers.append(LayerSpec(W, b, activation, beta))
    return Network(tuple(layers))


def generate_network(config: ExperimentConfig) -> Network:
    return random_network(config.dims, _streams(config.seed)[0], config.bias_mode, config.activation)


def sample_inputs(net: Network, config: ExperimentConfig) -> list:
    """Rejection sample ``config.n_samples`` inputs with ``f_xi > min_output``."""
    return dg.sample_inputs(net, config.n_samples, config.min_output, xi=config.xi,
                            rng=_streams(config.seed)[1])


def table1(config: ExperimentConfig, net: Optional[Network] = None) -> list:
    net = generate_network(config) if net is None else net
    xs = sample_inputs(net, config)
    return dg.run_table1(net, config.rules, len(xs), config.min_output, config.seed, config.xi,
                         config.tol_gradient, config.tol_output, inputs=xs)


# -- verification suite -----------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict
    tolerance: dict
    trials: int
    seconds: float = 0.0
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _positive_input(net, rng, xi=0, min_output=0.1, dist="normal", tries=10000):
    draw = {
        "normal": lambda: rng.standard_normal(net.input_dim),
        "folded": lambda: np.abs(rng.standard_normal(net.input_dim)),
        "uniform": lambda: rng.uniform(0, 1, net.input_dim),
    }[dist]
    for _ in range(tries):
        x = draw()
        if forward(net, x).output[xi] > min_output:
            return x
    return None


def check_closed_form(rng, trials, dims=(10, 10, 10, 10)):
    worst = 0.0
    cons = 0.0
    done = 0
    while done < trials:
        # inputs with a zero logit would make every comparison trivially exact;
        # z+ is only conservative on nonnegative inputs, as in hidden layers
        net = random_network(dims, rng, "nonpositive")
        x = _positive_input(net, rng, min_output=0.0, dist="folded", tries=200)
        if x is None:
            continue
        done += 1
        for rule in ALL_RULES:
            tf = relevance_train_free(net, x, 0, rule).per_layer
            cf = relevance_closed_form(net, x, 0, rule)
            worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(tf, cf)))
            if parse_rule(rule).hyperplane:
                top = tf[-1].sum()
                sums = np.array([r.sum() for r in tf])
                cons = max(cons, float(np.max(np.abs(sums - top)) / (1 + abs(top))))
    return {"closed_form_gap": worst, "conservation_gap": cons}


def check_grad_x_input(rng, trials, dims=(10, 10, 10, 10)):
    worst = 0.0
    done = 0
    while done < trials:
        net = random_network(dims, rng, "nonpositive")
        x = _positive_input(net, rng)
        if x is None:
            continue
        done += 1
        R = relevance_train_free(net, x, 0, "lrp0").input_relevance
        worst = max(worst, float(np.max(np.abs(R - gradient(net, x, 0).gradient * x))))
    return {"gap": worst}


def check_prop2(rng, trials, dims=(6, 6, 6, 3)):
    zero_root = perturbed = 0.0
    done = 0
    while done < trials:
        net = random_network(dims, rng, "zero")
        x = _positive_input(net, rng, min_output=0.0)
        if x is None or hinge_margin(forward(net, x), net) < 1e-3:
            continue
        policy = ConstantPerRegion.for_input(net, x, 0)
        R = relevance_recursive(net, x, 0, policy).input_relevance
        zero_root = max(zero_root, float(np.max(np.abs(R - gradient(net, x, 0).gradient * x))))
        trace = forward(net, x)
        scale = rng.uniform(0.5, 1.5)
        try:
            policy = ConstantPerRegion.for_input(net, x, lambda l: trace.inputs[l - 1] * scale)
        except RootUnavailable:
            continue
        perturbed = max(perturbed, dg.verify_prop2(net, x, 0, policy))
        done += 1
    return {"zero_root_gap": zero_root, "constant_root_gap": perturbed}


def check_prop3(rng, trials, dims=(6, 5, 3), fd_step=1e-5):
    gaps, ablated = [], []
    while len(gaps) < trials:
        net = random_network(dims, rng, "nonpositive")
        x = _positive_input(net, rng)
        if x is None:
            continue
        try:
            gaps.append(dg.verify_prop3(net, x, 0, 2, RuleBased("zplus"), fd_step=fd_step))
            ablated.append(dg.verify_prop3(net, x, 0, 2, RuleBased("zplus"), fd_step=fd_step, ablate=True))
        except BoundaryProximity:
            continue
    return {"max_gap": max(gaps), "median_ablated_gap": float(np.median(ablated))}


def check_prop4(rng, trials, dims=(6, 6, 3)):
    relu, soft = [], []
    while len(relu) < trials:
        net = random_network(dims, rng, "unrestricted")
        x = rng.standard_normal(net.input_dim)
        root = x * rng.uniform(0.9, 0.99)
        try:
            relu.append(dg.higher_order_term(net, x, 0, 1, root))
        except BoundaryProximity:
            continue
    while len(soft) < trials:
        net = random_network(dims, rng, "unrestricted", "softplus")
        x = rng.standard_normal(net.input_dim)
        soft.append(dg.higher_order_term(net, x, 0, 1, x * 0.5))
    return {"relu_max": max(relu), "softplus_median": float(np.median(soft))}


def check_forgery(rng, trials, dim=6):
    prop = resid = 0.0
    done = 0
    while done < trials:
        w = rng.standard_normal(dim)
        layer = LayerSpec(w[None, :], -np.abs(rng.standard_normal(1)), "relu")
        x = rng.standard_normal(dim)
        r = rng.standard_normal(dim)
        if layer.preactivation(x)[0] <= 0 or abs(r.sum()) < 1e-3:
            continue
        root, achieved = dg.forge_relevance(layer, x, r)
        prop = max(prop, float(np.max(np.abs(achieved / achieved.sum() - r / r.sum()))))
        resid = max(resid, abs(root.residual))
        done += 1
    return {"proportionality_gap": prop, "max_residual": resid}


def check_class_insensitivity(rng, trials, depth=10, width=20, classes=5):
    zplus, lrp0, zplus_rand, lrp0_rand = [], [], [], []
    dims = [width] * depth + [classes]
    while len(zplus) < trials:
        net = random_network(dims, rng, "zero")
        x = None
        for _ in range(1000):
            cand = rng.uniform(0, 1, width)
            if np.sum(forward(net, cand).output > 0) >= 2:
                x = cand
                break
        if x is None:
            continue
        seed = int(rng.integers(2**31))
        sim = dg.class_insensitivity(net, x, "zplus", rerandomize_seed=seed)
        zplus.append(sim.median_cosine)
        zplus_rand.append(sim.median_randomized)
        sim = dg.class_insensitivity(net, x, "lrp0", rerandomize_seed=seed)
        lrp0.append(sim.median_cosine)
        lrp0_rand.append(sim.median_randomized)
    return {
        "zplus_median": float(np.nanmedian(zplus)),
        "zplus_rerandomized_median": float(np.nanmedian(zplus_rand)),
        "lrp0_median": float(np.nanmedian(lrp0)),
        "lrp0_rerandomized_median": float(np.nanmedian(lrp0_rand)),
    }


def check_bias_counterexample(rng, trials):
    net, x, res = dg.bias_counterexample()
    return {"origin_output": float(forward(net, np.zeros(net.input_dim)).output[0]),
            "gradient_gap": res.gradient_gap}


CHECKS = {
    "closed_form": (check_closed_form, lambda m: m["closed_form_gap"] <= 1e-10,
                    {"closed_form_gap": 1e-10}),
    "conservation": (check_closed_form, lambda m: m["conservation_gap"] <= 1e-8,
                     {"conservation_gap": 1e-8}),
    "grad_x_input": (check_grad_x_input, lambda m: m["gap"] <= 1e-8, {"gap": 1e-8}),
    "prop2": (check_prop2, lambda m: max(m.values()) <= 1e-8,
              {"zero_root_gap": 1e-8, "constant_root_gap": 1e-8}),
    "prop3": (check_prop3, lambda m: m["max_gap"] <= 1e-4 and m["median_ablated_gap"] > 1e-2,
              {"max_gap": 1e-4, "median_ablated_gap": "> 1e-2"}),
    "prop4": (check_prop4, lambda m: m["relu_max"] <= 1e-10 and m["softplus_median"] > 1e-6,
              {"relu_max": 1e-10, "softplus_median": "> 1e-6"}),
    "forgery": (check_forgery, lambda m: m["proportionality_gap"] <= 1e-10 and m["max_residual"] <= 1e-9,
                {"proportionality_gap": 1e-10, "max_residual": 1e-9}),
    "class_insensitivity": (
        check_class_insensitivity,
        lambda m: m["zplus_median"] >= 0.999 and m["zplus_rerandomized_median"] >= 0.999
        and m["lrp0_median"] < m["zplus_median"]
        and m["lrp0_rerandomized_median"] < m["zplus_rerandomized_median"],
        {"zplus_median": ">= 0.999", "zplus_rerandomized_median": ">= 0.999",
         "lrp0_median": "< zplus_median",
         "lrp0_rerandomized_median": "< zplus_rerandomized_median"}),
    "bias_counterexample": (check_bias_counterexample, lambda m: m["gradient_gap"] > 0,
                            {"gradient_gap": "> 0"}),
}


def run_verification(config: ExperimentConfig, only: Optional[Sequence[str]] = None,
                     trials: int = 10) -> list:
    """Run the named checks (all by default); each gets its own seeded stream."""
    names = list(CHECKS) if not only else list(only)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks: {unknown}; choose from {sorted(CHECKS)}")
    results = []
    for name in names:
        fn, passed, tol = CHECKS[name]
        rng = np.random.default_rng([config.seed, sorted(CHECKS).index(name)])
        start = time.perf_counter()
        try:
            kwargs = {"fd_step": config.fd_step} if name == "prop3" else {}
            measured = fn(rng, trials, **kwargs)
            results.append(CheckResult(name, bool(passed(measured)), measured, tol, trials,
                                       time.perf_counter() - start))
        except Exception as exc:  # surfaced in the report with its type
            results.append(CheckResult(name, False, {}, tol, trials, time.perf_counter() - start,
                                       f"{type(exc).__name__}: {exc}"))
    return results


__all__ = [
    "ALL_RULES",
    "BIAS_MODES",
    "CHECKS",
    "CheckResult",
    "ExperimentConfig",
    "INIT_NOTE",
    "TABLE1_RULES",
    "generate_network",
    "random_network",
    "run_verification",
    "sample_inputs",
    "table1",
]
