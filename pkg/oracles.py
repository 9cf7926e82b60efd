"""
oracles.py - Self-validation suites run by `leafxai validate`

Each check builds seeded random conv+ReLU+dense networks (f64), evaluates an
attribution method against an independent reference (finite differences,
path-integral completeness, relevance conservation, cross-method identities,
hand-traced closed forms) and reports one pass/fail result.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

import attribution as attr
from autodiff import GradientRequest, finite_difference, input_gradient, kink_margin
from errors import LeafXAIError
from netgraph import INPUT_ID, ModelGraph, forward, make_node

logger = logging.getLogger(__name__)

Fault = Literal["gbp-no-zeroing"]

FD_STEP = 1e-4
IG_STEPS = (10, 30, 100, 300)


class ValidationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    nets: int = 20
    seed: int = 0
    fault: Optional[Fault] = None

    @field_validator("nets")
    @classmethod
    def validate_nets(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Need at least one random network per check")
        return v


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    observed: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name} observed={self.observed:.3e} tolerance={self.tolerance:.1e}"
        return f"{text} {self.detail}" if self.detail else text


# Random networks


def random_net(
    rng: np.random.Generator,
    bias: bool = True,
    input_shape: tuple[int, int, int] = (2, 6, 6),
    channels: int = 3,
    hidden: int = 5,
    classes: int = 3,
    positive: bool = False,
) -> ModelGraph:
    """conv3x3 -> ReLU -> maxpool -> dense -> ReLU -> dense -> softmax, in f64"""
    c, h, w = input_shape

    def draw(shape, fan_in):
        values = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        return np.abs(values) if positive else values

    def biases(n):
        return rng.normal(0.0, 0.3, n) if bias else np.zeros(n)

    flat = channels * (h // 2) * (w // 2)
    nodes = [
        make_node(
            "conv",
            "conv2d",
            [INPUT_ID],
            {"stride": 1, "padding": 1},
            {"kernel": draw((channels, c, 3, 3), c * 9), "bias": biases(channels)},
        ),
        make_node("conv_relu", "relu", ["conv"]),
        make_node("pool", "maxpool", ["conv_relu"], {"window": 2, "stride": 2}),
        make_node(
            "hidden",
            "dense",
            ["pool"],
            None,
            {"weight": draw((hidden, flat), flat), "bias": biases(hidden)},
        ),
        make_node("hidden_relu", "relu", ["hidden"]),
        make_node(
            "logits",
            "dense",
            ["hidden_relu"],
            None,
            {"weight": draw((classes, hidden), hidden), "bias": biases(classes)},
        ),
        make_node("softmax", "softmax", ["logits"]),
    ]
    return ModelGraph(
        input_shape=input_shape, nodes=tuple(nodes), output_id="softmax", prelogits_id="logits"
    )


def kink_free_input(
    model: ModelGraph, rng: np.random.Generator, margin: float = 10 * FD_STEP
) -> np.ndarray:
    """Uniform [0,1) input at least `margin` away from every ReLU/max-pool kink"""
    for _ in range(1000):
        x = rng.uniform(0.0, 1.0, model.input_shape)
        if kink_margin(model, x) >= margin:
            return x
    raise LeafXAIError("Could not draw an input away from the network's kinks")


def _cases(cfg: ValidationConfig, salt: int, bias: bool, **kw):
    """Yield (model, x, target) per seeded random net with a non-trivial target"""
    for i in range(cfg.nets):
        rng = np.random.default_rng([cfg.seed, salt, i])
        while True:
            model = random_net(rng, bias=bias, **kw)
            x = kink_free_input(model, rng)
            target = attr.resolve_target(model, x)
            if abs(forward(model, x)[target[0]][target[1]]) > 1e-3:
                break
        yield model, x, target


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) / scale


def _target_value(model: ModelGraph, x: np.ndarray, target) -> float:
    return float(forward(model, x)[target[0]][target[1]])


def _guided_gradient(model, x, target, fault: Optional[Fault], observer=None) -> np.ndarray:
    rule = "plain" if fault == "gbp-no-zeroing" else "guided"
    return input_gradient(GradientRequest(model, x, target, rule), observer)


# Checks


def check_gradcheck(cfg: ValidationConfig) -> CheckResult:
    worst = 0.0
    for model, x, target in _cases(cfg, 1, bias=True):
        g = input_gradient(GradientRequest(model, x, target))
        fd = finite_difference(model, x, target, FD_STEP)
        worst = max(worst, _rel_err(g, fd))
    return CheckResult("gradcheck", worst < 1e-6, worst, 1e-6, f"nets={cfg.nets}")


def check_ig_completeness(cfg: ValidationConfig) -> CheckResult:
    worst, shrinks = 0.0, True
    for model, x, target in _cases(cfg, 2, bias=True):
        delta = _target_value(model, x, target) - _target_value(
            model, np.zeros_like(x), target
        )
        errors = []
        for steps in IG_STEPS:
            params = attr.IntegratedGradientsParams(steps=steps)
            raw = attr.integrated_gradients(model, x, target, params).raw
            errors.append(abs(float(raw.sum()) - delta) / max(abs(delta), 1e-12))
        worst = max(worst, errors[-1])
        # both may sit at rounding level on nets with no kink along the path
        if not (errors[-1] < errors[0] or errors[-1] < 1e-9):
            shrinks = False
    detail = f"nets={cfg.nets} steps={IG_STEPS[-1]} shrinking={'yes' if shrinks else 'no'}"
    return CheckResult("ig_completeness", worst < 0.01 and shrinks, worst, 0.01, detail)


def check_lrp_conservation(cfg: ValidationConfig) -> CheckResult:
    worst = 0.0
    for model, x, target in _cases(cfg, 3, bias=False):
        raw = attr.lrp(model, x, target, epsilon=0.0).raw
        a = _target_value(model, x, target)
        worst = max(worst, abs(float(raw.sum()) - a) / abs(a))
    return CheckResult("lrp_conservation", worst < 1e-4, worst, 1e-4, f"nets={cfg.nets}")


def check_gi_equals_lrpz(cfg: ValidationConfig) -> CheckResult:
    worst = 0.0
    for model, x, target in _cases(cfg, 4, bias=False):
        gi = attr.gradient_times_input(model, x, target).raw
        lrp_z = attr.lrp(model, x, target, epsilon=0.0).raw
        worst = max(worst, _rel_err(lrp_z, gi))

    # The identity needs zero biases; a biased net must break it
    biased_cfg = cfg.model_copy(update={"nets": 1})
    model, x, target = next(_cases(biased_cfg, 5, bias=True))
    gap = _rel_err(
        attr.lrp(model, x, target, epsilon=0.0).raw,
        attr.gradient_times_input(model, x, target).raw,
    )
    passed = worst < 1e-5 and gap > 1e-2
    detail = f"nets={cfg.nets} biased_gap={gap:.3e}"
    return CheckResult("gi_equals_lrpz", passed, worst, 1e-5, detail)


def _hand_traced_gbp_net() -> ModelGraph:
    nodes = (
        make_node("h", "dense", [INPUT_ID], None, {"weight": np.eye(2), "bias": np.zeros(2)}),
        make_node("h_relu", "relu", ["h"]),
        make_node(
            "out", "dense", ["h_relu"], None, {"weight": np.array([[1.0, -1.0]]), "bias": np.zeros(1)}
        ),
    )
    return ModelGraph(input_shape=(2,), nodes=nodes, output_id="out", prelogits_id="out")


def check_gbp(cfg: ValidationConfig) -> CheckResult:
    """Hand trace W1 = I, w2 = [1,-1], x = [2,1] -> [1,0], and no negative
    gradient leaving any ReLU on random nets"""
    model = _hand_traced_gbp_net()
    hand = _guided_gradient(model, np.array([2.0, 1.0]), ("out", 0), cfg.fault)
    observed = float(np.max(np.abs(hand - np.array([1.0, 0.0]))))

    most_negative = 0.0
    for model, x, target in _cases(cfg, 6, bias=True):

        def watch(node_id, parts, model=model):
            nonlocal most_negative
            if model.node(node_id).op == "relu":
                most_negative = min(most_negative, float(np.min(parts[0])))

        _guided_gradient(model, x, target, cfg.fault, watch)

    passed = observed < 1e-6 and most_negative >= 0.0
    detail = f"nets={cfg.nets} min_relu_gradient={most_negative:.3e}"
    return CheckResult("gbp", passed, observed, 1e-6, detail)


def _linear_net() -> ModelGraph:
    node = make_node(
        "out", "dense", [INPUT_ID], None, {"weight": np.array([[2.0, -1.0]]), "bias": np.zeros(1)}
    )
    return ModelGraph(input_shape=(2,), nodes=(node,), output_id="out", prelogits_id="out")


def check_closed_form(cfg: ValidationConfig) -> CheckResult:
    """One-dense net w = [2,-1], b = 0, x = [3,4]"""
    model, x, target = _linear_net(), np.array([3.0, 4.0]), ("out", 0)
    ig = attr.integrated_gradients(model, x, target, attr.IntegratedGradientsParams(steps=10))
    expected = [
        (attr.saliency(model, x, target).raw, [2.0, -1.0]),
        (attr.gradient_times_input(model, x, target).raw, [6.0, -4.0]),
        (ig.raw, [6.0, -4.0]),
        (np.array([ig.raw.sum()]), [2.0]),
        (attr.lrp(model, x, target, epsilon=0.0).raw, [6.0, -4.0]),
        (attr.lrp(model, x, target, epsilon=0.1).raw, [6 * 2 / 2.1, -4 * 2 / 2.1]),
        (attr.deep_taylor(model, x, target).raw, [2.0, 0.0]),
    ]
    observed = max(float(np.max(np.abs(got - np.array(want)))) for got, want in expected)
    return CheckResult("closed_form", observed < 1e-6, observed, 1e-6)


def check_smoothgrad(cfg: ValidationConfig) -> CheckResult:
    """sigma = 0 reproduces saliency bit-exactly; N = 8 equals the recomputed mean"""
    worst = 0.0
    exact = True
    for model, x, target in _cases(cfg.model_copy(update={"nets": min(cfg.nets, 5)}), 7, True):
        sal = attr.saliency(model, x, target).raw
        zero = attr.smoothgrad(model, x, target, attr.SmoothGradParams(n_samples=8, sigma=0.0))
        exact = exact and np.array_equal(zero.raw, sal)

        params = attr.SmoothGradParams(n_samples=8, sigma=0.1, seed=cfg.seed)
        got = attr.smoothgrad(model, x, target, params).raw
        total = np.zeros_like(x)
        for noisy in attr.noisy_inputs(x, 0.1, 8, cfg.seed):
            total = total + attr.saliency(model, noisy, target).raw
        worst = max(worst, float(np.max(np.abs(got - total / 8))))
    return CheckResult("smoothgrad", exact and worst == 0.0, worst, 0.0, f"sigma0_exact={exact}")


CHECKS: dict[str, Callable[[ValidationConfig], CheckResult]] = {
    "gradcheck": check_gradcheck,
    "ig_completeness": check_ig_completeness,
    "lrp_conservation": check_lrp_conservation,
    "gi_equals_lrpz": check_gi_equals_lrpz,
    "gbp": check_gbp,
    "closed_form": check_closed_form,
    "smoothgrad": check_smoothgrad,
}


def run_checks(cfg: ValidationConfig, names: Optional[list[str]] = None) -> list[CheckResult]:
    """Run the named checks (all by default) in registry order

    A check that raises is reported as a failure carrying the error message.
    """
    names = list(CHECKS) if names is None else names
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"Unknown check(s) {unknown}. Valid checks: {', '.join(CHECKS)}")
    results = []
    for name in names:
        logger.debug("Running check %s", name)
        try:
            results.append(CHECKS[name](cfg))
        except LeafXAIError as e:
            results.append(CheckResult(name, False, float("nan"), float("nan"), str(e)))
    return results
