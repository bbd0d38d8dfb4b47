#!/usr/bin/env python3
"""
Finite-difference property suite for every differentiable operator, the
network modules and the full losses (64-bit, small randomized shapes).

Operator checks are coordinate-wise; whole-model checks use one random
direction per parameter tensor so that a full network stays cheap to probe.
Inputs that feed a ReLU or a max are drawn well away from their kinks.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

import autodiff as ad
from autodiff import GradCheckReport, Tensor, confirm_kink, difference_floor, gradient_check, no_grad, precision
from tubule_net import (
    FeatureRecalibration,
    ModelConfig,
    TubuleNet,
    attention_maps_and_distill_loss,
    coordinate_map,
    dice_focal_loss,
    distillation_targets,
    total_losses,
)

logger = logging.getLogger("tubule_seg.grad_suite")


@dataclass
class SuiteResult:
    """One case. Every case is built away from corners, so a reported kink fails it."""

    name: str
    report: GradCheckReport

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.report.passed(tolerance) and not self.report.kinks


def _away_from_zero(rng: np.random.Generator, shape: tuple, low: float = 0.1) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _separated(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Distinct values at least 0.01 apart, so no max switches under a small step."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.01 - 0.005 * n).reshape(shape)


def weighted_sum(rng: np.random.Generator, op: Callable) -> Callable:
    """Scalar f(*xs) = sum(op(*xs) * W) with a fixed random W of the output's shape."""
    cache: dict = {}

    def f(*xs):
        out = op(*xs)
        if "w" not in cache:
            cache["w"] = Tensor(rng.uniform(-1.0, 1.0, size=out.shape))
        return (out * cache["w"]).sum()

    return f


def directional_check(f: Callable, params: list, rng: np.random.Generator,
                      step: float = 1e-6, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare grad . v with a central difference along a random unit v, per parameter tensor."""
    for p in params:
        p.zero_grad()
    f().backward()
    with no_grad():
        f0 = f().item()
    floor = difference_floor(f0, step)
    report = GradCheckReport()
    for i, p in enumerate(params):
        v = rng.standard_normal(p.shape)
        v /= np.linalg.norm(v)
        analytic = float((p.grad * v).sum()) if p.grad is not None else 0.0
        original = p.data

        def evaluate(delta: float, p=p, v=v, original=original) -> float:
            p.data = original + delta * v
            try:
                with no_grad():
                    return f().item()
            finally:
                p.data = original

        fp, fm = evaluate(step), evaluate(-step)
        if confirm_kink(evaluate, f0, fp, fm, step, kink_tol):
            report.kinks.append((i, ()))
            continue
        report.record(i, (), analytic, (fp - fm) / (2 * step), floor)
    return report


def _operator_cases(rng: np.random.Generator) -> list:
    """(name, f, inputs) triples for the coordinate-wise checks."""
    t = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
    x = t(rng.normal(size=(2, 2, 4, 4, 4)))
    cases = [
        ("conv3d", weighted_sum(rng, lambda x, k, b: ad.conv3d(x, k, b, padding=1)),
         [x, t(rng.normal(size=(3, 2, 3, 3, 3))), t(rng.normal(size=3))]),
        ("conv3d_stride2", weighted_sum(rng, lambda x, k: ad.conv3d(x, k, None, padding=0, stride=2)),
         [t(rng.normal(size=(1, 2, 5, 5, 5))), t(rng.normal(size=(2, 2, 3, 3, 3)))]),
        ("instance_norm", weighted_sum(rng, ad.instance_norm),
         [t(rng.normal(size=(2, 3, 3, 4, 4))), t(rng.normal(size=3)), t(rng.normal(size=3))]),
        ("max_pool", weighted_sum(rng, ad.max_pool), [t(_separated(rng, (1, 2, 4, 6, 6)))]),
        ("max_pool_odd", weighted_sum(rng, ad.max_pool), [t(_separated(rng, (1, 1, 3, 5, 4)))]),
        ("avg_pool_odd", weighted_sum(rng, ad.avg_pool), [t(rng.normal(size=(1, 2, 3, 5, 4)))]),
        ("trilinear_up", weighted_sum(rng, lambda x: ad.trilinear_resize(x, (4, 6, 5))),
         [t(rng.normal(size=(1, 2, 2, 3, 3)))]),
        ("trilinear_down", weighted_sum(rng, lambda x: ad.trilinear_resize(x, (2, 3, 2))),
         [t(rng.normal(size=(1, 1, 4, 6, 5)))]),
        ("relu", weighted_sum(rng, ad.relu), [t(_away_from_zero(rng, (2, 3, 4)))]),
        ("sigmoid", weighted_sum(rng, ad.sigmoid), [t(rng.normal(size=(2, 3, 4)))]),
        ("abs_pow_2", weighted_sum(rng, lambda x: ad.abs_pow(x, 2.0)), [t(rng.normal(size=(2, 3, 4)))]),
        ("abs_pow_1.5", weighted_sum(rng, lambda x: ad.abs_pow(x, 1.5)), [t(_away_from_zero(rng, (2, 3, 4)))]),
        ("add_broadcast", weighted_sum(rng, lambda a, b: a + b),
         [t(rng.normal(size=(2, 3, 4))), t(rng.normal(size=(1, 3, 1)))]),
        ("mul_broadcast", weighted_sum(rng, lambda a, b: a * b),
         [t(rng.normal(size=(2, 3, 4))), t(rng.normal(size=(4,)))]),
        ("sub", weighted_sum(rng, lambda a, b: a - b), [t(rng.normal(size=(3, 4))), t(rng.normal(size=(3, 4)))]),
        ("concat", weighted_sum(rng, lambda a, b: ad.concat([a, b], axis=1)),
         [t(rng.normal(size=(1, 2, 2, 2, 2))), t(rng.normal(size=(1, 3, 2, 2, 2)))]),
        ("channel_sum", weighted_sum(rng, ad.channel_sum), [t(rng.normal(size=(2, 3, 2, 2, 2)))]),
        ("channel_mean", weighted_sum(rng, ad.channel_mean), [t(rng.normal(size=(2, 3, 2, 2, 2)))]),
        ("channel_max", weighted_sum(rng, ad.channel_max), [t(_separated(rng, (2, 3, 2, 2, 2)))]),
        ("channel_softmax", weighted_sum(rng, ad.channel_softmax), [t(rng.normal(size=(2, 3, 2, 2, 2)))]),
        ("spatial_softmax", weighted_sum(rng, ad.spatial_softmax), [t(rng.normal(size=(2, 2, 2, 3, 2)))]),
        ("frobenius_sq", ad.frobenius_sq, [t(rng.normal(size=(2, 3, 4)))]),
        ("mean_axes", weighted_sum(rng, lambda a: a.mean(axis=(2, 4), keepdims=True)),
         [t(rng.normal(size=(1, 2, 3, 2, 4)))]),
    ]
    return cases


def _module_cases(rng: np.random.Generator) -> list:
    t = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
    fr = FeatureRecalibration(4, (3, 4, 5), 2, rng)
    a = t(rng.normal(size=(1, 4, 3, 4, 5)))
    # the parameters are perturbed in place, so fr sees them without being passed
    fr_f = weighted_sum(rng, lambda x, *_: fr(x))

    features = [t(rng.normal(size=(1, 3, 2, 2, 2))), t(rng.normal(size=(1, 2, 3, 4, 4))),
                t(rng.normal(size=(1, 2, 4, 4, 4)))]
    p = t(rng.uniform(0.05, 0.95, size=(1, 1, 3, 3, 3)))
    y = rng.random((1, 1, 3, 3, 3)) < 0.4
    # finer maps are held fixed so perturbed evaluations see the same function as backward
    targets = {power: distillation_targets(features, power) for power in (2.0, 3.0)}

    return [
        ("feature_recalibration", fr_f, [a] + fr.parameters()),
        ("attention_distill",
         lambda *fs: attention_maps_and_distill_loss(list(fs), 2.0, targets=targets[2.0])[1], features),
        ("attention_distill_p3",
         lambda *fs: attention_maps_and_distill_loss(list(fs), 3.0, targets=targets[3.0])[1], features),
        ("dice_focal", lambda q: dice_focal_loss(q, y), [p]),
    ]


def _model_case(rng: np.random.Generator, task: str) -> tuple[str, Callable, list]:
    cfg = ModelConfig(task=task, channels=(2, 2, 2, 2, 2), r=2, patch_size=(4, 4, 4), pooling="avg",
                      seed=int(rng.integers(1 << 30)))
    model = TubuleNet(cfg)
    x = Tensor(rng.normal(size=(1, cfg.in_channels, 4, 4, 4)))
    coords = coordinate_map((8, 8, 8), (2, 2, 2), (4, 4, 4))
    if task == "airway":
        y = (rng.random((1, 1, 4, 4, 4)) < 0.3).astype(np.uint8)
    else:
        y = rng.choice([0, 1, 2, 255], size=(1, 1, 4, 4, 4), p=[0.4, 0.25, 0.25, 0.1]).astype(np.uint8)
    with no_grad():
        features = model(x, coords).features
    targets = distillation_targets(features, cfg.p, cfg.attention_mapping)

    def f():
        return total_losses(model(x, coords), y, cfg, distill_targets=targets).total

    return f"model_{task}", f, model.parameters()


def run_gradient_suite(seed: int = 0, step: float = 1e-5,
                       only: Optional[list] = None) -> list:
    """Run every check in float64 and return one SuiteResult per case."""
    results = []
    with precision("f64"):
        rng = np.random.default_rng(seed)
        for name, f, inputs in _operator_cases(rng) + _module_cases(rng):
            if only and name not in only:
                continue
            report = gradient_check(f, inputs, step=step)
            logger.debug(f"{name}: max rel err {report.max_rel_err:.3e} over {report.checked} coordinates, {len(report.kinks)} kinks")
            results.append(SuiteResult(name, report))
        for task in ("airway", "artery-vein"):
            name, f, params = _model_case(rng, task)
            if only and name not in only:
                continue
            report = directional_check(f, params, rng)
            logger.debug(f"{name}: max rel err {report.max_rel_err:.3e} over {report.checked} directions, {len(report.kinks)} kinks")
            results.append(SuiteResult(name, report))
    return results
