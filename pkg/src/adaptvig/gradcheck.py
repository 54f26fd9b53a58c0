"""Finite-difference audit of every taped primitive and block."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import agc, model
from . import tensor as T
from .layers import parameters
from .tensor import Tensor

FD_EPS = 1e-6
TOL = 1e-6
MODEL_TOL = 1e-5
CLOSED_FORM_TOL = 1e-10
DEFAULT_SEED = 7


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _probe(rng, out: np.ndarray) -> np.ndarray:
    return rng.standard_normal(out.shape)


def check_function(build: Callable[[], Tensor], leaves: list[Tensor], rng, eps: float = FD_EPS) -> float:
    """Max fd error over ``leaves`` for the scalar ``sum((build() - out0) * R)``.

    ``out0`` is the unperturbed output. Subtracting it leaves the gradient
    unchanged but keeps the probed scalar near zero, so outputs a
    perturbation does not touch cancel exactly instead of adding rounding
    noise to the difference quotient.
    """
    out0 = build().data.copy()
    R = _probe(rng, out0)

    def f():
        return T.total((build() - out0) * R)

    return max(T.fd_check(f, leaf, eps) for leaf in leaves)


def _randomize(obj, rng, scale=0.5) -> None:
    # init-scale weights (std 0.02) give gradients too small to compare well
    for p in parameters(obj):
        if p.ndim == 0:
            continue
        p.data[...] = rng.standard_normal(p.shape) * scale


def primitive_checks(rng) -> dict[str, Callable[[], float]]:
    x = _leaf(rng, (2, 4, 5, 6))
    y = _leaf(rng, (2, 4, 5, 6))
    g1 = _leaf(rng, (2, 1, 5, 6))
    pos = Tensor(rng.uniform(0.5, 2.0, (2, 4, 5, 6)), requires_grad=True)
    w1 = _leaf(rng, (3, 4, 1, 1))
    w3 = _leaf(rng, (3, 4, 3, 3))
    wd = _leaf(rng, (4, 1, 3, 3))
    b3 = _leaf(rng, (3,))
    b4 = _leaf(rng, (4,))
    gain = _leaf(rng, (4,))
    shift = _leaf(rng, (4,))
    tok = _leaf(rng, (2, 5, 4))
    tok2 = _leaf(rng, (2, 4, 3))
    lw = _leaf(rng, (3, 4))
    labels = rng.integers(0, 3, 2)

    return {
        "roll[height]": lambda: check_function(lambda: T.roll(x, -2, "height"), [x], rng),
        "roll[width]": lambda: check_function(lambda: T.roll(x, 3, "width"), [x], rng),
        "max": lambda: check_function(lambda: T.elementwise(x, y, "max"), [x, y], rng),
        "sub": lambda: check_function(lambda: T.elementwise(x, y, "sub"), [x, y], rng),
        "mul[channel-broadcast]": lambda: check_function(lambda: T.elementwise(x, g1, "mul"), [x, g1], rng),
        "div": lambda: check_function(lambda: x / pos, [x, pos], rng),
        "exp": lambda: check_function(lambda: T.elementwise(x, kind="exp"), [x], rng),
        "gelu": lambda: check_function(lambda: T.elementwise(x, kind="gelu"), [x], rng),
        "sigmoid": lambda: check_function(lambda: T.sigmoid(x), [x], rng),
        "abs": lambda: check_function(lambda: T.absolute(x), [x], rng),
        "reduce_abs_sum_channels": lambda: check_function(lambda: T.reduce_abs_sum_channels(x), [x], rng),
        "reduce_l2_channels": lambda: check_function(lambda: T.reduce_l2_channels(x), [x], rng),
        "concat_channels": lambda: check_function(lambda: T.concat_channels(x, y), [x, y], rng),
        "conv2d[1x1]": lambda: check_function(lambda: T.conv2d(x, w1, b3), [x, w1, b3], rng),
        "conv2d[3x3]": lambda: check_function(lambda: T.conv2d(x, w3, b3), [x, w3, b3], rng),
        "conv2d[3x3,stride2]": lambda: check_function(lambda: T.conv2d(x, w3, b3, stride=2), [x, w3, b3], rng),
        "conv2d[depthwise]": lambda: check_function(lambda: T.conv2d(x, wd, b4, groups=4), [x, wd, b4], rng),
        "normalize[per_sample_all]": lambda: check_function(
            lambda: T.normalize(x, "per_sample_all", gain, shift), [x, gain, shift], rng
        ),
        "normalize[per_token_channel]": lambda: check_function(
            lambda: T.normalize(x, "per_token_channel", gain, shift), [x, gain, shift], rng
        ),
        "softmax_lastaxis": lambda: check_function(lambda: T.softmax_lastaxis(tok), [tok], rng),
        "matmul": lambda: check_function(lambda: T.matmul(tok, tok2), [tok, tok2], rng),
        "to_tokens": lambda: check_function(lambda: T.to_tokens(x), [x], rng),
        "head": lambda: check_function(lambda: T.head_primitives(x, lw, b3), [x, lw, b3], rng),
        "cross_entropy": lambda: T.fd_check(lambda: T.cross_entropy(T.head_primitives(x, lw, b3), labels), lw, FD_EPS),
    }


def gate_closed_form_error(rng, n: int = 100) -> float:
    """Taped d gate / d T against g * d / t_eff^2 over random (d, T)."""
    worst = 0.0
    for _ in range(n):
        d = float(rng.uniform(0.0, 5.0))
        params = agc.GatingParams(float(rng.uniform(0.1, 3.0)))
        g = agc.gate_map(Tensor(np.full((1, 1, 1, 1), d)), params)
        T.backward(T.total(g))
        t_eff = abs(params.value) + params.eps
        ref = agc.temperature_grad_closed_form(float(g.data.item()), d, t_eff)
        worst = max(worst, abs(params.T.grad.item() - ref))
    return worst


def gate_fd_error(rng) -> float:
    d = Tensor(rng.uniform(0.0, 4.0, (2, 1, 4, 4)), requires_grad=True)
    params = agc.GatingParams(1.3)
    return check_function(lambda: agc.gate_map(d, params), [d, params.T], rng)


def agc_block_error(rng) -> float:
    c = 4
    x = _leaf(rng, (2, c, 8, 8))
    p = model.init_agc_block(rng, c, 2, 2.0)
    _randomize(p, rng)
    p.gating.T.data[...] = 1.3
    return check_function(lambda: model.agc_block_forward(x, p), [x, *parameters(p)], rng)


def agc_variant_error(rng, gate_kind: str, distance_kind: str) -> float:
    x = _leaf(rng, (2, 3, 8, 8))
    params = agc.GatingParams(0.9)
    cfg = agc.AGCConfig(1, gate_kind, distance_kind)
    return check_function(lambda: agc.agc_aggregate(x, cfg, params), [x, params.T], rng)


def attention_block_error(rng) -> float:
    c = 4
    x = _leaf(rng, (2, c, 3, 3))
    p = model.init_attention_block(rng, c, 2.0)
    _randomize(p, rng)
    return check_function(lambda: model.attention_block_forward(x, p), [x, *parameters(p)], rng)


def tiny_model_config() -> model.ModelConfig:
    return model.ModelConfig(
        stages=[
            model.StageConfig(1, 1, 4, "agc", 2),
            model.StageConfig(1, 1, 4, "agc", 1),
            model.StageConfig(1, 1, 6, "agc", 1),
            model.StageConfig(1, 1, 6, "attention"),
        ],
        stem_channels=4,
        num_classes=3,
        ffn_ratio=2.0,
        irb_expansion=2.0,
    )


def tiny_model_error(rng, coords_per_leaf: int | None = 4) -> float:
    """Full-model check on a 3x32x32 input (stage grids 8,4,2,1), probing the
    logits. With ``coords_per_leaf`` set, each parameter tensor is checked on
    that many random coordinates (all of them for small tensors)."""
    cfg = tiny_model_config()
    params = model.init_model(cfg, seed=int(rng.integers(1 << 31)))
    _randomize(params, rng)
    x = _leaf(rng, (2, 3, 32, 32))
    out0 = model.model_forward(x, cfg, params).data.copy()
    R = _probe(rng, out0)

    def f():
        return T.total((model.model_forward(x, cfg, params) - out0) * R)

    worst = 0.0
    for leaf in [x, *parameters(params)]:
        coords = None
        if coords_per_leaf is not None and leaf.size > coords_per_leaf:
            coords = rng.choice(leaf.size, coords_per_leaf, replace=False)
        worst = max(worst, T.fd_check(f, leaf, FD_EPS, coords))
    return worst


def run_grad_check(seed: int = DEFAULT_SEED, coords_per_leaf: int | None = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, float, Callable[[], float]]] = [
        (name, TOL, fn) for name, fn in primitive_checks(rng).items()
    ]
    checks += [
        ("gate_map[fd]", TOL, lambda: gate_fd_error(rng)),
        ("gate_dT[closed-form]", CLOSED_FORM_TOL, lambda: gate_closed_form_error(rng)),
        ("agc_aggregate[exp,L1]", TOL, lambda: agc_variant_error(rng, "exp_decay", "L1")),
        ("agc_aggregate[sigmoid,L1]", TOL, lambda: agc_variant_error(rng, "sigmoid", "L1")),
        ("agc_aggregate[exp,L2]", TOL, lambda: agc_variant_error(rng, "exp_decay", "L2")),
        ("agc_block", TOL, lambda: agc_block_error(rng)),
        ("attention_block", TOL, lambda: attention_block_error(rng)),
        ("tiny_model", MODEL_TOL, lambda: tiny_model_error(rng, coords_per_leaf)),
    ]
    results = []
    for name, tol, fn in checks:
        t0 = time.perf_counter()
        err = fn()
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.component) for r in results)
    lines = [f"{'component':<{width}}  max_rel_error  tolerance  status"]
    for r in results:
        lines.append(f"{r.component:<{width}}  {r.max_rel_error:13.3e}  {r.tolerance:9.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
