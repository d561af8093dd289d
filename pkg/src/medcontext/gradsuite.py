"""Finite-difference suite over every differentiable op and a tiny network.

Each case builds float64 inputs for a seed and returns a scalar function of
them; scalar outputs are formed by contracting the op output with a fixed
random weight so every output element contributes a distinct gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import LossConfig, consistency, dice_ce, one_hot
from .masking import MaskSpec, apply_mask, mask_voxels, sample_mask
from .network import NetConfig, build, forward

TOLERANCE = 1e-4

Case = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _contract(out: Tensor, gen: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = gen.normal(size=out.shape)
    return lambda y: ad.sum(ad.mul(y, r))


def _unary(op, low=None, high=None, shape=(2, 3, 4)):
    def case(gen):
        x = _t(gen.uniform(low, high, shape) if low is not None else gen.normal(size=shape))
        r = gen.normal(size=shape)
        return (lambda x: ad.sum(ad.mul(op(x), r))), [x]
    return case


def _binary(op, positive_b=False, shape=(2, 3, 4)):
    def case(gen):
        a = _t(gen.normal(size=shape))
        b = _t(gen.uniform(0.5, 2.0, shape) * gen.choice([-1, 1], shape) if positive_b else gen.normal(size=shape))
        r = gen.normal(size=shape)
        return (lambda a, b: ad.sum(ad.mul(op(a, b), r))), [a, b]
    return case


def _reduce(kind):
    def case(gen):
        x = _t(gen.normal(size=(2, 3, 4, 5)))
        r = gen.normal(size=(2, 5))
        return (lambda x: ad.sum(ad.mul(ad.reduce(kind, x, (1, 2)), r))), [x]
    return case


def _conv(k, stride, pad, shape=(2, 2, 4, 4, 4), cout=3):
    def case(gen):
        x = _t(gen.normal(size=shape))
        w = _t(gen.normal(size=(cout, shape[1], k, k, k)))
        b = _t(gen.normal(size=cout))
        out = ad.conv3d(x, w, b, stride, pad)
        r = gen.normal(size=out.shape)
        return (lambda x, w, b: ad.sum(ad.mul(ad.conv3d(x, w, b, stride, pad), r))), [x, w, b]
    return case


def _instance_norm(gen):
    x = _t(gen.normal(size=(2, 3, 4, 4, 4)))
    g = _t(gen.normal(size=3))
    s = _t(gen.normal(size=3))
    r = gen.normal(size=x.shape)
    return (lambda x, g, s: ad.sum(ad.mul(ad.instance_norm(x, g, s, 1e-5), r))), [x, g, s]


def _upsample(gen):
    x = _t(gen.normal(size=(2, 3, 2, 3, 2)))
    r = gen.normal(size=(2, 3, 4, 6, 4))
    return (lambda x: ad.sum(ad.mul(ad.upsample_nearest3d(x, 2), r))), [x]


def _shape_ops(gen):
    x = _t(gen.normal(size=(2, 3, 4)))
    y = _t(gen.normal(size=(2, 2, 4)))
    v = _t(gen.normal(size=(4,)))
    r = gen.normal(size=(4, 5, 2))

    def f(x, y, v):
        z = ad.concat([x, y], axis=1)                    # (2, 5, 4)
        z = ad.add(z, ad.broadcast_to(v, (2, 5, 4)))
        z = ad.transpose(z, (2, 1, 0))                    # (4, 5, 2)
        return ad.sum(ad.mul(ad.reshape(ad.reshape(z, (20, 2)), (4, 5, 2)), r))

    return f, [x, y, v]


def _apply_mask(gen):
    spec = MaskSpec(0.5, (2, 2, 2), int(gen.integers(1 << 62)))
    grid = sample_mask(spec, (4, 4, 4))
    tokens = _t(gen.normal(size=(2, grid.num_tokens, 3)))
    token = _t(gen.normal(size=3))
    r = gen.normal(size=tokens.shape)
    return (lambda x, t: ad.sum(ad.mul(apply_mask(x, grid, t), r))), [tokens, token]


def _mask_voxels(gen):
    spec = MaskSpec(0.5, (2, 2, 2), int(gen.integers(1 << 62)))
    grid = sample_mask(spec, (4, 4, 4))
    vol = _t(gen.normal(size=(2, 1, 4, 4, 4)))
    val = _t(gen.normal(size=1))
    r = gen.normal(size=vol.shape)
    return (lambda x, v: ad.sum(ad.mul(mask_voxels(x, grid, v), r))), [vol, val]


def _dice_ce(gen):
    logits = _t(gen.normal(size=(2, 3, 3, 3, 3)))
    y = one_hot(gen.integers(0, 3, (2, 3, 3, 3)), 3, dtype=np.float64)
    return (lambda z: dice_ce(y, z, LossConfig())), [logits]


def _consistency(gen):
    s = _t(gen.normal(size=(2, 3, 3, 3, 3)))
    t = gen.normal(size=(2, 3, 3, 3, 3))
    return (lambda z: consistency(z, t, LossConfig())), [s]


TINY_NET = NetConfig(in_channels=1, num_classes=3, patch=(2, 2, 2), base_width=2, depth=1)


def _network(gen):
    cfg = TINY_NET
    params = build(NetConfig(**{**cfg.to_dict(), "seed": int(gen.integers(1 << 31))}), dtype=np.float64)
    params["mask_token"].data = gen.normal(size=params["mask_token"].shape)
    vol = gen.uniform(0, 1, (1, 1, 8, 8, 8))
    grid = sample_mask(MaskSpec(0.5, cfg.patch, int(gen.integers(1 << 62))), (8, 8, 8))
    y = one_hot(gen.integers(0, cfg.num_classes, (1, 8, 8, 8)), cfg.num_classes, dtype=np.float64)
    names = list(params)

    def f(*tensors):
        p = dict(zip(names, tensors))
        return dice_ce(y, forward(p, vol, cfg, mask=grid), LossConfig())

    return f, [params[n] for n in names]


CASES: dict[str, Case] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "exp": _unary(ad.exp, -1.0, 1.0),
    "log": _unary(ad.log, 0.5, 2.0),
    "relu": _unary(ad.relu),
    "square": _unary(ad.square),
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "shape_ops": _shape_ops,
    "softmax_channel": _unary(ad.softmax_channel, shape=(2, 3, 2, 2, 2)),
    "log_softmax_channel": _unary(ad.log_softmax_channel, shape=(2, 3, 2, 2, 2)),
    "conv3d_k3_pad1": _conv(3, 1, 1),
    "conv3d_k2_stride2": _conv(2, 2, 0),
    "conv3d_k1": _conv(1, 1, 0),
    "upsample_nearest3d": _upsample,
    "instance_norm": _instance_norm,
    "apply_mask": _apply_mask,
    "mask_voxels": _mask_voxels,
    "dice_ce": _dice_ce,
    "consistency": _consistency,
    "network": _network,
}


@dataclass
class CaseResult:
    name: str
    max_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_suite(seeds: int = 20, cases: dict[str, Case] | None = None, eps: float = 1e-6) -> list[CaseResult]:
    results = []
    for name, case in (cases or CASES).items():
        start = time.perf_counter()
        worst = 0.0
        for seed in range(seeds):
            f, inputs = case(np.random.default_rng([seed, len(name)]))
            worst = max(worst, grad_check(f, inputs, eps))
        results.append(CaseResult(name, worst, seeds, time.perf_counter() - start))
    return results


def format_report(results: list[CaseResult]) -> str:
    lines = [f"{'op':<22} {'max rel err':>12} {'seeds':>5}  result"]
    for r in results:
        lines.append(f"{r.name:<22} {r.max_error:>12.3e} {r.seeds:>5}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
