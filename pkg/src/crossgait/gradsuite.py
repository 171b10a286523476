"""Finite-difference checks over every differentiable op and the composed model.

Used by ``crossgait gradcheck``; each case builds its own float64 inputs so a
case can be run alone.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .losses import contrastive_loss, cross_entropy_loss, total_loss, triplet_loss
from .model import EncoderConfig, ModelConfig, forward_batch, init_params, pmam_attention
from .numerics import Tensor

TOLERANCE = 1e-4
SHAPES = ((2, 3), (4, 1), (3, 5))

TINY = ModelConfig(EncoderConfig(stem_channels=3, stage_channels=(4,), stage_strides=(2,), input_size=8),
                   num_parts=2, num_prototypes=1, num_classes=3)


@dataclass
class CaseResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, shape, positive=False):
    a = rng.normal(size=shape)
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


def _away_from_zero(t: Tensor, eps=1e-3):
    # relu/max/hinge kinks are measure-zero; nudge inputs off them
    t.data[np.abs(t.data) < eps] = 0.1


_BINARY = {
    "add": lambda a, b: nx.sum(nx.square(nx.add(a, b))),
    "sub": lambda a, b: nx.sum(nx.square(nx.sub(a, b))),
    "mul": lambda a, b: nx.sum(nx.mul(a, b)),
    "mul_scalar": lambda a, b: nx.sum(nx.mul(nx.mul_scalar(a, 0.7), b)),
    "square": lambda a, b: nx.sum(nx.mul(nx.square(a), b)),
    "relu": lambda a, b: nx.sum(nx.mul(nx.relu(a), b)),
    "where": lambda a, b: nx.sum(nx.square(nx.where(a.data > 0, a, b))),
    "sum_axis": lambda a, b: nx.sum(nx.square(nx.sum(nx.mul(a, b), axis=1))),
    "mean": lambda a, b: nx.sum(nx.square(nx.mean(nx.mul(a, b), axis=0))),
    "max": lambda a, b: nx.sum(nx.square(nx.max_over_axis(nx.add(a, b), 0))),
    "softmax": lambda a, b: nx.sum(nx.mul(nx.softmax_rows(a), b)),
    "log_softmax": lambda a, b: nx.sum(nx.mul(nx.log_softmax(a), b)),
    "norm": lambda a, b: nx.sum(nx.vector_norm(nx.add(a, b), axis=1)),
    "reshape": lambda a, b: nx.sum(nx.square(nx.reshape(nx.mul(a, b), (-1,)))),
    "transpose": lambda a, b: nx.sum(nx.mul(nx.transpose(a), nx.transpose(b))),
    "concat": lambda a, b: nx.sum(nx.square(nx.concat([a, b], axis=0))),
    "index": lambda a, b: nx.sum(nx.square(nx.index(nx.mul(a, b), (slice(None), 0)))),
}


def _op_cases(seed: int):
    for name, fn in _BINARY.items():
        for shape in SHAPES:
            def build(shape=shape, name=name, fn=fn):
                rng = np.random.default_rng(seed)
                a, b = _leaf(rng, shape), _leaf(rng, shape)
                if name in ("relu", "where"):
                    _away_from_zero(a)
                return fn, [a, b]
            yield f"{name}{shape}", build

    for shape in ((2, 3, 4), (3, 2, 2)):
        def build_mm(shape=shape):
            rng = np.random.default_rng(seed)
            a, b = _leaf(rng, shape), _leaf(rng, (shape[-1], 3))
            return (lambda x, y: nx.sum(nx.square(nx.matmul(x, y)))), [a, b]
        yield f"matmul{shape}", build_mm

    for shape in ((1, 2, 5, 5), (2, 1, 6, 7)):
        for stride in (1, 2):
            for padding in (0, 1):
                def build_conv(shape=shape, stride=stride, padding=padding):
                    rng = np.random.default_rng(seed)
                    x, k = _leaf(rng, shape), _leaf(rng, (2, shape[1], 3, 3))
                    return (lambda a, b: nx.sum(nx.square(nx.conv2d(a, b, stride, padding)))), [x, k]
                yield f"conv2d{shape}s{stride}p{padding}", build_conv


def _composite_cases(seed: int):
    def pmam():
        rng = np.random.default_rng(seed)
        ins = [_leaf(rng, s) for s in ((6, 4), (2, 4), (6, 6), (6, 6))]
        return (lambda f, q, wk, wv: nx.sum(nx.square(pmam_attention(f, q, wk, wv)[0]))), ins
    yield "pmam", pmam

    labels = np.repeat(np.arange(3), 2)

    def triplet():
        rng = np.random.default_rng(seed)
        return (lambda e: triplet_loss(e, labels, 0.2)[0]), [_leaf(rng, (6, 2, 3))]
    yield "triplet_loss", triplet

    def contrastive():
        rng = np.random.default_rng(seed)
        cam = Tensor(0.2 * rng.normal(size=(6, 2, 3)))
        emb = Tensor(0.2 * rng.normal(size=(6, 2, 3)), requires_grad=True)
        return (lambda e: contrastive_loss(e, cam, labels, labels, 0.2)[0]), [emb]
    yield "contrastive_loss", contrastive

    def ce():
        rng = np.random.default_rng(seed)
        other = Tensor(rng.normal(size=(6, 2, 3)))
        emb, heads = _leaf(rng, (6, 2, 3)), _leaf(rng, (2, 3, 3))
        return (lambda e, h: cross_entropy_loss([e, other], [labels, labels], h)), [emb, heads]
    yield "cross_entropy_loss", ce

    def model():
        params = init_params(TINY, seed)
        rng = np.random.default_rng(seed)
        # leave the identity/zero init so every path carries gradient
        for p in params.values():
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
        lid, cam = rng.random((4, 2, 1, 8, 8)), rng.random((4, 3, 1, 8, 8))
        keys = sorted(params)

        def fn(*ts):
            local = dict(zip(keys, ts))
            lf, la = forward_batch(lid, "lidar", local, TINY)
            cf, ca = forward_batch(cam, "camera", local, TINY)
            return total_loss(lf, la, [0, 0, 1, 2], cf, ca, [0, 1, 1, 2], local["head.w"])[0]
        return fn, [params[k] for k in keys]
    yield "model+losses", model


def all_cases(seed: int = 0):
    yield from _op_cases(seed)
    yield from _composite_cases(seed)


def run(seed: int = 0, only: Callable[[str], bool] | None = None) -> list[CaseResult]:
    out = []
    with nx.default_dtype(np.float64):
        for name, build in all_cases(seed):
            if only is not None and not only(name):
                continue
            t0 = time.perf_counter()
            fn, inputs = build()
            rep = nx.grad_check(fn, inputs)
            out.append(CaseResult(name, rep.max_rel_error, time.perf_counter() - t0))
    return out
