"""Finite-difference certification of every differentiable operation.

Each case builds fresh inputs, reduces the op output against a fixed random
probe and compares the analytic gradient with central differences for every
input.  Ops are certified at ``OP_TOLERANCE``; the compound loss through a
small full model at ``COMPOSED_TOLERANCE``.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .attention import (
    AttentionParams,
    TransformerBlockParams,
    attention_weights,
    multi_head_attention,
    scaled_dot_attention,
    transformer_block,
)
from .model import ModelConfig, NilmModel, forward
from .numerics import RngStream, Tensor
from .training import LossConfig, compound_loss

OP_TOLERANCE = 1e-6
COMPOSED_TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _t(rng: RngStream, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(shape, scale), requires_grad=True)


def _probe(out: Tensor, seed: int) -> np.ndarray:
    return RngStream(seed).normal(out.shape)


def _probed(op: Callable[[], Tensor], seed: int = 999) -> Callable[[], Tensor]:
    with nx.no_grad():
        p = _probe(op(), seed)
    return lambda: nx.weighted_sum(op(), p)


def _cases() -> dict[str, Callable[[], tuple[Callable[[], Tensor], list[Tensor], float]]]:
    cases = {}

    def case(name, tol=OP_TOLERANCE):
        def register(builder):
            cases[name] = lambda: (*builder(RngStream(zlib.crc32(name.encode()))), tol)
            return builder

        return register

    @case("add")
    def _(r):
        a, b = _t(r, (3, 4)), _t(r, (4,))
        return _probed(lambda: nx.add(a, b)), [a, b]

    @case("sub")
    def _(r):
        a, b = _t(r, (3, 4)), _t(r, (3, 1))
        return _probed(lambda: nx.sub(a, b)), [a, b]

    @case("mul")
    def _(r):
        a, b = _t(r, (2, 3, 4)), _t(r, (3, 4))
        return _probed(lambda: nx.mul(a, b)), [a, b]

    @case("scale")
    def _(r):
        a = _t(r, (5,))
        return _probed(lambda: nx.scale(a, -2.5)), [a]

    @case("sum_all")
    def _(r):
        a = _t(r, (3, 3))
        return lambda: nx.sum_all(a), [a]

    @case("clamp")
    def _(r):
        # keep every entry clear of the bounds so the kink is not straddled
        inside, above, below = r.uniform(4) * 0.4 + 0.3, r.uniform(4) * 0.2 + 1.2, -r.uniform(4) - 0.2
        a = Tensor(np.concatenate([inside, above, below]), requires_grad=True)
        return _probed(lambda: nx.clamp(a, 0.0, 1.0)), [a]

    @case("reshape")
    def _(r):
        a = _t(r, (2, 6))
        return _probed(lambda: nx.reshape(a, (3, 4))), [a]

    @case("transpose")
    def _(r):
        a = _t(r, (2, 3, 4))
        return _probed(lambda: nx.transpose(a, (2, 0, 1))), [a]

    @case("slice_axis")
    def _(r):
        a = _t(r, (3, 8))
        return _probed(lambda: nx.slice_axis(a, 1, 2, 7)), [a]

    @case("replace_where")
    def _(r):
        a, v = _t(r, (4, 6, 3)), _t(r, (3,))
        mask = r.uniform((4, 6)) < 0.4
        return _probed(lambda: nx.replace_where(a, mask, v)), [a, v]

    @case("matmul")
    def _(r):
        a, b = _t(r, (2, 4, 5)), _t(r, (5, 3))
        return _probed(lambda: nx.matmul(a, b)), [a, b]

    @case("linear")
    def _(r):
        x, w, b = _t(r, (3, 4, 5)), _t(r, (5, 6)), _t(r, (6,))
        return _probed(lambda: nx.linear(x, w, b)), [x, w, b]

    @case("softmax_rows")
    def _(r):
        a = _t(r, (4, 6), 2.0)
        return _probed(lambda: nx.softmax_rows(a)), [a]

    @case("layer_norm")
    def _(r):
        x, g, b = _t(r, (4, 8)), _t(r, (8,)), _t(r, (8,))
        return _probed(lambda: nx.layer_norm(x, g, b)), [x, g, b]

    @case("conv1d")
    def _(r):
        x, w, b = _t(r, (2, 12, 3)), _t(r, (5, 3, 4)), _t(r, (4,))
        return _probed(lambda: nx.conv1d(x, w, b, "same")), [x, w, b]

    @case("conv1d_strided")
    def _(r):
        x, w = _t(r, (11, 2)), _t(r, (3, 2, 3))
        return _probed(lambda: nx.conv1d(x, w, None, "valid", stride=2)), [x, w]

    @case("deconv1d")
    def _(r):
        x, w = _t(r, (2, 6, 3)), _t(r, (4, 3, 2))
        return _probed(lambda: nx.deconv1d(x, w, 2)), [x, w]

    @case("pool1d")
    def _(r):
        # distinct values so no window has a tie within the step size
        x = Tensor(r.permutation(24).reshape(12, 2) * 0.1, requires_grad=True)
        return _probed(lambda: nx.pool1d(x, 2)), [x]

    @case("dropout")
    def _(r):
        x = _t(r, (6, 5))
        return _probed(lambda: nx.dropout(x, 0.3, RngStream(17), training=True)), [x]

    for kind in ("tanh", "gelu", "relu"):

        @case(f"activation_{kind}")
        def _(r, kind=kind):
            x = _t(r, (5, 4))
            if kind == "relu":
                x.data[np.abs(x.data) < 0.05] += 0.1
            return _probed(lambda: nx.activation(x, kind)), [x]

    @case("attention_weights")
    def _(r):
        q, k = _t(r, (2, 5, 4)), _t(r, (2, 5, 4))
        return _probed(lambda: attention_weights(q, k)), [q, k]

    @case("scaled_dot_attention")
    def _(r):
        q, k, v = _t(r, (5, 4)), _t(r, (6, 4)), _t(r, (6, 3))
        return _probed(lambda: scaled_dot_attention(q, k, v)), [q, k, v]

    @case("multi_head_attention")
    def _(r):
        x = _t(r, (2, 5, 8))
        params = AttentionParams.init(8, 2, r)
        return _probed(lambda: multi_head_attention(x, params)), [x, *params.named().values()]

    @case("transformer_block")
    def _(r):
        x = _t(r, (6, 8))
        block = TransformerBlockParams.init(8, 2, r, dropout=0.0)
        return _probed(lambda: transformer_block(x, block)), [x, *block.named().values()]

    @case("compound_loss")
    def _(r):
        target = r.uniform((3, 10))
        pred = Tensor(r.uniform((3, 10)), requires_grad=True)
        labels = np.where(r.uniform((3, 10)) > 0.5, 1.0, -1.0)
        score = Tensor(r.uniform((3, 10)) - 0.5, requires_grad=True)
        weights = r.uniform((3, 10)) < 0.6
        cfg = LossConfig(tau=0.3, lam=0.8)
        return lambda: compound_loss(target, pred, labels, score, cfg, weights), [pred, score]

    @case("model_loss", COMPOSED_TOLERANCE)
    def _(r):
        cfg = ModelConfig(hidden_dim=8, n_layers=1, n_heads=2, dropout=0.0, window_len=32)
        model = NilmModel.init(cfg, r)
        model.out_b.data[...] = 0.4
        x = Tensor(r.uniform((2, 32)))
        target = r.uniform((2, 32)) * 0.8
        labels = np.where(target > 0.3, 1.0, -1.0)
        mask = r.uniform((2, 32)) < 0.3
        loss_cfg = LossConfig(tau=0.5, lam=1.0, p_max=400.0, on_threshold=50.0)

        def objective():
            power, score = forward(x, model, mask=mask, on_level=loss_cfg.on_level, clamp=False)
            return compound_loss(target, power, labels, score, loss_cfg, weights=mask)

        return objective, list(model.parameters().values())

    return cases


CASE_NAMES = tuple(_cases())


def run_suite(names=None) -> list[CheckResult]:
    """Run the named cases (all by default) in a fixed order."""
    cases = _cases()
    results = []
    for name in names or cases:
        start = time.perf_counter()
        objective, params, tol = cases[name]()
        err = nx.grad_check(objective, params)
        results.append(CheckResult(name, err, tol, time.perf_counter() - start))
    return results
