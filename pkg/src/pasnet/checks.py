"""Central-difference gradient checks for every differentiable op and the full model loss."""
from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional

import numpy as np

from . import tensor as T
from .layers import make_residual_block, make_up_block, residual_block_forward, up_block_forward
from .losses import LossConfig, bce_with_logits, cross_entropy_logits, total_loss
from .model import ModelConfig, build
from .tensor import DTYPE, RunningStats, Tensor, grad_check

TOLERANCE = 1e-2


def _rand(rng, *shape, scale=1.0):
    return Tensor((rng.standard_normal(shape) * scale).astype(DTYPE))


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    # random projection so every output coordinate matters to the scalar
    return T.tsum(T.mul(out, Tensor(r)))


def _projected(fn: Callable[[Tensor], Tensor], rng, out_shape) -> Callable[[Tensor], Tensor]:
    r = rng.standard_normal(out_shape).astype(DTYPE)
    return lambda x: _weighted(fn(x), r)


def _case_conv(rng):
    n, cin, cout = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = k // 2
    h = int(rng.integers(3, 7))
    x, w, b = _rand(rng, n, cin, h, h), _rand(rng, cout, cin, k, k, scale=0.5), _rand(rng, cout)
    ho = T.conv_output_size(h, k, stride, pad)
    shape = (n, cout, ho, ho)
    yield _projected(lambda t: T.conv2d(t, w, b, stride, pad), rng, shape), x
    yield _projected(lambda t: T.conv2d(x, t, b, stride, pad), rng, shape), w
    yield _projected(lambda t: T.conv2d(x, w, t, stride, pad), rng, shape), b


def _case_maxpool(rng):
    x = _rand(rng, 2, 2, 4, 6)
    yield _projected(T.maxpool2d, rng, (2, 2, 2, 3)), x


def _case_relu(rng):
    x = _rand(rng, 3, 5)
    yield _projected(T.relu, rng, (3, 5)), x


def _case_batchnorm(rng):
    c = 3
    x, g, b = _rand(rng, 2, c, 3, 3), _rand(rng, c), _rand(rng, c)
    for training in (True, False):
        stats = RunningStats(np.abs(rng.standard_normal(c)).astype(DTYPE), (1 + rng.random(c)).astype(DTYPE))
        r = rng.standard_normal((2, c, 3, 3)).astype(DTYPE)

        def fx(t, training=training, stats=stats, r=r):
            return _weighted(T.batchnorm2d(t, g, b, stats, training), r)

        def fg(t, training=training, stats=stats, r=r):
            return _weighted(T.batchnorm2d(x, t, b, stats, training), r)

        def fb(t, training=training, stats=stats, r=r):
            return _weighted(T.batchnorm2d(x, g, t, stats, training), r)

        yield fx, x
        yield fg, g
        yield fb, b


def _case_add(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
    yield _projected(lambda t: T.add(t, b), rng, (2, 3)), a
    yield _projected(lambda t: T.add(a, t), rng, (2, 3)), b


def _case_mul(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 2, 3)
    yield _projected(lambda t: T.mul(t, b), rng, (2, 3)), a


def _case_concat(rng):
    a, b = _rand(rng, 1, 2, 3, 3), _rand(rng, 1, 3, 3, 3)
    yield _projected(lambda t: T.concat_channels(t, b), rng, (1, 5, 3, 3)), a
    yield _projected(lambda t: T.concat_channels(a, t), rng, (1, 5, 3, 3)), b


def _case_upsample(rng):
    x = _rand(rng, 1, 2, 3, 2)
    yield _projected(T.upsample_nearest2x, rng, (1, 2, 6, 4)), x


def _case_gap(rng):
    x = _rand(rng, 2, 3, 4, 4)
    yield _projected(T.global_avg_pool, rng, (2, 3)), x


def _case_linear(rng):
    x, w, b = _rand(rng, 3, 4), _rand(rng, 2, 4), _rand(rng, 2)
    yield _projected(lambda t: T.linear(t, w, b), rng, (3, 2)), x
    yield _projected(lambda t: T.linear(x, t, b), rng, (3, 2)), w
    yield _projected(lambda t: T.linear(x, w, t), rng, (3, 2)), b


def _case_cross_entropy(rng):
    x = _rand(rng, 5, 4, scale=2.0)
    labels = rng.integers(0, 4, size=5)
    yield (lambda t: cross_entropy_logits(t, labels)), x


def _case_bce(rng):
    x = _rand(rng, 2, 3, 4, 4, scale=2.0)
    target = (rng.random((2, 3, 4, 4)) < 0.4).astype(DTYPE)
    yield (lambda t: bce_with_logits(t, target)), x


def _case_total(rng):
    a, b = _rand(rng, 1), _rand(rng, 1)
    lam = float(rng.uniform(0, 2))
    cfg = LossConfig(lam)
    yield (lambda t: T.tsum(total_loss(T.tsum(t), T.tsum(b), cfg))), a
    yield (lambda t: T.tsum(total_loss(T.tsum(a), T.tsum(t), cfg))), b


def _case_residual(rng):
    blk = make_residual_block(rng, 4, 4 * int(rng.integers(1, 3)), stride=int(rng.choice([1, 2])))
    x = _rand(rng, 1, 4, 8, 8)
    with T.no_grad():
        shape = residual_block_forward(x, blk, True).shape
    r = rng.standard_normal(shape).astype(DTYPE)
    for training in (True, False):
        yield (lambda t, tr=training: _weighted(residual_block_forward(t, blk, tr), r)), x
    yield (lambda t: _weighted(residual_block_forward(x, blk, False), r)), blk.conv1.weight


def _case_up_block(rng):
    up = make_up_block(rng, 4, 2, 2)
    x, skip = _rand(rng, 1, 4, 2, 2), _rand(rng, 1, 2, 4, 4)
    r = rng.standard_normal((1, 2, 4, 4)).astype(DTYPE)
    yield (lambda t: _weighted(up_block_forward(t, skip, up, False), r)), x
    yield (lambda t: _weighted(up_block_forward(x, t, up, False), r)), skip
    yield (lambda t: _weighted(up_block_forward(x, skip, up, True), r)), up.conv2.weight


OP_CASES = {
    "conv2d": _case_conv,
    "maxpool2d": _case_maxpool,
    "relu": _case_relu,
    "batchnorm2d": _case_batchnorm,
    "add": _case_add,
    "mul": _case_mul,
    "concat_channels": _case_concat,
    "upsample_nearest2x": _case_upsample,
    "global_avg_pool": _case_gap,
    "linear": _case_linear,
    "cross_entropy_logits": _case_cross_entropy,
    "bce_with_logits": _case_bce,
    "total_loss": _case_total,
    "residual_block": _case_residual,
    "up_block": _case_up_block,
}


def check_op(name: str, seed: int = 0, instances: int = 20, eps: float = 1e-3) -> float:
    """Worst relative error over ``instances`` random cases of one op."""
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        for f, x in OP_CASES[name](rng):
            worst = max(worst, grad_check(f, x, eps=eps))
    return worst


def model_loss_fn(net, x: np.ndarray, labels, masks, training: bool, lam: float = 1.0):
    cfg = LossConfig(lam)

    def loss(inp: Optional[Tensor] = None) -> Tensor:
        logits, m = net.forward(Tensor(x) if inp is None else inp, training=training)
        l_cls = cross_entropy_logits(logits, labels)
        return total_loss(l_cls, bce_with_logits(m, masks), cfg) if m is not None else l_cls

    return loss


def check_model(seed: int = 0, n_f: int = 4, hw: int = 32, n_in: int = 10, max_coords: int = 24,
                eps: float = 1e-3) -> Dict[str, float]:
    """Gradient check of the end-to-end multitask loss on a [1, n_in, hw, hw] input.

    Checks the input and a sample of coordinates from every parameter
    tensor, in both training and eval mode.
    """
    rng = np.random.default_rng(seed)
    net = build(ModelConfig(n_in=n_in, n_f=n_f, input_hw=hw), seed=seed)
    x = rng.random((1, n_in, hw, hw)).astype(DTYPE)
    labels = np.array([int(rng.integers(0, 4))])
    masks = (rng.random((1, n_in, hw, hw)) < 0.3).astype(DTYPE)
    # eval mode needs non-trivial running statistics
    with T.no_grad():
        for _ in range(3):
            net.forward(Tensor(rng.random((4, n_in, hw, hw)).astype(DTYPE)), training=True)
    out = {}
    for training in (False, True):
        loss = model_loss_fn(net, x, labels, masks, training)
        snapshot = [(n, p.stats.mean.copy(), p.stats.var.copy()) for n, p in _convbns(net)]
        mode = "train" if training else "eval"
        xt = Tensor(x)
        out[f"model[{mode}].input"] = grad_check(
            loss, xt, eps=eps,
            max_coords=max_coords, seed=seed)
        for name, p in net.parameters():
            out[f"model[{mode}].{name}"] = grad_check(lambda _: loss(), p, eps=eps, max_coords=max_coords,
                                                      seed=seed)
        for (_, m, v), (_, cb) in zip(snapshot, _convbns(net)):
            cb.stats.mean[...] = m
            cb.stats.var[...] = v
    return out


def _convbns(net):
    found = []
    found.append(("stem", net.stem.conv))
    for blk in net.blocks:
        found += [("c1", blk.conv1), ("c2", blk.conv2)] + ([("sc", blk.shortcut)] if blk.shortcut else [])
    for up in net.up_blocks or []:
        found += [("u1", up.conv1), ("u2", up.conv2)]
    return found


def run_suite(ops: Optional[Iterable[str]] = None, seed: int = 0, instances: int = 20,
              include_model: bool = True) -> Dict[str, float]:
    names = list(OP_CASES) if ops is None else list(ops)
    unknown = [n for n in names if n not in OP_CASES and n != "model"]
    if unknown:
        raise KeyError(f"unknown ops: {unknown}")
    results = {n: check_op(n, seed, instances) for n in names if n != "model"}
    if include_model or "model" in names:
        results.update(check_model(seed))
    return results
