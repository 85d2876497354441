"""Gradient-check suite covering every primitive op and block family.

Used by the test suite and by the ``inspect --gradcheck`` command. Each entry
builds seeded double-precision inputs, runs :func:`finite_diff_check` and
returns the report. Primitive checks use the default step 1e-5; block-level
checks use 1e-6 because compositions of BN and ReLU put activations near the
ReLU kink, where a wide central-difference probe straddles the corner.
"""

from __future__ import annotations

import numpy as np

from .blocks import (
    BlockKind,
    BlockSpec,
    init_block,
    named_block_entries,
    forward_block,
)
from .tensor import (
    BatchNormParams,
    ConvParams,
    GradCheckReport,
    Tensor,
    add,
    batch_norm,
    batch_norm_params,
    concat_channels,
    conv2d,
    conv_params,
    finite_diff_check,
    max_pool_2x2,
    mul,
    relu,
    softmax_cross_entropy,
    tensor_sum,
    up_conv_2x2,
)


def block_check_tensors(x: Tensor, params) -> list[Tensor]:
    """Input plus learnables worth probing in a block-level check.

    Biases of convolutions that feed straight into batch norm are excluded:
    BN's mean subtraction makes them exact flat directions of the loss, so a
    finite-difference probe only measures rounding noise there. The only
    biased conv that bypasses BN in any block is the 1x1 projection.
    """
    learn, _ = named_block_entries("blk", params)
    tensors = [x]
    for name, t in learn:
        if name.endswith(".bias") and not name.endswith("proj.bias"):
            continue
        tensors.append(t)
    return tensors


def _primitive_entries():
    shapes = [(1, 1, 4, 4), (2, 3, 6, 6), (3, 2, 4, 8)]
    entries = []
    for si, shape in enumerate(shapes):
        n, c, h, w = shape
        seed = 100 + si

        def check_conv(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=shape), requires_grad=True)
            p = conv_params(shape[1], 3, 3, padding=1, rng=rng, dtype=np.float64)
            return finite_diff_check(
                lambda *ts: tensor_sum(conv2d(x, p)),
                [x, p.weight, p.bias])

        def check_bn_training(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=shape), requires_grad=True)
            p = batch_norm_params(shape[1], dtype=np.float64)
            p.gamma.requires_grad = p.beta.requires_grad = True
            weights = Tensor(rng.normal(size=shape))
            return finite_diff_check(
                lambda *ts: tensor_sum(mul(batch_norm(x, p, "training"), weights)),
                [x, p.gamma, p.beta])

        def check_bn_inference(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=shape), requires_grad=True)
            p = batch_norm_params(shape[1], dtype=np.float64)
            p.running_mean[:] = rng.normal(size=shape[1])
            p.running_var[:] = rng.uniform(0.5, 2.0, size=shape[1])
            return finite_diff_check(
                lambda *ts: tensor_sum(batch_norm(x, p, "inference")),
                [x, p.gamma, p.beta])

        def check_relu(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            data = rng.normal(size=shape)
            data[np.abs(data) < 1e-3] = 0.25   # stay off the kink
            x = Tensor(data, requires_grad=True)
            return finite_diff_check(lambda t: tensor_sum(relu(t)), [x])

        def check_pool(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=shape), requires_grad=True)
            return finite_diff_check(lambda t: tensor_sum(max_pool_2x2(t)), [x])

        def check_upconv(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=shape), requires_grad=True)
            p = conv_params(shape[1], 2, 2, rng=rng, dtype=np.float64)
            q = ConvParams(p.weight, p.bias, stride=2)
            return finite_diff_check(
                lambda *ts: tensor_sum(up_conv_2x2(x, q)), [x, q.weight, q.bias])

        def check_concat(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            a = Tensor(rng.normal(size=shape), requires_grad=True)
            b = Tensor(rng.normal(size=shape), requires_grad=True)
            return finite_diff_check(
                lambda s, t: tensor_sum(concat_channels(s, t)), [a, b])

        def check_add(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            a = Tensor(rng.normal(size=shape), requires_grad=True)
            b = Tensor(rng.normal(size=shape), requires_grad=True)
            return finite_diff_check(lambda s, t: tensor_sum(add(s, t)), [a, b])

        def check_mul(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            a = Tensor(rng.normal(size=shape), requires_grad=True)
            b = Tensor(rng.normal(size=shape), requires_grad=True)
            return finite_diff_check(lambda s, t: tensor_sum(mul(s, t)), [a, b])

        def check_xent(shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            n, k, h, w = shape
            logits = Tensor(rng.normal(size=shape), requires_grad=True)
            labels = rng.integers(0, k, size=(n, h, w))
            return finite_diff_check(
                lambda t: softmax_cross_entropy(t, labels), [logits])

        entries += [
            (f"conv2d[{shape}]", check_conv),
            (f"batch_norm.training[{shape}]", check_bn_training),
            (f"batch_norm.inference[{shape}]", check_bn_inference),
            (f"relu[{shape}]", check_relu),
            (f"max_pool_2x2[{shape}]", check_pool),
            (f"up_conv_2x2[{shape}]", check_upconv),
            (f"concat_channels[{shape}]", check_concat),
            (f"add[{shape}]", check_add),
            (f"mul[{shape}]", check_mul),
            (f"softmax_cross_entropy[{shape}]", check_xent),
        ]
    return entries


_BLOCK_CASES = [
    # (label, kind, decoder, c_in, c_out, input shape, seed)
    ("plain", BlockKind.PLAIN, False, 2, 3, (1, 2, 4, 4), 7),
    ("plain", BlockKind.PLAIN, False, 3, 2, (2, 3, 4, 4), 8),
    ("plain", BlockKind.PLAIN, False, 2, 4, (1, 2, 6, 6), 9),
    ("residual", BlockKind.RESIDUAL, False, 2, 3, (1, 2, 4, 4), 17),
    ("residual", BlockKind.RESIDUAL, False, 3, 3, (2, 3, 4, 4), 18),
    ("residual", BlockKind.RESIDUAL, False, 2, 4, (1, 2, 6, 6), 19),
    ("dense", BlockKind.DENSE, False, 2, 3, (1, 2, 4, 4), 27),
    ("dense", BlockKind.DENSE, False, 3, 2, (2, 3, 4, 4), 28),
    ("dense", BlockKind.DENSE, False, 2, 4, (1, 2, 6, 6), 29),
    ("dru_encoder", BlockKind.DRU, False, 2, 3, (1, 2, 4, 4), 37),
    ("dru_encoder", BlockKind.DRU, False, 3, 2, (2, 3, 4, 4), 38),
    ("dru_encoder", BlockKind.DRU, False, 2, 4, (1, 2, 6, 6), 39),
    ("dru_decoder", BlockKind.DRU, True, 2, 3, (1, 2, 4, 4), 47),
    ("dru_decoder", BlockKind.DRU, True, 3, 2, (2, 3, 4, 4), 48),
    ("dru_decoder", BlockKind.DRU, True, 2, 4, (1, 2, 6, 6), 49),
]


def _block_entries():
    entries = []
    for label, kind, decoder, c_in, c_out, shape, seed in _BLOCK_CASES:
        def check(kind=kind, decoder=decoder, c_in=c_in, c_out=c_out,
                  shape=shape, seed=seed):
            rng = np.random.default_rng(seed)
            spec = BlockSpec(kind, c_in, c_out, growth_rate=2)
            params = init_block(spec, rng, decoder=decoder, dtype=np.float64)
            x = Tensor(rng.normal(size=shape), requires_grad=True)
            tensors = block_check_tensors(x, params)
            return finite_diff_check(
                lambda *ts: tensor_sum(forward_block(x, kind, params, "training")),
                tensors, step=1e-6)
        entries.append((f"{label}[{shape}]", check))
    return entries


def gradcheck_suite() -> list[tuple[str, GradCheckReport]]:
    """Run every check; returns (name, report) pairs in a fixed order."""
    results = []
    for name, check in _primitive_entries() + _block_entries():
        results.append((name, check()))
    return results
