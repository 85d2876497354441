"""Dense 4-D tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays laid out (batch, channels, height, width) and
record the operations that produced them, so calling :meth:`Tensor.backward`
on a scalar result fills the ``grad`` buffer of every reachable input.
Training runs in single precision; the finite-difference gradient checker
(:func:`finite_diff_check`) runs in double precision.

Gradient accumulation within each output element follows a fixed sequential
order, so repeated runs with the same seed are bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError

DEFAULT_DTYPE = np.float32


class Tensor:
    """Node in the autodiff graph: an ndarray plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode pass: accumulate d(self)/d(leaf) into every leaf's grad."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    assert np.all(np.isfinite(data)), "non-finite values in forward output"
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution; grads never change the parameter dtype."""
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    """Learnable 2-D convolution: weight (C_out, C_in, kH, kW), bias (C_out,)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNormParams:
    """Per-channel scale/shift with running statistics.

    gamma/beta are learnable; running_mean/running_var are plain buffers
    updated by exponential moving average during training-mode passes.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "training"


def conv_params(c_in: int, c_out: int, kernel_size: int, *, stride: int = 1,
                padding: int = 0, rng: np.random.Generator,
                dtype=DEFAULT_DTYPE) -> ConvParams:
    """He-initialised convolution: weight ~ N(0, sqrt(2/fan_in)), bias 0."""
    k = kernel_size
    std = math.sqrt(2.0 / (c_in * k * k))
    weight = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)
    bias = np.zeros(c_out, dtype=dtype)
    return ConvParams(Tensor(weight, requires_grad=True),
                      Tensor(bias, requires_grad=True), stride, padding)


def batch_norm_params(channels: int, *, momentum: float = 0.1,
                      epsilon: float = 1e-5, dtype=DEFAULT_DTYPE) -> BatchNormParams:
    return BatchNormParams(
        gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        momentum=momentum,
        epsilon=epsilon,
    )


# ---------------------------------------------------------------------------
# primitive operations


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation of x (N, C_in, H, W) with p.weight, plus bias."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects a 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = p.weight.shape
    if c != c_in:
        raise ConfigurationError(
            f"conv2d: input has {c} channels but kernel expects {c_in}")
    s, pad = p.stride, p.padding
    h_out, h_rem = divmod(h + 2 * pad - kh, s)
    w_out, w_rem = divmod(w + 2 * pad - kw, s)
    h_out += 1
    w_out += 1
    if h_rem or w_rem or h_out <= 0 or w_out <= 0:
        raise ConfigurationError(
            f"conv2d: input {h}x{w} with kernel {kh}x{kw}, stride {s}, padding {pad} "
            f"does not produce integral positive output dims")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((n, c_in, kh, kw, h_out, w_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + s * h_out:s, j:j + s * w_out:s]
    cols_mat = cols.reshape(n, c_in * kh * kw, h_out * w_out)
    w_mat = p.weight.data.reshape(c_out, -1)
    out = np.matmul(w_mat, cols_mat)
    out = out + p.bias.data[:, None]
    out = out.reshape(n, c_out, h_out, w_out)

    def backward(g: np.ndarray) -> None:
        gm = g.reshape(n, c_out, h_out * w_out)
        if p.weight.requires_grad:
            gw = np.matmul(gm, cols_mat.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(p.weight, gw.reshape(p.weight.shape))
        if p.bias.requires_grad:
            _accumulate(p.bias, gm.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w_mat.T, gm).reshape(n, c_in, kh, kw, h_out, w_out)
            dxp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + s * h_out:s, j:j + s * w_out:s] += dcols[:, :, i, j]
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            _accumulate(x, dx)

    return _result(out, (x, p.weight, p.bias), backward)


def batch_norm(x: Tensor, p: BatchNormParams, mode: str | None = None) -> Tensor:
    """Per-channel normalisation; batch statistics in training mode, running
    statistics at inference. Training-mode passes update the running buffers."""
    mode = p.mode if mode is None else mode
    if mode not in ("training", "inference"):
        raise ConfigurationError(f"batch_norm: unknown mode {mode!r}")
    if x.data.ndim != 4:
        raise ConfigurationError(f"batch_norm expects a 4-D input, got shape {x.shape}")
    n_b, c, h, w = x.shape
    if c != p.gamma.shape[0]:
        raise ConfigurationError(
            f"batch_norm: input has {c} channels but parameters cover {p.gamma.shape[0]}")
    axes = (0, 2, 3)
    n = n_b * h * w
    if mode == "training":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        m = p.momentum
        p.running_mean[...] = (1.0 - m) * p.running_mean + m * mu
        p.running_var[...] = (1.0 - m) * p.running_var + m * unbiased
    else:
        mu = p.running_mean
        var = p.running_var
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = p.gamma.data[None, :, None, None] * xhat + p.beta.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if p.gamma.requires_grad:
            _accumulate(p.gamma, (g * xhat).sum(axis=axes))
        if p.beta.requires_grad:
            _accumulate(p.beta, g.sum(axis=axes))
        if x.requires_grad:
            gs = g * p.gamma.data[None, :, None, None]
            if mode == "training":
                mean_gs = gs.mean(axis=axes)
                mean_gs_xhat = (gs * xhat).mean(axis=axes)
                dx = inv_std[None, :, None, None] * (
                    gs - mean_gs[None, :, None, None]
                    - xhat * mean_gs_xhat[None, :, None, None])
            else:
                dx = gs * inv_std[None, :, None, None]
            _accumulate(x, dx)

    return _result(out, (x, p.gamma, p.beta), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, np.zeros((), dtype=x.data.dtype))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result(out, (x,), backward)


def max_pool_2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Gradient routes to the argmax of each
    window; ties break to the first position in row-major window order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max_pool_2x2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (x.data.reshape(n, c, h2, 2, w2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h2, w2, 4))
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        dwin = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = (dwin.reshape(n, c, h2, w2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        _accumulate(x, dx)

    return _result(out, (x,), backward)


def up_conv_2x2(x: Tensor, p: ConvParams) -> Tensor:
    """Transpose convolution with a 2x2 kernel at stride 2: doubles H and W."""
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = p.weight.shape
    if (kh, kw) != (2, 2):
        raise ConfigurationError(f"up_conv_2x2 needs a 2x2 kernel, got {kh}x{kw}")
    if c != c_in:
        raise ConfigurationError(
            f"up_conv_2x2: input has {c} channels but kernel expects {c_in}")
    wdat = p.weight.data
    out = np.empty((n, c_out, 2 * h, 2 * w), dtype=np.result_type(x.data, wdat))
    for i in range(2):
        for j in range(2):
            out[:, :, i::2, j::2] = np.einsum("nchw,oc->nohw", x.data, wdat[:, :, i, j])
    out += p.bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if p.bias.requires_grad:
            _accumulate(p.bias, g.sum(axis=(0, 2, 3)))
        if p.weight.requires_grad:
            gw = np.empty(wdat.shape, dtype=g.dtype)
            for i in range(2):
                for j in range(2):
                    gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g[:, :, i::2, j::2], x.data)
            _accumulate(p.weight, gw)
        if x.requires_grad:
            dx = np.zeros((n, c, h, w), dtype=g.dtype)
            for i in range(2):
                for j in range(2):
                    dx += np.einsum("nohw,oc->nchw", g[:, :, i::2, j::2], wdat[:, :, i, j])
            _accumulate(x, dx)

    return _result(out, (x, p.weight, p.bias), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis, a's channels first."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigurationError(
            f"concat_channels: batch/spatial mismatch, {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return _result(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of identically shaped tensors."""
    if a.shape != b.shape:
        raise ConfigurationError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of identically shaped tensors."""
    if a.shape != b.shape:
        raise ConfigurationError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(out, (a, b), backward)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor. Handy for composing losses."""
    out = x.data.sum()

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.ones_like(x.data) * g)

    return _result(out, (x,), backward)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable softmax over ``axis`` (plain arrays, no autodiff)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross entropy between logits (N, K, H, W) and integer
    labels (N, H, W). Gradient is (softmax - one_hot) / (N*H*W)."""
    if logits.data.ndim != 4:
        raise ConfigurationError(
            f"softmax_cross_entropy expects 4-D logits, got shape {logits.shape}")
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ConfigurationError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not match "
            f"logits {(n, h, w)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {labels.dtype}")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        ni, hi, wi = (int(v) for v in np.argwhere(bad)[0])
        raise DataError(
            f"label {labels[ni, hi, wi]} out of range [0, {k}) at pixel "
            f"(n={ni}, h={hi}, w={wi})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    idx = labels[:, None, :, :]
    picked = np.take_along_axis(logp, idx, axis=1)
    loss = -picked.mean()

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            grad = np.exp(logp)
            np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
            grad *= float(g) / labels.size
            _accumulate(logits, grad)

    return _result(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    max_rel_error: float
    tolerance: float
    passed: bool
    per_input: list[float]


def finite_diff_check(fn, inputs: list[Tensor], *, step: float = 1e-5,
                      tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``fn(*inputs)`` against
    central finite differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8). All
    inputs must be float64; a failing comparison is reported, not raised.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ConfigurationError("finite_diff_check requires float64 inputs")
        t.grad = None
    out = fn(*inputs)
    if out.data.shape != ():
        raise ConfigurationError(
            "finite_diff_check needs a scalar-valued fn; compose with tensor_sum")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    per_input: list[float] = []
    for t, ga in zip(inputs, analytic):
        if not t.requires_grad:
            per_input.append(0.0)
            continue
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn(*inputs).data)
            flat[i] = orig - step
            f_minus = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(numeric - gflat[i]) / max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, rel)
        per_input.append(worst)

    max_err = max(per_input) if per_input else 0.0
    return GradCheckReport(max_err, tolerance, max_err < tolerance, per_input)
