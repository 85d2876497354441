"""The four block families: plain, residual, dense and the dense-residual
hybrid (DRU), as pure functions over tensors plus parameter containers.

All 3x3 convolutions use same-padding, so every block preserves spatial
resolution; resampling happens outside the blocks. Channel arithmetic per
family:

* plain / residual / dense: in_channels -> out_channels
* DRU encoder: in_channels -> in_channels + out_channels (input concatenated)
* DRU decoder: in_channels -> out_channels (input folded in by a 1x1
  projection and summation instead of concatenation)

The DRU block computes k Conv-BN stages whose pre-activation outputs are all
summed before a single ReLU, which keeps a direct gradient path to the first
convolution even when later stage weights collapse to zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .tensor import (
    BatchNormParams,
    ConvParams,
    Tensor,
    add,
    batch_norm,
    batch_norm_params,
    concat_channels,
    conv2d,
    conv_params,
    relu,
)


class BlockKind(enum.Enum):
    PLAIN = "plain"
    RESIDUAL = "residual"
    DENSE = "dense"
    DRU = "dru"


@dataclass
class BlockSpec:
    """Declarative description of one block instance."""

    kind: BlockKind
    in_channels: int
    out_channels: int
    num_convs: int = 2           # DRU only
    growth_rate: int = 16        # dense only
    num_dense_units: int = 2     # dense only

    def validate(self) -> None:
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ConfigurationError(
                f"block channels must be positive, got {self.in_channels}"
                f"->{self.out_channels}")
        if self.kind is BlockKind.DRU and self.num_convs < 2:
            raise ConfigurationError(
                f"DRU blocks need num_convs >= 2, got {self.num_convs}")
        if self.kind is BlockKind.DENSE:
            if self.growth_rate <= 0:
                raise ConfigurationError(
                    f"dense growth_rate must be positive, got {self.growth_rate}")
            if self.num_dense_units < 2:
                raise ConfigurationError(
                    f"dense blocks need num_dense_units >= 2, got {self.num_dense_units}")

    def output_channels(self, decoder: bool = False) -> int:
        if self.kind is BlockKind.DRU and not decoder:
            return self.in_channels + self.out_channels
        return self.out_channels


@dataclass
class ConvBn:
    conv: ConvParams
    bn: BatchNormParams


@dataclass
class PlainBlockParams:
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams


@dataclass
class ResidualBlockParams:
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams
    proj: ConvParams | None = None  # 1x1 shortcut projection when widths differ


@dataclass
class DenseUnitParams:
    bottleneck: ConvParams       # 1x1 down to 4 * growth_rate
    bottleneck_bn: BatchNormParams
    conv: ConvParams             # 3x3 producing growth_rate channels
    bn: BatchNormParams


@dataclass
class DenseLevelParams:
    units: list[DenseUnitParams] = field(default_factory=list)
    transition: ConvParams = None        # 1x1 compressing the concatenation
    transition_bn: BatchNormParams = None


@dataclass
class DruEncoderParams:
    stages: list[ConvBn] = field(default_factory=list)


@dataclass
class DruDecoderParams:
    proj: ConvParams = None      # 1x1 input projection feeding the summation
    stages: list[ConvBn] = field(default_factory=list)


BlockParams = (PlainBlockParams | ResidualBlockParams | DenseLevelParams
               | DruEncoderParams | DruDecoderParams)


# ---------------------------------------------------------------------------
# initialisation


def init_plain_block(spec: BlockSpec, rng: np.random.Generator,
                     dtype=np.float32) -> PlainBlockParams:
    c_in, c_out = spec.in_channels, spec.out_channels
    return PlainBlockParams(
        conv1=conv_params(c_in, c_out, 3, padding=1, rng=rng, dtype=dtype),
        bn1=batch_norm_params(c_out, dtype=dtype),
        conv2=conv_params(c_out, c_out, 3, padding=1, rng=rng, dtype=dtype),
        bn2=batch_norm_params(c_out, dtype=dtype),
    )


def init_residual_block(spec: BlockSpec, rng: np.random.Generator,
                        dtype=np.float32) -> ResidualBlockParams:
    c_in, c_out = spec.in_channels, spec.out_channels
    proj = None
    if c_in != c_out:
        proj = conv_params(c_in, c_out, 1, rng=rng, dtype=dtype)
    return ResidualBlockParams(
        conv1=conv_params(c_in, c_out, 3, padding=1, rng=rng, dtype=dtype),
        bn1=batch_norm_params(c_out, dtype=dtype),
        conv2=conv_params(c_out, c_out, 3, padding=1, rng=rng, dtype=dtype),
        bn2=batch_norm_params(c_out, dtype=dtype),
        proj=proj,
    )


def init_dense_level(spec: BlockSpec, rng: np.random.Generator,
                     dtype=np.float32) -> DenseLevelParams:
    g = spec.growth_rate
    units = []
    for i in range(spec.num_dense_units):
        c_unit_in = spec.in_channels + i * g
        units.append(DenseUnitParams(
            bottleneck=conv_params(c_unit_in, 4 * g, 1, rng=rng, dtype=dtype),
            bottleneck_bn=batch_norm_params(4 * g, dtype=dtype),
            conv=conv_params(4 * g, g, 3, padding=1, rng=rng, dtype=dtype),
            bn=batch_norm_params(g, dtype=dtype),
        ))
    c_concat = spec.in_channels + spec.num_dense_units * g
    return DenseLevelParams(
        units=units,
        transition=conv_params(c_concat, spec.out_channels, 1, rng=rng, dtype=dtype),
        transition_bn=batch_norm_params(spec.out_channels, dtype=dtype),
    )


def init_dru_encoder_block(spec: BlockSpec, rng: np.random.Generator,
                           dtype=np.float32) -> DruEncoderParams:
    stages = []
    for i in range(spec.num_convs):
        c = spec.in_channels if i == 0 else spec.out_channels
        stages.append(ConvBn(
            conv=conv_params(c, spec.out_channels, 3, padding=1, rng=rng, dtype=dtype),
            bn=batch_norm_params(spec.out_channels, dtype=dtype),
        ))
    return DruEncoderParams(stages=stages)


def init_dru_decoder_block(spec: BlockSpec, rng: np.random.Generator,
                           dtype=np.float32) -> DruDecoderParams:
    proj = conv_params(spec.in_channels, spec.out_channels, 1, rng=rng, dtype=dtype)
    stages = []
    for i in range(spec.num_convs):
        c = spec.in_channels if i == 0 else spec.out_channels
        stages.append(ConvBn(
            conv=conv_params(c, spec.out_channels, 3, padding=1, rng=rng, dtype=dtype),
            bn=batch_norm_params(spec.out_channels, dtype=dtype),
        ))
    return DruDecoderParams(proj=proj, stages=stages)


def init_block(spec: BlockSpec, rng: np.random.Generator, *, decoder: bool = False,
               dtype=np.float32) -> BlockParams:
    """Initialise parameters for one block of the requested family."""
    spec.validate()
    if spec.kind is BlockKind.PLAIN:
        return init_plain_block(spec, rng, dtype)
    if spec.kind is BlockKind.RESIDUAL:
        return init_residual_block(spec, rng, dtype)
    if spec.kind is BlockKind.DENSE:
        return init_dense_level(spec, rng, dtype)
    if decoder:
        return init_dru_decoder_block(spec, rng, dtype)
    return init_dru_encoder_block(spec, rng, dtype)


# ---------------------------------------------------------------------------
# forward passes


def plain_block(x: Tensor, p: PlainBlockParams, mode: str = "training") -> Tensor:
    """Conv-BN-ReLU twice, no skip connections."""
    h = relu(batch_norm(conv2d(x, p.conv1), p.bn1, mode))
    return relu(batch_norm(conv2d(h, p.conv2), p.bn2, mode))


def residual_block(x: Tensor, p: ResidualBlockParams, mode: str = "training") -> Tensor:
    """Two Conv-BN stages with an outer input-to-output shortcut."""
    h = relu(batch_norm(conv2d(x, p.conv1), p.bn1, mode))
    h = batch_norm(conv2d(h, p.conv2), p.bn2, mode)
    shortcut = x if p.proj is None else conv2d(x, p.proj)
    return relu(add(h, shortcut))


def dense_level(x: Tensor, p: DenseLevelParams, mode: str = "training") -> Tensor:
    """Densely connected units plus a 1x1 transition to out_channels.

    Unit i consumes the concatenation of the level input with every previous
    unit's output, squeezes through a 1x1 bottleneck, then grows
    growth_rate channels with a 3x3 conv.
    """
    cat = x
    for unit in p.units:
        h = relu(batch_norm(conv2d(cat, unit.bottleneck), unit.bottleneck_bn, mode))
        h = relu(batch_norm(conv2d(h, unit.conv), unit.bn, mode))
        cat = concat_channels(cat, h)
    return relu(batch_norm(conv2d(cat, p.transition), p.transition_bn, mode))


def dru_encoder_block(x: Tensor, p: DruEncoderParams, mode: str = "training") -> Tensor:
    """Sum of all Conv-BN stage outputs, one ReLU, input concatenated on."""
    f = batch_norm(conv2d(x, p.stages[0].conv), p.stages[0].bn, mode)
    total = f
    for stage in p.stages[1:]:
        f = batch_norm(conv2d(relu(f), stage.conv), stage.bn, mode)
        total = add(total, f)
    return concat_channels(x, relu(total))


def dru_decoder_block(x: Tensor, p: DruDecoderParams, mode: str = "training") -> Tensor:
    """Like the encoder stages, but the input joins by 1x1-projected summation."""
    projected = conv2d(x, p.proj)
    f = batch_norm(conv2d(x, p.stages[0].conv), p.stages[0].bn, mode)
    total = f
    for stage in p.stages[1:]:
        f = batch_norm(conv2d(relu(f), stage.conv), stage.bn, mode)
        total = add(total, f)
    return relu(add(total, projected))


def dru_encoder_block_two_conv(x: Tensor, p: DruEncoderParams,
                               mode: str = "training") -> Tensor:
    """Dedicated two-conv path; the k-general loop must reduce to this bitwise."""
    if len(p.stages) != 2:
        raise ConfigurationError("two-conv path requires exactly 2 stages")
    f1 = batch_norm(conv2d(x, p.stages[0].conv), p.stages[0].bn, mode)
    f2 = batch_norm(conv2d(relu(f1), p.stages[1].conv), p.stages[1].bn, mode)
    return concat_channels(x, relu(add(f1, f2)))


def dru_decoder_block_two_conv(x: Tensor, p: DruDecoderParams,
                               mode: str = "training") -> Tensor:
    """Dedicated two-conv decoder path, mirroring dru_encoder_block_two_conv."""
    if len(p.stages) != 2:
        raise ConfigurationError("two-conv path requires exactly 2 stages")
    projected = conv2d(x, p.proj)
    f1 = batch_norm(conv2d(x, p.stages[0].conv), p.stages[0].bn, mode)
    f2 = batch_norm(conv2d(relu(f1), p.stages[1].conv), p.stages[1].bn, mode)
    return relu(add(add(f1, f2), projected))


def forward_block(x: Tensor, kind: BlockKind, params: BlockParams,
                  mode: str = "training") -> Tensor:
    """Dispatch on parameter container type (DRU has two container flavours)."""
    if isinstance(params, PlainBlockParams):
        return plain_block(x, params, mode)
    if isinstance(params, ResidualBlockParams):
        return residual_block(x, params, mode)
    if isinstance(params, DenseLevelParams):
        return dense_level(x, params, mode)
    if isinstance(params, DruEncoderParams):
        return dru_encoder_block(x, params, mode)
    if isinstance(params, DruDecoderParams):
        return dru_decoder_block(x, params, mode)
    raise ConfigurationError(f"unknown block parameters: {type(params).__name__}")


# ---------------------------------------------------------------------------
# naming, for the flat parameter map and checkpoints


def _conv_entries(prefix: str, p: ConvParams):
    return [(f"{prefix}.weight", p.weight), (f"{prefix}.bias", p.bias)]


def _bn_entries(prefix: str, p: BatchNormParams):
    learnable = [(f"{prefix}.gamma", p.gamma), (f"{prefix}.beta", p.beta)]
    buffers = [(f"{prefix}.running_mean", p.running_mean),
               (f"{prefix}.running_var", p.running_var)]
    return learnable, buffers


def named_block_entries(prefix: str, params: BlockParams):
    """Return (learnables, buffers) as (name, obj) lists, names unique."""
    learn: list = []
    buf: list = []

    def take_conv(name, conv):
        learn.extend(_conv_entries(name, conv))

    def take_bn(name, bn):
        a, b = _bn_entries(name, bn)
        learn.extend(a)
        buf.extend(b)

    if isinstance(params, (PlainBlockParams, ResidualBlockParams)):
        take_conv(f"{prefix}.conv1", params.conv1)
        take_bn(f"{prefix}.bn1", params.bn1)
        take_conv(f"{prefix}.conv2", params.conv2)
        take_bn(f"{prefix}.bn2", params.bn2)
        if isinstance(params, ResidualBlockParams) and params.proj is not None:
            take_conv(f"{prefix}.proj", params.proj)
    elif isinstance(params, DenseLevelParams):
        for i, unit in enumerate(params.units, start=1):
            take_conv(f"{prefix}.unit{i}.bottleneck", unit.bottleneck)
            take_bn(f"{prefix}.unit{i}.bottleneck_bn", unit.bottleneck_bn)
            take_conv(f"{prefix}.unit{i}.conv", unit.conv)
            take_bn(f"{prefix}.unit{i}.bn", unit.bn)
        take_conv(f"{prefix}.transition", params.transition)
        take_bn(f"{prefix}.transition_bn", params.transition_bn)
    elif isinstance(params, (DruEncoderParams, DruDecoderParams)):
        if isinstance(params, DruDecoderParams):
            take_conv(f"{prefix}.proj", params.proj)
        for i, stage in enumerate(params.stages, start=1):
            take_conv(f"{prefix}.conv{i}", stage.conv)
            take_bn(f"{prefix}.bn{i}", stage.bn)
    else:
        raise ConfigurationError(f"unknown block parameters: {type(params).__name__}")
    return learn, buf


def set_block_mode(params: BlockParams, mode: str) -> None:
    """Propagate a mode flag onto every BatchNormParams in the container."""
    if isinstance(params, (PlainBlockParams, ResidualBlockParams)):
        params.bn1.mode = mode
        params.bn2.mode = mode
    elif isinstance(params, DenseLevelParams):
        for unit in params.units:
            unit.bottleneck_bn.mode = mode
            unit.bn.mode = mode
        params.transition_bn.mode = mode
    elif isinstance(params, (DruEncoderParams, DruDecoderParams)):
        for stage in params.stages:
            stage.bn.mode = mode
