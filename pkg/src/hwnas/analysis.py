"""Exact multiply-add and parameter counting, plus cost-model features.

Counting conventions
--------------------
One multiply-accumulate counts as 1. Kernels only: biases, batch-norm
parameters, elementwise adds (residuals) and activations count as zero.
With ``h', w'`` the post-stride output size and ``sC1``/``eC2`` the rounded
internal widths, the per-layer multiply-adds are::

    ibn:    h*w*(C1*sC1)   + h'*w'*(K^2*sC1)     + h'*w'*(sC1*C2)
    fused:  h'*w'*(K^2*C1*sC1)                   + h'*w'*(sC1*C2)
    tucker: h*w*(C1*sC1)   + h'*w'*(K^2*sC1*eC2) + h'*w'*(eC2*C2)

A squeeze-excite block, when enabled, adds two fully connected layers over
the layer output width C at squeeze ratio 0.25: ``2 * C * round8(0.25*C)``
multiply-adds and the same number of parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

from .arch import (
    IMAGE_CHANNELS,
    STEM_KERNEL,
    InvalidArchitectureError,
    LayerSpec,
    NetworkSpec,
    derive_shapes,
    iter_layers,
    round8,
)
from .space import SpaceSpec

SE_RATIO = 0.25

# Operation classes the device simulators price separately.
OP_CLASSES = ("regular_conv", "depthwise_conv", "pointwise_conv", "se_block")

STEM_BUCKET = "stem"


class UnknownAtomError(ValueError):
    """A layer's kind atom does not belong to the given space."""


def _check_layer(layer: LayerSpec) -> None:
    """Structural checks only. Ratio-range rules are a search-space concern;
    the cost formulas stay consistent for any positive ratio (a tucker layer
    with ratios 1.0 simply degenerates to a bottleneck-free stack)."""
    kind = layer.kind
    problems = []
    if kind.op not in ("ibn", "fused", "tucker"):
        problems.append(f"unknown op {kind.op!r}")
    else:
        if kind.kernel < 1 or kind.kernel % 2 == 0:
            problems.append(f"kernel must be odd and >= 1, got {kind.kernel}")
        if kind.op in ("ibn", "fused"):
            if kind.expansion is None or kind.expansion <= 0:
                problems.append(f"expansion must be positive, got {kind.expansion}")
        elif (
            kind.input_compression is None or kind.input_compression <= 0
            or kind.output_compression is None or kind.output_compression <= 0
        ):
            problems.append("compression ratios must be positive")
    if layer.c_in < 1 or layer.c_out < 1:
        problems.append(f"channel counts must be >= 1 ({layer.c_in} -> {layer.c_out})")
    if layer.stride not in (1, 2):
        problems.append(f"stride must be 1 or 2, got {layer.stride}")
    if problems:
        raise InvalidArchitectureError(problems)


def internal_widths(layer: LayerSpec) -> tuple[int, ...]:
    """Rounded internal channel widths of the layer's middle stages."""
    kind = layer.kind
    if kind.op in ("ibn", "fused"):
        return (round8(kind.expansion * layer.c_in),)
    return (
        round8(kind.input_compression * layer.c_in),
        round8(kind.output_compression * layer.c_out),
    )


def se_width(c_out: int) -> int:
    return round8(SE_RATIO * c_out)


def layer_units(layer: LayerSpec, h: int, w: int) -> tuple[tuple[str, int], ...]:
    """Decompose a layer into (op class, multiply-adds) constituents.

    ``h, w`` are the layer's input spatial dims; the stride applies at the
    layer's KxK stage.
    """
    _check_layer(layer)
    if h < 1 or w < 1:
        raise InvalidArchitectureError([f"spatial dims must be >= 1 ({h}x{w})"])
    kind = layer.kind
    k2 = kind.kernel * kind.kernel
    ho, wo = -(-h // layer.stride), -(-w // layer.stride)
    units: list[tuple[str, int]] = []
    if kind.op == "ibn":
        (sc1,) = internal_widths(layer)
        units.append(("pointwise_conv", h * w * layer.c_in * sc1))
        units.append(("depthwise_conv", ho * wo * k2 * sc1))
        units.append(("pointwise_conv", ho * wo * sc1 * layer.c_out))
    elif kind.op == "fused":
        (sc1,) = internal_widths(layer)
        units.append(("regular_conv", ho * wo * k2 * layer.c_in * sc1))
        units.append(("pointwise_conv", ho * wo * sc1 * layer.c_out))
    else:
        sc1, ec2 = internal_widths(layer)
        units.append(("pointwise_conv", h * w * layer.c_in * sc1))
        units.append(("regular_conv", ho * wo * k2 * sc1 * ec2))
        units.append(("pointwise_conv", ho * wo * ec2 * layer.c_out))
    if layer.use_se:
        units.append(("se_block", 2 * layer.c_out * se_width(layer.c_out)))
    return tuple(units)


def layer_madds(layer: LayerSpec, h: int, w: int) -> int:
    """Total multiply-adds of one layer at input size h x w."""
    return sum(m for _, m in layer_units(layer, h, w))


def layer_params(layer: LayerSpec) -> int:
    """Kernel parameter count of one layer (biases and norms excluded)."""
    _check_layer(layer)
    kind = layer.kind
    k2 = kind.kernel * kind.kernel
    if kind.op == "ibn":
        (sc1,) = internal_widths(layer)
        params = layer.c_in * sc1 + k2 * sc1 + sc1 * layer.c_out
    elif kind.op == "fused":
        (sc1,) = internal_widths(layer)
        params = k2 * layer.c_in * sc1 + sc1 * layer.c_out
    else:
        sc1, ec2 = internal_widths(layer)
        params = layer.c_in * sc1 + k2 * sc1 * ec2 + ec2 * layer.c_out
    if layer.use_se:
        params += 2 * layer.c_out * se_width(layer.c_out)
    return params


def _stem_group(h_out: int, w_out: int, stem_channels: int) -> tuple[tuple[str, int], ...]:
    madds = h_out * w_out * STEM_KERNEL * STEM_KERNEL * IMAGE_CHANNELS * stem_channels
    return (("regular_conv", madds),)


def stem_params(net: NetworkSpec) -> int:
    return STEM_KERNEL * STEM_KERNEL * IMAGE_CHANNELS * net.stem_channels


@dataclass(frozen=True)
class CostBreakdown:
    """Per-layer multiply-adds and parameters, plus stem and totals."""

    stem_madds: int
    stem_params: int
    per_layer_madds: tuple[int, ...]
    per_layer_params: tuple[int, ...]
    total_madds: int
    total_params: int


@lru_cache(maxsize=65536)
def network_units(net: NetworkSpec) -> tuple[tuple[tuple[str, int], ...], ...]:
    """Constituent conv units grouped per layer, stem group first."""
    trace = derive_shapes(net)
    groups = [_stem_group(trace.stem.height, trace.stem.width, net.stem_channels)]
    h, w = trace.stem.height, trace.stem.width
    for (_, _, layer), entry in zip(iter_layers(net), trace.layers):
        groups.append(layer_units(layer, h, w))
        h, w = entry.height, entry.width
    return tuple(groups)


@lru_cache(maxsize=65536)
def network_cost(net: NetworkSpec) -> CostBreakdown:
    """Whole-network cost including the stem conv."""
    groups = network_units(net)
    per_madds = tuple(sum(m for _, m in g) for g in groups[1:])
    per_params = tuple(layer_params(layer) for _, _, layer in iter_layers(net))
    s_madds = sum(m for _, m in groups[0])
    s_params = stem_params(net)
    return CostBreakdown(
        stem_madds=s_madds,
        stem_params=s_params,
        per_layer_madds=per_madds,
        per_layer_params=per_params,
        total_madds=s_madds + sum(per_madds),
        total_params=s_params + sum(per_params),
    )


# ---------------------------------------------------------------------------
# Cost-model features
# ---------------------------------------------------------------------------

def channel_band(c: int) -> int:
    """Power-of-two band holding a channel count (optional coarse bucketing)."""
    return 1 << max(0, math.ceil(math.log2(c)))


def bucket_id(atom_id: str, c_in: int, c_out: int, channel_bands: bool = False) -> str:
    if channel_bands:
        c_in, c_out = channel_band(c_in), channel_band(c_out)
    return f"{atom_id}|{c_in}|{c_out}"


def net_feature_counts(net: NetworkSpec, channel_bands: bool = False) -> dict[str, int]:
    """Bucket counts of a network, no space membership check (stem included)."""
    counts: dict[str, int] = {}
    stem_key = bucket_id(STEM_BUCKET, IMAGE_CHANNELS, net.stem_channels, channel_bands)
    counts[stem_key] = 1
    for _, _, layer in iter_layers(net):
        key = bucket_id(layer.kind.atom_id, layer.c_in, layer.c_out, channel_bands)
        counts[key] = counts.get(key, 0) + 1
    return counts


def extract_features(
    net: NetworkSpec, space: SpaceSpec, channel_bands: bool = False
) -> dict[str, int]:
    """Sparse bucket -> count map; buckets cross layer atom with channel pair.

    One increment per layer at (atom, c_in, c_out); the stem gets a bucket of
    its own, so counts sum to the layer count plus one. Raises
    :class:`UnknownAtomError` for layers whose atom is outside the space.
    """
    atoms = set(space.kind_atoms())
    for bi, li, layer in iter_layers(net):
        if layer.kind not in atoms:
            raise UnknownAtomError(
                f"block {bi} layer {li}: atom {layer.kind.atom_id} not in space"
            )
    return net_feature_counts(net, channel_bands)


def space_buckets(space: SpaceSpec, channel_bands: bool = False) -> tuple[str, ...]:
    """Every bucket any decodable architecture of the space can touch, sorted.

    Derived structurally: per layer position, the atoms cross the reachable
    (c_in, c_out) pairs implied by the multiplier menus of this block and the
    previous one. Fitting over this full index keeps prediction total on the
    space even for buckets missing from the training sample.
    """
    layout = space.layout
    atoms = space.kind_atoms()
    buckets = {bucket_id(STEM_BUCKET, IMAGE_CHANNELS, layout.stem_channels, channel_bands)}
    prev_outs = (layout.stem_channels,)
    for block in layout.blocks:
        outs = tuple(sorted({round8(m * block.base_channels) for m in space.multiplier_menu}))
        for li in range(block.num_layers):
            c_ins = prev_outs if li == 0 else outs
            for atom in atoms:
                for c_in in c_ins:
                    if li == 0:
                        for c_out in outs:
                            buckets.add(bucket_id(atom.atom_id, c_in, c_out, channel_bands))
                    else:
                        # later layers keep the block width: c_in == c_out
                        buckets.add(bucket_id(atom.atom_id, c_in, c_in, channel_bands))
        prev_outs = outs
    return tuple(sorted(buckets))
