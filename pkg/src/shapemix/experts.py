"""Learnable shape-expert bank with pixel-wise sparse gating.

A bank holds n trainable h-by-w maps ("shape experts"). A small two-layer
conv net turns an image embedding into a dense field of per-pixel expert
weights; keeping only the k entries with the largest absolute value at
each pixel gives a sparse coding, and the weighted sum of the selected
experts gives a signed shape map. Its sigmoid is the prompt handed to the
decoder. Negative weights are deliberate: selection is by magnitude, so a
sign carries information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import Rng
from .tensor import Tensor, accumulate_grad, conv2d, make_node, parameter, permute, sigmoid, tanh

GATE_HIDDEN = 64
EXPERT_INIT_STD = 0.1


@dataclass
class ShapeExpertBank:
    """Dictionary of n learnable h×w expert maps."""

    n: int
    h: int
    w: int
    experts: Tensor  # [n, h, w]


@dataclass
class GatingNet:
    """Two 3x3 conv layers (embedding -> hidden -> n) with tanh between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class SparseCoding:
    """Per-pixel expert weights after selection.

    ``dense`` is the full [..., h, w, n] field with discarded entries
    zeroed; ``retained`` marks which entries survived. Retained values are
    copies of the pre-selection values, never rescaled.
    """

    dense: Tensor
    retained: np.ndarray  # bool, same shape as dense
    k: int


@dataclass
class ShapeMap:
    """Signed pre-activation map plus its sigmoid-normalized prompt."""

    map: Tensor      # [..., h, w]
    prompt: Tensor   # [..., h, w], values in (0, 1)


def init_bank(rng: Rng, n: int, h: int, w: int) -> ShapeExpertBank:
    if n < 1:
        raise ConfigError(f"expert count must be >= 1, got {n}")
    experts = parameter(rng.normal((n, h, w), std=EXPERT_INIT_STD), name="bank.experts")
    return ShapeExpertBank(n=n, h=h, w=w, experts=experts)


def init_gating(rng: Rng, in_channels: int, n: int, hidden: int = GATE_HIDDEN) -> GatingNet:
    def conv_init(stream: Rng, cout: int, cin: int, k: int, name: str) -> Tensor:
        std = 1.0 / np.sqrt(cin * k * k)
        return parameter(stream.normal((cout, cin, k, k), std=std), name=name)

    return GatingNet(
        w1=conv_init(rng.substream("w1"), hidden, in_channels, 3, "gate.w1"),
        b1=parameter(np.zeros(hidden), name="gate.b1"),
        w2=conv_init(rng.substream("w2"), n, hidden, 3, "gate.w2"),
        b2=parameter(np.zeros(n), name="gate.b2"),
    )


def gate(embedding: Tensor, net: GatingNet) -> Tensor:
    """Dense per-pixel weights over all experts, channels-last [..., h, w, n]."""
    hidden = tanh(conv2d(embedding, net.w1, net.b1, stride=1, pad=1))
    field = conv2d(hidden, net.w2, net.b2, stride=1, pad=1)
    axes = (1, 2, 0) if field.data.ndim == 3 else (0, 2, 3, 1)
    return permute(field, axes)


def topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest-|value| entries along the last axis.

    Ties break toward the lowest index (stable sort), so selection is
    reproducible bit-for-bit.
    """
    n = values.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k: k must lie in [1, {n}], got {k}")
    order = np.argsort(-np.abs(values), axis=-1, kind="stable")
    mask = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def topk_sparsify(field: Tensor, k: int) -> SparseCoding:
    """Keep the k largest-magnitude entries per pixel, zero the rest.

    Backward treats the selection mask as constant: retained entries pass
    their gradient through unchanged, discarded entries get zero.
    """
    mask = topk_mask(field.data, k)
    out_data = np.where(mask, field.data, 0.0)

    def backward(gout: np.ndarray) -> None:
        accumulate_grad(field, np.where(mask, gout, 0.0))

    dense = make_node(out_data, "topk", (field,), backward)
    return SparseCoding(dense=dense, retained=mask, k=k)


def dense_coding(field: Tensor) -> SparseCoding:
    """Warm-up coding: every expert retained at every pixel."""
    n = field.data.shape[-1]
    return SparseCoding(dense=field, retained=np.ones(field.data.shape, dtype=bool), k=n)


def topk_margins(values: np.ndarray, k: int) -> tuple[float, float]:
    """(smallest selection gap, smallest retained magnitude) over all pixels.

    Used by the gradient checker to reject evaluation points where the
    selection or the |.| penalties sit on a non-differentiable boundary.
    """
    mags = np.sort(np.abs(values), axis=-1)[..., ::-1]
    n = values.shape[-1]
    min_retained = float(mags[..., k - 1].min())
    if k == n:
        return np.inf, min_retained
    gap = float((mags[..., k - 1] - mags[..., k]).min())
    return gap, min_retained


def compose_shape_map(coding: SparseCoding, bank: ShapeExpertBank) -> Tensor:
    """Pixel-wise weighted sum of experts: out[p] = sum_j coding[p, j] * expert_j[p].

    Accumulates experts in index order so the result is bit-identical to
    the dense combination whenever every entry is retained.
    """
    dense = coding.dense
    shape = dense.data.shape
    if shape[-3:] != (bank.h, bank.w, bank.n):
        raise DimensionError(
            f"compose: coding trailing dims {shape[-3:]} do not match bank (h,w,n)="
            f"{(bank.h, bank.w, bank.n)}")
    ex = bank.experts.data
    out = np.zeros(shape[:-1])
    for j in range(bank.n):
        out += dense.data[..., j] * ex[j]

    def backward(gout: np.ndarray) -> None:
        if dense.requires_grad:
            gd = np.empty_like(dense.data)
            for j in range(bank.n):
                gd[..., j] = gout * ex[j]
            accumulate_grad(dense, gd)
        if bank.experts.requires_grad:
            ge = np.empty_like(ex)
            batched = gout.ndim == 3
            for j in range(bank.n):
                contrib = gout * dense.data[..., j]
                ge[j] = contrib.sum(axis=0) if batched else contrib
            accumulate_grad(bank.experts, ge)

    return make_node(out, "compose", (dense, bank.experts), backward)


def shape_prompt(shape_map: Tensor) -> Tensor:
    """Sigmoid normalization of the signed shape map into (0, 1)."""
    return sigmoid(shape_map)
