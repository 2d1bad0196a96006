"""Training objectives: CE+Dice segmentation loss, utilization balancing,
and the warm-up schedule.

The total loss sums, over a batch, a segmentation term on the decoder
logits and one on the (label-downsampled) shape map, plus one regularizer
chosen by the iteration count: an L1 penalty on the gating field while
iteration <= t_warmup, and afterwards a coefficient-of-variation penalty
on per-expert utilization. Exactly one regularizer is active at any step.

Per-expert utilization is the sum of absolute coding values over all
pixels of a sample; magnitudes rather than raw values, since signs may
cancel while the expert is very much in use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError
from .model import ModelOutput
from .tensor import Tensor, accumulate_grad, add, make_node, scale, sigmoid, sigmoid_array


@dataclass
class LossConfig:
    dice_weight: float = 0.8    # Dice share of the CE/Dice blend
    beta: float = 1e-2          # regularizer weight
    t_warmup: int = 500         # last iteration of the dense warm-up
    dice_smooth: float = 1e-5

    def __post_init__(self) -> None:
        if not 0.0 <= self.dice_weight <= 1.0:
            raise ConfigError(f"dice_weight must lie in [0, 1], got {self.dice_weight}")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.t_warmup < 0:
            raise ConfigError(f"t_warmup must be >= 0, got {self.t_warmup}")


@dataclass
class UtilizationAccumulator:
    """Running per-expert usage over a batch: sums of |coding| plus a count."""

    sums: np.ndarray  # [n]
    count: int = 0

    @classmethod
    def empty(cls, n: int) -> "UtilizationAccumulator":
        return cls(sums=np.zeros(n), count=0)

    def add(self, coding_values: np.ndarray) -> None:
        flat = np.abs(coding_values).reshape(-1, coding_values.shape[-1])
        self.sums += flat.sum(axis=0)
        self.count += 1


def one_hot(mask: np.ndarray, classes: int) -> np.ndarray:
    """Int class mask [..., H, W] -> one-hot [..., C, H, W] floats."""
    if mask.min() < 0 or mask.max() >= classes:
        raise ValidationError(f"mask values must lie in [0, {classes}), got "
                              f"[{mask.min()}, {mask.max()}]")
    eye = np.eye(classes)
    return np.ascontiguousarray(np.moveaxis(eye[mask.astype(np.int64)], -1, -3))


def _check_one_hot(y: np.ndarray) -> None:
    if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=-3) == 1.0):
        raise ValidationError("labels must be one-hot per pixel")


def ce_loss(logits: Tensor, y: np.ndarray) -> Tensor:
    """Mean pixel cross-entropy from logits ([C,H,W] or [B,C,H,W]), summed
    over the batch. Labels must be one-hot."""
    z = logits.data
    if y.shape != z.shape:
        raise ValidationError(f"labels shape {y.shape} != logits shape {z.shape}")
    _check_one_hot(y)
    zmax = z.max(axis=-3, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=-3, keepdims=True)
    lse = np.log(denom) + zmax
    per_pixel = lse[..., 0, :, :] - (y * z).sum(axis=-3)
    n_pix = per_pixel.shape[-1] * per_pixel.shape[-2]
    out = np.asarray(per_pixel.sum() / n_pix)
    softmax = ez / denom

    def backward(gout: np.ndarray) -> None:
        accumulate_grad(logits, float(gout) * (softmax - y) / n_pix)

    return make_node(out, "ce", (logits,), backward)


def softmax(logits: Tensor) -> Tensor:
    """Channel-axis softmax for [C,H,W] or [B,C,H,W]."""
    z = logits.data
    ez = np.exp(z - z.max(axis=-3, keepdims=True))
    p = ez / ez.sum(axis=-3, keepdims=True)

    def backward(gout: np.ndarray) -> None:
        inner = (p * gout).sum(axis=-3, keepdims=True)
        accumulate_grad(logits, p * (gout - inner))

    return make_node(p, "softmax", (logits,), backward)


def _check_probs(p: np.ndarray) -> None:
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValidationError(f"probabilities must lie in [0, 1], got "
                              f"[{p.min()}, {p.max()}]")


def dice_loss(probs: Tensor, y: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Soft Dice loss.

    [C,H,W] (or batched) inputs average 1 - dice over the foreground
    channels (all but channel 0); a plain [h,w] map is treated as a single
    foreground probability map. Batched inputs sum per-sample losses.
    """
    if probs.data.ndim == 2:
        return dice_loss_binary(probs, y, smooth)
    p = probs.data
    if y.shape != p.shape:
        raise ValidationError(f"labels shape {y.shape} != probs shape {p.shape}")
    _check_probs(p)
    n_fg = p.shape[-3] - 1
    if n_fg < 1:
        raise ValidationError("dice needs at least one foreground channel")
    fg = slice(1, None)
    axes = (-2, -1)
    num = 2.0 * (p[..., fg, :, :] * y[..., fg, :, :]).sum(axis=axes) + smooth
    den = p[..., fg, :, :].sum(axis=axes) + y[..., fg, :, :].sum(axis=axes) + smooth
    out = np.asarray((1.0 - num / den).sum() / n_fg)

    def backward(gout: np.ndarray) -> None:
        gp = np.zeros_like(p)
        gp[..., fg, :, :] = (num[..., None, None]
                             - 2.0 * y[..., fg, :, :] * den[..., None, None]) \
            / (den[..., None, None] ** 2) / n_fg
        accumulate_grad(probs, float(gout) * gp)

    return make_node(out, "dice", (probs,), backward)


def dice_loss_binary(probs: Tensor, target: np.ndarray, smooth: float = 1e-5) -> Tensor:
    """Dice loss of a single probability map [h,w] or batch [B,h,w];
    targets may be soft (pooled labels)."""
    p = probs.data
    if target.shape != p.shape:
        raise ValidationError(f"target shape {target.shape} != probs shape {p.shape}")
    _check_probs(p)
    axes = (-2, -1)
    num = 2.0 * (p * target).sum(axis=axes) + smooth
    den = p.sum(axis=axes) + target.sum(axis=axes) + smooth
    out = np.asarray((1.0 - num / den).sum())

    def backward(gout: np.ndarray) -> None:
        gp = (num[..., None, None] - 2.0 * target * den[..., None, None]) \
            / (den[..., None, None] ** 2)
        accumulate_grad(probs, float(gout) * gp)

    return make_node(out, "dice_binary", (probs,), backward)


def bce_with_logits(map_logits: Tensor, target: np.ndarray) -> Tensor:
    """Binary cross-entropy from logits, mean over pixels, summed over batch.

    Computed as softplus(m) - t*m for stability; targets may be soft."""
    m = map_logits.data
    if target.shape != m.shape:
        raise ValidationError(f"target shape {target.shape} != map shape {m.shape}")
    if target.min() < 0.0 or target.max() > 1.0:
        raise ValidationError("targets must lie in [0, 1]")
    softplus = np.maximum(m, 0.0) + np.log1p(np.exp(-np.abs(m)))
    per_pixel = softplus - target * m
    n_pix = m.shape[-1] * m.shape[-2]
    out = np.asarray(per_pixel.sum() / n_pix)
    sig = sigmoid_array(m)

    def backward(gout: np.ndarray) -> None:
        accumulate_grad(map_logits, float(gout) * (sig - target) / n_pix)

    return make_node(out, "bce", (map_logits,), backward)


def seg_loss(logits: Tensor, y: np.ndarray, dice_weight: float,
             smooth: float = 1e-5) -> Tensor:
    """(1 - w) * CE + w * Dice on multi-class logits with one-hot labels."""
    if not 0.0 <= dice_weight <= 1.0:
        raise ConfigError(f"dice_weight must lie in [0, 1], got {dice_weight}")
    ce = ce_loss(logits, y)
    dc = dice_loss(softmax(logits), y, smooth)
    return add(scale(ce, 1.0 - dice_weight), scale(dc, dice_weight))


def seg_loss_binary(map_logits: Tensor, target: np.ndarray, dice_weight: float,
                    smooth: float = 1e-5) -> Tensor:
    """(1 - w) * BCE + w * Dice on a single logit map with a (soft) target."""
    if not 0.0 <= dice_weight <= 1.0:
        raise ConfigError(f"dice_weight must lie in [0, 1], got {dice_weight}")
    bce = bce_with_logits(map_logits, target)
    dc = dice_loss_binary(sigmoid(map_logits), target, smooth)
    return add(scale(bce, 1.0 - dice_weight), scale(dc, dice_weight))


# ---------------------------------------------------------------------------
# regularizers


def l1_penalty(fields) -> Tensor:
    """Sum of |entries| over one gating field or a list of them.

    Subgradient: sign(x), defined as 0 at exactly 0."""
    if isinstance(fields, Tensor):
        fields = [fields]
    total: Tensor | None = None
    for field in fields:
        x = field.data
        out = np.asarray(np.abs(x).sum())

        def backward(gout: np.ndarray, field=field, x=x) -> None:
            accumulate_grad(field, float(gout) * np.sign(x))

        term = make_node(out, "l1", (field,), backward)
        total = term if total is None else add(total, term)
    if total is None:
        raise ConfigError("l1_penalty: empty field list")
    return total


def usage_sums(dense: Tensor) -> Tensor:
    """Per-expert utilization: sum of |coding| over all pixels (and batch).

    Input is channels-last [..., h, w, n]; output is [n]."""
    x = dense.data
    flat_abs = np.abs(x).reshape(-1, x.shape[-1])
    out = flat_abs.sum(axis=0)

    def backward(gout: np.ndarray) -> None:
        accumulate_grad(dense, np.sign(x) * gout)

    return make_node(out, "usage", (dense,), backward)


def cv_ratio(sums: np.ndarray) -> float:
    """Population variance over squared mean of a utilization vector.

    Defined as 0 when everything is zero (nothing routed yet)."""
    sums = np.asarray(sums, dtype=np.float64)
    mean = sums.mean()
    if mean == 0.0:
        return 0.0
    var = ((sums - mean) ** 2).mean()
    return float(var / mean ** 2)


def cv_penalty(acc) -> float:
    """Utilization-balance penalty of an accumulator (or raw sums vector)."""
    sums = acc.sums if isinstance(acc, UtilizationAccumulator) else np.asarray(acc)
    if np.any(sums < 0.0):
        raise ValidationError("utilization sums must be non-negative")
    return cv_ratio(sums)


def cv_penalty_op(alpha: Tensor) -> Tensor:
    """Graph version of the CV penalty on a per-expert utilization vector."""
    a = alpha.data
    n = a.size
    mean = a.mean()
    if mean == 0.0:
        def backward_zero(gout: np.ndarray) -> None:
            accumulate_grad(alpha, np.zeros_like(a))
        return make_node(np.asarray(0.0), "cv", (alpha,), backward_zero)
    var = ((a - mean) ** 2).mean()
    out = np.asarray(var / mean ** 2)

    def backward(gout: np.ndarray) -> None:
        # d/da_j [var/mean^2] = 2(a_j - mean)/(n mean^2) - 2 var/(n mean^3)
        g = 2.0 * (a - mean) / (n * mean ** 2) - 2.0 * var / (n * mean ** 3)
        accumulate_grad(alpha, float(gout) * g)

    return make_node(out, "cv", (alpha,), backward)


# ---------------------------------------------------------------------------
# total training loss


@dataclass
class LossParts:
    """Scalar breakdown of one batch loss, for logging."""

    total: float
    seg_sam: float
    seg_shape: float
    penalty: float
    usage_cv: float
    phase: str


def pooled_target(mask: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a binary mask [..., H, W] down to shape-map resolution."""
    h, w = mask.shape[-2:]
    lead = mask.shape[:-2]
    blocks = mask.astype(np.float64).reshape(lead + (h // factor, factor, w // factor, factor))
    return blocks.mean(axis=(-3, -1))


def total_loss(output: ModelOutput, mask: np.ndarray, cfg: LossConfig,
               iteration: int, classes: int = 2, downsample: int = 4) -> tuple[Tensor, LossParts]:
    """Batch training loss per the warm-up/CV schedule.

    ``mask`` holds int class ids, [H,W] or [B,H,W] matching the output.
    Returns the scalar graph node plus a float breakdown for the log.
    """
    y = one_hot(mask, classes)
    seg_sam = seg_loss(output.logits, y, cfg.dice_weight, cfg.dice_smooth)
    total = seg_sam
    seg_shape_val = 0.0
    penalty_val = 0.0
    usage_cv_val = 0.0
    warm = iteration <= cfg.t_warmup
    phase = "warmup" if warm else "sparse"

    if output.shape_map is not None and output.coding is not None:
        target = pooled_target((mask == 1).astype(np.float64), downsample)
        shp = seg_loss_binary(output.shape_map.map, target, cfg.dice_weight, cfg.dice_smooth)
        seg_shape_val = shp.item()
        total = add(total, shp)
        usage_cv_val = cv_ratio(
            np.abs(output.coding.dense.data).reshape(-1, output.coding.dense.data.shape[-1]).sum(axis=0))
        if cfg.beta > 0.0:
            pen = l1_penalty(output.coding.dense) if warm \
                else cv_penalty_op(usage_sums(output.coding.dense))
            penalty_val = pen.item()
            total = add(total, scale(pen, cfg.beta))

    parts = LossParts(total=total.item(), seg_sam=seg_sam.item(),
                      seg_shape=seg_shape_val, penalty=penalty_val,
                      usage_cv=usage_cv_val, phase=phase)
    return total, parts
