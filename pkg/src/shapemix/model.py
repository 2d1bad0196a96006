"""Segmentation pipeline: image encoder, shape-expert gating, prompted decoder.

The encoder downsamples a grayscale image 4x into an embedding that feeds
both the gating network and the decoder (computed once, shared). The
decoder projects the prompt map, adds it to the embedding, and upsamples
back to full resolution to produce per-class logits. Fusion is a plain
addition — enough to make the prompt path live while keeping the model
desk-sized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .experts import (
    GatingNet,
    ShapeExpertBank,
    ShapeMap,
    SparseCoding,
    compose_shape_map,
    dense_coding,
    gate,
    init_bank,
    init_gating,
    shape_prompt,
    topk_sparsify,
)
from .rng import Rng
from .tensor import Tensor, add, constant, conv2d, parameter, reshape, tanh, upsample_nn

EMBED_CHANNELS = 32
ENC_MID_CHANNELS = 16
DEC_MID_CHANNELS = (16, 8)
DOWNSAMPLE = 4

PHASES = ("warmup", "sparse")


@dataclass
class Encoder:
    """Two stride-2 4x4 convs (1 -> 16 -> 32) with tanh, spatial /4."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class Decoder:
    """Prompt projection, additive fusion, then conv + 2x nearest-neighbour
    upsampling twice, ending in a conv that emits class logits."""

    prompt_w: Tensor
    prompt_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor


@dataclass
class ModelParams:
    """All learnable tensors of the pipeline."""

    bank: ShapeExpertBank
    gating: GatingNet
    encoder: Encoder
    decoder: Decoder
    classes: int = 2

    def named(self) -> dict[str, Tensor]:
        """Stable name -> tensor mapping (checkpoint and optimizer order)."""
        enc, dec, g = self.encoder, self.decoder, self.gating
        return {
            "bank.experts": self.bank.experts,
            "gate.w1": g.w1, "gate.b1": g.b1, "gate.w2": g.w2, "gate.b2": g.b2,
            "enc.w1": enc.w1, "enc.b1": enc.b1, "enc.w2": enc.w2, "enc.b2": enc.b2,
            "dec.prompt_w": dec.prompt_w, "dec.prompt_b": dec.prompt_b,
            "dec.w1": dec.w1, "dec.b1": dec.b1,
            "dec.w2": dec.w2, "dec.b2": dec.b2,
            "dec.w3": dec.w3, "dec.b3": dec.b3,
        }


@dataclass
class ModelOutput:
    """Everything one forward pass produces (single shared embedding)."""

    logits: Tensor                      # [..., C, H, W]
    embedding: Tensor                   # [..., Ce, h, w]
    shape_map: ShapeMap | None = None   # None when the prompt path is disabled
    coding: SparseCoding | None = None


def _conv_param(rng: Rng, cout: int, cin: int, k: int, name: str) -> Tensor:
    std = 1.0 / np.sqrt(cin * k * k)
    return parameter(rng.normal((cout, cin, k, k), std=std), name=name)


def init_params(rng: Rng, image_size: int, n_experts: int, classes: int = 2) -> ModelParams:
    if image_size % DOWNSAMPLE != 0:
        raise ConfigError(f"image size {image_size} must be divisible by {DOWNSAMPLE}")
    h = w = image_size // DOWNSAMPLE
    enc_rng = rng.substream("encoder")
    dec_rng = rng.substream("decoder")
    d1, d2 = DEC_MID_CHANNELS
    encoder = Encoder(
        w1=_conv_param(enc_rng.substream("w1"), ENC_MID_CHANNELS, 1, 4, "enc.w1"),
        b1=parameter(np.zeros(ENC_MID_CHANNELS), name="enc.b1"),
        w2=_conv_param(enc_rng.substream("w2"), EMBED_CHANNELS, ENC_MID_CHANNELS, 4, "enc.w2"),
        b2=parameter(np.zeros(EMBED_CHANNELS), name="enc.b2"),
    )
    decoder = Decoder(
        prompt_w=_conv_param(dec_rng.substream("wp"), EMBED_CHANNELS, 1, 1, "dec.prompt_w"),
        prompt_b=parameter(np.zeros(EMBED_CHANNELS), name="dec.prompt_b"),
        w1=_conv_param(dec_rng.substream("w1"), d1, EMBED_CHANNELS, 3, "dec.w1"),
        b1=parameter(np.zeros(d1), name="dec.b1"),
        w2=_conv_param(dec_rng.substream("w2"), d2, d1, 3, "dec.w2"),
        b2=parameter(np.zeros(d2), name="dec.b2"),
        w3=_conv_param(dec_rng.substream("w3"), classes, d2, 3, "dec.w3"),
        b3=parameter(np.zeros(classes), name="dec.b3"),
    )
    bank = init_bank(rng.substream("bank"), n_experts, h, w)
    gating = init_gating(rng.substream("gating"), EMBED_CHANNELS, n_experts)
    return ModelParams(bank=bank, gating=gating, encoder=encoder, decoder=decoder,
                       classes=classes)


def encode(x: Tensor, enc: Encoder) -> Tensor:
    """Image [., 1, H, W] -> embedding [., Ce, H/4, W/4]; H, W must divide by 4."""
    spatial = x.data.shape[-2:]
    if spatial[0] % DOWNSAMPLE != 0 or spatial[1] % DOWNSAMPLE != 0:
        raise ConfigError(f"encode: spatial dims {spatial} must be divisible by {DOWNSAMPLE}")
    hidden = tanh(conv2d(x, enc.w1, enc.b1, stride=2, pad=1))
    return tanh(conv2d(hidden, enc.w2, enc.b2, stride=2, pad=1))


def decode(embedding: Tensor, prompt: Tensor, dec: Decoder) -> Tensor:
    """Fuse embedding with the projected prompt and upsample to logits."""
    batched = embedding.data.ndim == 4
    target = ((embedding.data.shape[0], 1) if batched else (1,)) + prompt.data.shape[-2:]
    prompt_img = reshape(prompt, target)
    prompt_emb = conv2d(prompt_img, dec.prompt_w, dec.prompt_b, stride=1, pad=0)
    fused = add(embedding, prompt_emb)
    t = tanh(conv2d(fused, dec.w1, dec.b1, stride=1, pad=1))
    t = tanh(conv2d(upsample_nn(t, 2), dec.w2, dec.b2, stride=1, pad=1))
    return conv2d(upsample_nn(t, 2), dec.w3, dec.b3, stride=1, pad=1)


def forward(x, params: ModelParams, phase: str = "sparse", k: int | None = None,
            use_prompt: bool = True) -> ModelOutput:
    """Full pass for one sample [1, H, W] or a batch [B, 1, H, W].

    ``phase`` selects the coding: "warmup" keeps the dense gating field,
    "sparse" applies top-k selection (k required). With ``use_prompt``
    False the shape branch is skipped entirely and the decoder sees an
    all-zero prompt (the ablation baseline).
    """
    if phase not in PHASES:
        raise ConfigError(f"phase must be one of {PHASES}, got {phase!r}")
    x = x if isinstance(x, Tensor) else constant(x, name="input")
    embedding = encode(x, params.encoder)

    if not use_prompt:
        zeros = np.zeros(embedding.data.shape[:-3] + embedding.data.shape[-2:])
        logits = decode(embedding, constant(zeros, name="zero_prompt"), params.decoder)
        return ModelOutput(logits=logits, embedding=embedding)

    field = gate(embedding, params.gating)
    if phase == "sparse":
        if k is None:
            raise ConfigError("sparse phase requires k")
        coding = topk_sparsify(field, k)
    else:
        coding = dense_coding(field)
    smap = compose_shape_map(coding, params.bank)
    prompt = shape_prompt(smap)
    logits = decode(embedding, prompt, params.decoder)
    return ModelOutput(logits=logits, embedding=embedding,
                       shape_map=ShapeMap(map=smap, prompt=prompt), coding=coding)


def infer(x, params: ModelParams, k: int, use_prompt: bool = True) -> tuple[np.ndarray, ModelOutput]:
    """Inference on one image: per-pixel argmax class ids plus the raw output.

    Pure: no parameter is touched, repeated calls are bit-identical.
    """
    out = forward(x, params, phase="sparse", k=k, use_prompt=use_prompt)
    mask = np.argmax(out.logits.data, axis=-3).astype(np.int64)
    return mask, out
