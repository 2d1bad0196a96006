"""Optimization loop: AdamW updates, the dense-warm-up -> top-k phase
switch, deterministic batching, CSV logging, and binary checkpoints.

The batch schedule is a pure function of (seed, epoch), so resuming from a
checkpoint replays the exact remaining schedule and training N iterations
straight is bit-identical to training N/2, saving, loading, and training
the rest. Checkpoints are little-endian binary with magic "MOSE" and are
written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericError
from .experts import GatingNet, ShapeExpertBank
from .losses import LossConfig, LossParts, total_loss
from .model import Decoder, Encoder, ModelParams, forward, init_params
from .rng import Rng
from .synthdata import Benchmark
from .tensor import Tensor, parameter

CHECKPOINT_MAGIC = b"MOSE"
CHECKPOINT_VERSION = 1

LOG_COLUMNS = ("iteration", "phase", "loss_total", "loss_seg_sam", "loss_seg_shape",
               "penalty", "usage_cv", "wall_ms")


@dataclass
class TrainConfig:
    seed: int = 0
    image_size: int = 64
    n_experts: int = 16
    top_k: int = 4
    classes: int = 2
    lr: float = 3e-3
    weight_decay: float = 0.1
    batch_size: int = 8
    max_epochs: int = 12
    max_iterations: int | None = 300   # overrides max_epochs when set
    checkpoint_every: int = 0          # 0 = final checkpoint only
    grad_clip: float | None = None     # optional global-norm clip, off by default
    use_prompt: bool = True            # False = ablation baseline without the shape branch

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must lie in [1, n_experts={self.n_experts}], "
                              f"got {self.top_k}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    iteration: int
    seed: int
    t_warmup: int
    config: dict = field(default_factory=dict)

    @property
    def phase(self) -> str:
        return "warmup" if self.iteration <= self.t_warmup else "sparse"


def init_state(cfg: TrainConfig, loss_cfg: LossConfig) -> TrainState:
    params = init_params(Rng(cfg.seed).substream("init"), cfg.image_size,
                         cfg.n_experts, cfg.classes)
    zeros = {name: np.zeros_like(t.data) for name, t in params.named().items()}
    config = {**asdict(cfg), **asdict(loss_cfg)}
    return TrainState(params=params, m=zeros,
                      v={k: z.copy() for k, z in zeros.items()},
                      iteration=0, seed=cfg.seed, t_warmup=loss_cfg.t_warmup,
                      config=config)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               m: dict[str, np.ndarray], v: dict[str, np.ndarray],
               lr: float, weight_decay: float, t: int,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place decoupled-weight-decay Adam update at step t (1-based)."""
    if t < 1:
        raise ConfigError(f"adamw_step: t must be >= 1, got {t}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ConfigError(f"adamw_step: grad shape {g.shape} != param shape "
                              f"{p.data.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", param=name)
        p.data *= 1.0 - lr * weight_decay
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / bc1
        v_hat = v[name] / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _format_row(iteration: int, phase: str, parts: LossParts, wall_ms: float) -> str:
    return (f"{iteration},{phase},{parts.total!r},{parts.seg_sam!r},"
            f"{parts.seg_shape!r},{parts.penalty!r},{parts.usage_cv!r},{wall_ms:.3f}")


def train(cfg: TrainConfig, loss_cfg: LossConfig, bench: Benchmark, out_dir,
          resume: TrainState | None = None) -> tuple[TrainState, list[str]]:
    """Run (or continue) training; returns the final state and the log rows.

    Writes train_log.csv incrementally plus checkpoints at the configured
    cadence and at the end. A non-finite loss aborts with NumericError; the
    last cadence checkpoint stays on disk.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = bench.source_train
    if len(samples) < cfg.batch_size:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds training set "
                          f"size {len(samples)}")
    steps_per_epoch = len(samples) // cfg.batch_size
    max_iters = cfg.max_iterations if cfg.max_iterations is not None \
        else cfg.max_epochs * steps_per_epoch

    state = resume if resume is not None else init_state(cfg, loss_cfg)
    # the echo documents the config driving this run, also after a resume
    state.config = {**asdict(cfg), **asdict(loss_cfg)}
    state.t_warmup = loss_cfg.t_warmup
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    named = state.params.named()

    rows: list[str] = []
    log_path = out / "train_log.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    with open(log_path, mode) as log:
        if mode == "w":
            log.write(",".join(LOG_COLUMNS) + "\n")
        t = state.iteration
        while t < max_iters:
            epoch = t // steps_per_epoch
            perm = Rng(cfg.seed).substream("shuffle", epoch).permutation(len(samples))
            for bi in range(t % steps_per_epoch, steps_per_epoch):
                if t >= max_iters:
                    break
                t += 1
                started = time.perf_counter()
                phase = "warmup" if t <= loss_cfg.t_warmup else "sparse"
                idx = perm[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                out_t = forward(images[idx], state.params, phase=phase,
                                k=cfg.top_k, use_prompt=cfg.use_prompt)
                loss, parts = total_loss(out_t, masks[idx], loss_cfg, t,
                                         classes=cfg.classes)
                if not math.isfinite(parts.total):
                    state.iteration = t
                    raise NumericError(f"non-finite loss at iteration {t}")
                for p in named.values():
                    p.zero_grad()
                loss.backward()
                grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                         for name, p in named.items()}
                if cfg.grad_clip is not None:
                    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                    if norm > cfg.grad_clip:
                        factor = cfg.grad_clip / norm
                        grads = {name: g * factor for name, g in grads.items()}
                adamw_step(named, grads, state.m, state.v,
                           lr=cfg.lr, weight_decay=cfg.weight_decay, t=t)
                state.iteration = t
                wall_ms = (time.perf_counter() - started) * 1e3
                row = _format_row(t, phase, parts, wall_ms)
                rows.append(row)
                log.write(row + "\n")
                log.flush()
                if cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                    save_checkpoint(state, out / f"checkpoint_{t:06d}.bin")
    save_checkpoint(state, out / "checkpoint_final.bin")
    return state, rows


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_checkpoint(state: TrainState, path) -> None:
    """Binary dump of parameters, moments, iteration, and the config echo."""
    header = {
        "config": state.config,
        "iteration": state.iteration,
        "seed": state.seed,
        "t_warmup": state.t_warmup,
        "phase": state.phase,
        "classes": state.params.classes,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors: list[tuple[str, np.ndarray]] = []
    for name, p in state.params.named().items():
        tensors.append((name, p.data))
        tensors.append((name + ".m", state.m[name]))
        tensors.append((name + ".v", state.v[name]))

    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype("<f8", copy=False).tobytes()

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}",
                              offset=self.pos)
        chunk = self.raw[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _params_from_tensors(tensors: dict[str, np.ndarray], classes: int) -> ModelParams:
    def p(name: str) -> Tensor:
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name}")
        return parameter(tensors[name], name=name)

    experts = p("bank.experts")
    n, h, w = experts.data.shape
    bank = ShapeExpertBank(n=n, h=h, w=w, experts=experts)
    gating = GatingNet(w1=p("gate.w1"), b1=p("gate.b1"), w2=p("gate.w2"), b2=p("gate.b2"))
    encoder = Encoder(w1=p("enc.w1"), b1=p("enc.b1"), w2=p("enc.w2"), b2=p("enc.b2"))
    decoder = Decoder(prompt_w=p("dec.prompt_w"), prompt_b=p("dec.prompt_b"),
                      w1=p("dec.w1"), b1=p("dec.b1"), w2=p("dec.w2"), b2=p("dec.b2"),
                      w3=p("dec.w3"), b3=p("dec.b3"))
    return ModelParams(bank=bank, gating=gating, encoder=encoder, decoder=decoder,
                       classes=classes)


def load_checkpoint(path) -> TrainState:
    """Bit-exact inverse of save_checkpoint; rejects version mismatches."""
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    header_len = reader.u32("header length")
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", offset=12) from exc
    n_tensors = reader.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name_len = reader.u16("tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        ndim = reader.u8(f"{name} ndim")
        shape = tuple(reader.u32(f"{name} dim") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = reader.take(count * 8, f"{name} data")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()

    classes = int(header["classes"])
    param_tensors = {k: v for k, v in tensors.items()
                     if not (k.endswith(".m") or k.endswith(".v"))}
    params = _params_from_tensors(param_tensors, classes)
    m = {name: tensors[name + ".m"] for name in params.named()}
    v = {name: tensors[name + ".v"] for name in params.named()}
    return TrainState(params=params, m=m, v=v, iteration=int(header["iteration"]),
                      seed=int(header["seed"]), t_warmup=int(header["t_warmup"]),
                      config=header["config"])
