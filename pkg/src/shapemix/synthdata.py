"""Procedural single-source / multi-target segmentation benchmark.

Smooth organ-like binary shapes (random star-convex Fourier contours) are
rendered under one source appearance and several shifted target
appearances. The shift is appearance-only by default: for a given shape
seed every domain shares the identical mask while images differ in
contrast, gamma, noise, bias field, or polarity. That isolates what the
models are supposed to exploit — geometry that survives the domain shift.
An optional extra target mildly deforms the contours to probe robustness.

All generation is reproducible from (benchmark seed, sample identity);
images are quantized to the PGM 8-bit grid at creation so the on-disk
dataset round-trips losslessly.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError, ValidationError
from .pgm import read_pgm, write_pgm
from .rng import Rng

N_HARMONICS = 5
MAX_HARMONIC_SUM = 0.45
AREA_BOUNDS = (0.03, 0.40)
MASK_RETRIES = 20
TARGET_SEED_BASE = 1_000_000
VAL_FRACTION = 0.2
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    """Appearance parameters of one acquisition domain."""

    name: str
    gamma: float = 1.0          # intensity curve exponent
    noise_std: float = 0.0
    bias_amp: float = 0.0       # smooth multiplicative bias field amplitude
    contrast_fg: float = 0.65
    contrast_bg: float = 0.35
    invert: bool = False
    deform: float = 0.0         # contour perturbation (geometry no longer shared)

    def __post_init__(self) -> None:
        if self.gamma <= 0.0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.noise_std < 0.0 or self.bias_amp < 0.0 or self.deform < 0.0:
            raise ConfigError("noise_std, bias_amp and deform must be non-negative")


@dataclass
class Sample:
    image: np.ndarray   # [1, H, W] floats in [0, 1], quantized to the 8-bit grid
    mask: np.ndarray    # [H, W] uint8 in {0, 1}
    domain: str
    shape_seed: int
    split: str
    index: int


@dataclass
class Benchmark:
    seed: int
    image_size: int
    domains: dict[str, DomainSpec]
    source_name: str
    source_train: list[Sample]
    source_val: list[Sample]
    targets: dict[str, dict[str, list[Sample]]]  # name -> {"val": [...], "test": [...]}

    def all_samples(self) -> list[Sample]:
        out = list(self.source_train) + list(self.source_val)
        for splits in self.targets.values():
            out.extend(splits["val"])
            out.extend(splits["test"])
        return out


SOURCE_DOMAIN = DomainSpec(name="source", gamma=1.0, noise_std=0.03, bias_amp=0.05,
                           contrast_fg=0.65, contrast_bg=0.35)

TARGET_DOMAINS = (
    DomainSpec(name="shift_bias", gamma=1.0, noise_std=0.05, bias_amp=0.40,
               contrast_fg=0.62, contrast_bg=0.36),
    DomainSpec(name="shift_dim", gamma=0.9, noise_std=0.12, bias_amp=0.25,
               contrast_fg=0.55, contrast_bg=0.41),
    DomainSpec(name="shift_lowcon", gamma=1.1, noise_std=0.08, bias_amp=0.30,
               contrast_fg=0.55, contrast_bg=0.43),
)

DEFORMED_DOMAIN = DomainSpec(name="shift_warp", gamma=1.3, noise_std=0.05, bias_amp=0.10,
                             contrast_fg=0.60, contrast_bg=0.34, deform=0.08)


def rasterize_contour(height: int, width: int, cx: float, cy: float, r0: float,
                      coeffs: np.ndarray, phases: np.ndarray) -> np.ndarray:
    """Fill of r(theta) = r0 * (1 + sum_m coeffs[m] cos((m+1) theta + phases[m]))."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    theta = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(yy - cy, xx - cx)
    boundary = np.ones((height, width))
    for m in range(len(coeffs)):
        boundary += coeffs[m] * np.cos((m + 1) * theta + phases[m])
    return (rad <= r0 * boundary).astype(np.uint8)


def single_component(mask: np.ndarray) -> bool:
    """True iff the foreground is one 4-connected component."""
    total = int(mask.sum())
    if total == 0:
        return False
    start = tuple(np.argwhere(mask)[0])
    seen = np.zeros_like(mask, dtype=bool)
    seen[start] = True
    queue = deque([start])
    count = 0
    h, w = mask.shape
    while queue:
        y, x = queue.popleft()
        count += 1
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                queue.append((ny, nx))
    return count == total


def mask_is_valid(mask: np.ndarray) -> bool:
    frac = mask.sum() / mask.size
    return AREA_BOUNDS[0] <= frac <= AREA_BOUNDS[1] and single_component(mask)


def gen_mask(rng: Rng, height: int, width: int, deform: float = 0.0,
             deform_rng: Rng | None = None) -> np.ndarray:
    """Random organ-like binary mask; regenerates on invariant violation.

    ``deform`` adds a perturbation drawn from ``deform_rng`` on top of the
    base contour, so two calls sharing ``rng`` but with different deform
    streams produce related-but-not-identical shapes.
    """
    if height < 32 or width < 32:
        raise ConfigError(f"mask size must be at least 32x32, got {height}x{width}")
    for attempt in range(MASK_RETRIES):
        draw = rng.substream("try", attempt)
        r0 = float(draw.uniform(0.20, 0.28)) * min(height, width)
        cx = float(draw.uniform(0.38, 0.62)) * width
        cy = float(draw.uniform(0.38, 0.62)) * height
        coeffs = np.array([float(draw.uniform(-0.3 / (m + 1), 0.3 / (m + 1)))
                           for m in range(N_HARMONICS)])
        phases = draw.uniform(0.0, 2.0 * np.pi, N_HARMONICS)
        total = np.abs(coeffs).sum()
        if total > MAX_HARMONIC_SUM:
            coeffs *= MAX_HARMONIC_SUM / total
        if deform > 0.0:
            wobble = deform_rng.substream("deform", attempt) if deform_rng else draw
            coeffs = coeffs + wobble.normal(N_HARMONICS, std=deform)
            excess = np.abs(coeffs).sum()
            if excess > MAX_HARMONIC_SUM:
                coeffs *= MAX_HARMONIC_SUM / excess
        mask = rasterize_contour(height, width, cx, cy, r0, coeffs, phases)
        if mask_is_valid(mask):
            return mask
    raise GenerationError(f"no valid mask after {MASK_RETRIES} attempts")


def render(mask: np.ndarray, spec: DomainSpec, rng: Rng) -> np.ndarray:
    """Image = clamp(bias * (class mean + noise))^gamma, optionally inverted.

    Returns a [1, H, W] float image in [0, 1]. The draw order (noise, then
    bias frequencies and phases) is fixed so streams stay aligned across
    domain specs.
    """
    height, width = mask.shape
    mu = np.where(mask.astype(bool), spec.contrast_fg, spec.contrast_bg)
    noise = rng.normal((height, width), std=1.0) * spec.noise_std
    fx = int(rng.integers(1, 3))
    fy = int(rng.integers(1, 3))
    px, py = (float(v) for v in rng.uniform(0.0, 2.0 * np.pi, 2))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    bias = 1.0 + spec.bias_amp * np.sin(2.0 * np.pi * fx * xx / width + px) \
        * np.sin(2.0 * np.pi * fy * yy / height + py)
    img = np.clip(bias * (mu + noise), 0.0, 1.0) ** spec.gamma
    if spec.invert:
        img = 1.0 - img
    return img[None]


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap an image in [0, 1] to the 8-bit grid used on disk."""
    return np.round(image * 255.0) / 255.0


def make_benchmark(seed: int, image_size: int = 64, n_source_train: int = 200,
                   n_source_val: int = 50, n_target: int = 100,
                   include_deformed: bool = False) -> Benchmark:
    """One source domain (train/val) plus appearance-shifted target domains.

    Source samples use shape seeds 0..n_src-1; targets share a disjoint
    seed pool (offset by TARGET_SEED_BASE), so matched indices across
    target domains carry identical geometry. Targets get a 20/80 val/test
    split.
    """
    if min(n_source_train, n_source_val, n_target) < 1:
        raise ConfigError("benchmark sizes must be positive")
    root = Rng(seed)
    domains = {SOURCE_DOMAIN.name: SOURCE_DOMAIN}
    target_specs = list(TARGET_DOMAINS) + ([DEFORMED_DOMAIN] if include_deformed else [])
    for spec in target_specs:
        domains[spec.name] = spec

    def build(domain: DomainSpec, shape_seed: int, split: str, index: int) -> Sample:
        mask_rng = root.substream("mask", shape_seed)
        deform_rng = root.substream("deform", domain.name, shape_seed)
        mask = gen_mask(mask_rng, image_size, image_size,
                        deform=domain.deform, deform_rng=deform_rng)
        img = render(mask, domain, root.substream("render", domain.name, shape_seed))
        return Sample(image=quantize(img), mask=mask, domain=domain.name,
                      shape_seed=shape_seed, split=split, index=index)

    source_train = [build(SOURCE_DOMAIN, i, "train", i) for i in range(n_source_train)]
    source_val = [build(SOURCE_DOMAIN, n_source_train + i, "val", i)
                  for i in range(n_source_val)]
    n_val = max(1, int(round(VAL_FRACTION * n_target)))
    targets: dict[str, dict[str, list[Sample]]] = {}
    for spec in target_specs:
        val, test = [], []
        for i in range(n_target):
            split = "val" if i < n_val else "test"
            sample = build(spec, TARGET_SEED_BASE + i, split, i)
            (val if i < n_val else test).append(sample)
        targets[spec.name] = {"val": val, "test": test}
    return Benchmark(seed=seed, image_size=image_size, domains=domains,
                     source_name=SOURCE_DOMAIN.name, source_train=source_train,
                     source_val=source_val, targets=targets)


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<domain>/{img,msk}_<NNNN>_<split>.pgm + manifest.json


def _sample_paths(sample: Sample) -> tuple[str, str]:
    stem = f"{sample.index:04d}_{sample.split}"
    return (f"{sample.domain}/img_{stem}.pgm", f"{sample.domain}/msk_{stem}.pgm")


def save_dataset(bench: Benchmark, out_dir) -> Path:
    """Write every sample as PGM pairs plus a manifest; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format_version": MANIFEST_VERSION,
        "seed": bench.seed,
        "image_size": bench.image_size,
        "source": bench.source_name,
        "domains": {},
        "samples": [],
    }
    for name, spec in sorted(bench.domains.items()):
        entry = asdict(spec)
        entry["role"] = "source" if name == bench.source_name else "target"
        manifest["domains"][name] = entry
    for sample in bench.all_samples():
        img_rel, msk_rel = _sample_paths(sample)
        (out / sample.domain).mkdir(exist_ok=True)
        write_pgm(out / img_rel, np.round(sample.image[0] * 255.0).astype(np.uint8),
                  maxval=255)
        write_pgm(out / msk_rel, sample.mask, maxval=1)
        manifest["samples"].append({
            "domain": sample.domain, "index": sample.index,
            "shape_seed": sample.shape_seed, "split": sample.split,
            "image": img_rel, "mask": msk_rel,
        })
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(root_dir) -> Benchmark:
    """Rebuild a Benchmark from a dataset directory written by save_dataset."""
    root = Path(root_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValidationError(f"unsupported manifest version {manifest.get('format_version')}")
    domains: dict[str, DomainSpec] = {}
    roles: dict[str, str] = {}
    for name, entry in manifest["domains"].items():
        entry = dict(entry)
        roles[name] = entry.pop("role")
        domains[name] = DomainSpec(**entry)
    source_name = manifest["source"]
    source_train: list[Sample] = []
    source_val: list[Sample] = []
    targets: dict[str, dict[str, list[Sample]]] = {
        name: {"val": [], "test": []} for name, role in roles.items() if role == "target"}
    for rec in manifest["samples"]:
        img, maxval = read_pgm(root / rec["image"])
        if maxval != 255:
            raise ValidationError(f"image {rec['image']} has maxval {maxval}, expected 255")
        msk, _ = read_pgm(root / rec["mask"])
        sample = Sample(image=(img.astype(np.float64) / 255.0)[None],
                        mask=msk.astype(np.uint8), domain=rec["domain"],
                        shape_seed=rec["shape_seed"], split=rec["split"],
                        index=rec["index"])
        if rec["domain"] == source_name:
            (source_train if rec["split"] == "train" else source_val).append(sample)
        else:
            targets[rec["domain"]][rec["split"]].append(sample)
    return Benchmark(seed=manifest["seed"], image_size=manifest["image_size"],
                     domains=domains, source_name=source_name,
                     source_train=source_train, source_val=source_val, targets=targets)
