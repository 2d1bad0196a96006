"""Command-line front end: dataset generation, training, evaluation,
ablation sweeps, gradient checking, and expert visualization.

Every run is reproducible from its config alone: the resolved config is
echoed as config.json into each output directory. Config values come from
(in increasing precedence) built-in defaults, a JSON --config file, and
explicit command-line flags. Unknown config keys are rejected.

Exit codes: 0 success, 1 validation/config error, 2 numeric error,
3 inconclusive (e.g. the gradient check kept hitting selection ties).
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    InconclusiveError,
    NumericError,
    ShapemixError,
)
from .experts import topk_margins
from .gradcheck import grad_check_groups
from .losses import LossConfig, total_loss
from .metrics import evaluate, report_csv, utilization_csv
from .model import DOWNSAMPLE, ModelParams, forward, init_params
from .pgm import write_heatmap, write_pgm
from .rng import Rng
from .synthdata import load_dataset, make_benchmark, render, save_dataset
from .trainer import TrainConfig, load_checkpoint, train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_INCONCLUSIVE = 3

GRADCHECK_TOL = 1e-4


@dataclass
class RunConfig:
    """Union of every tunable; one JSON file drives any subcommand."""

    # reproducibility
    seed: int = 0
    # benchmark
    image_size: int = 64
    source_train: int = 200
    source_val: int = 50
    target_size: int = 100
    deformed_target: bool = False
    # model + optimizer
    n_experts: int = 16
    top_k: int = 4
    classes: int = 2
    lr: float = 3e-3
    weight_decay: float = 0.1
    batch_size: int = 8
    max_epochs: int = 12
    max_iterations: int | None = 300
    checkpoint_every: int = 0
    grad_clip: float | None = None
    use_prompt: bool = True
    # loss schedule
    dice_weight: float = 0.8
    beta: float = 1e-2
    t_warmup: int = 500
    dice_smooth: float = 1e-5
    # eval
    export_samples: int = 0
    # gradient check
    gc_samples_per_param: int = 30
    gc_eps: float = 1e-5
    gc_margin: float = 1e-3
    gc_resample_budget: int = 5
    # ablation grids
    sweep_n: list[int] = field(default_factory=lambda: [8, 16])
    sweep_k: list[int] = field(default_factory=lambda: [4, 8])
    sweep_beta: list[float] = field(default_factory=lambda: [1e-2])
    sweep_t_warmup: list[int] = field(default_factory=lambda: [100])

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, image_size=self.image_size,
                           n_experts=self.n_experts, top_k=self.top_k,
                           classes=self.classes, lr=self.lr,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, max_iterations=self.max_iterations,
                           checkpoint_every=self.checkpoint_every,
                           grad_clip=self.grad_clip, use_prompt=self.use_prompt)

    def loss_config(self) -> LossConfig:
        return LossConfig(dice_weight=self.dice_weight, beta=self.beta,
                          t_warmup=self.t_warmup, dice_smooth=self.dice_smooth)


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}
_LIST_FIELDS = {"sweep_n": int, "sweep_k": int, "sweep_beta": float, "sweep_t_warmup": int}
_OPTIONAL_FIELDS = {"max_iterations": int, "grad_clip": float}
_BOOL_FIELDS = ("deformed_target", "use_prompt")


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then the JSON file, then explicit flags. Unknown keys fail."""
    merged: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        unknown = sorted(set(data) - set(_FIELD_TYPES))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(data)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def write_config_echo(out_dir, cfg: RunConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(dataclasses.asdict(cfg), indent=1, sort_keys=True) + "\n")


def visualize_experts(params: ModelParams, out_dir) -> list[tuple[int, float, float]]:
    """One min-max-normalized PGM heatmap per expert plus a range sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ranges = []
    for j in range(params.bank.n):
        lo, hi = write_heatmap(out / f"expert_{j:03d}.pgm", params.bank.experts.data[j],
                               comment_prefix=f"shape expert {j}: ")
        ranges.append((j, lo, hi))
    lines = ["expert,min,max"] + [f"{j},{lo!r},{hi!r}" for j, lo, hi in ranges]
    (out / "ranges.txt").write_text("\n".join(lines) + "\n")
    return ranges


def _resolve_out(args) -> Path:
    if args.out is None:
        raise ConfigError("this command needs --out")
    return Path(args.out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _resolve_out(args)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    bench = make_benchmark(seed=cfg.seed, image_size=cfg.image_size,
                           n_source_train=cfg.source_train, n_source_val=cfg.source_val,
                           n_target=cfg.target_size,
                           include_deformed=cfg.deformed_target)
    save_dataset(bench, out)
    write_config_echo(out, cfg)
    n_targets = len(bench.targets)
    total = len(bench.all_samples())
    print(f"wrote {total} samples ({n_targets} target domains) to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    if args.data is None:
        raise ConfigError("train needs --data <dataset dir>")
    out = _resolve_out(args)
    bench = load_dataset(args.data)
    if bench.image_size != cfg.image_size:
        cfg = dataclasses.replace(cfg, image_size=bench.image_size)
    write_config_echo(out, cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    state, rows = train(cfg.train_config(), cfg.loss_config(), bench, out, resume=resume)
    visualize_experts(state.params, out / "experts")
    last = rows[-1] if rows else "(no iterations)"
    print(f"trained {state.iteration} iterations; final checkpoint at "
          f"{out / 'checkpoint_final.bin'}")
    print(f"last log row: {last}")
    return EXIT_OK


def _eval_settings(cfg: RunConfig, ckpt_config: dict, overrides: dict) -> tuple[int, bool]:
    """Evaluation uses the checkpoint's top_k/use_prompt unless overridden."""
    k = overrides.get("top_k")
    if k is None:
        k = int(ckpt_config.get("top_k", cfg.top_k))
    prompt = overrides.get("use_prompt")
    if prompt is None:
        prompt = bool(ckpt_config.get("use_prompt", cfg.use_prompt))
    return k, prompt


def cmd_eval(cfg: RunConfig, args, overrides: dict) -> int:
    if args.checkpoint is None or args.data is None:
        raise ConfigError("eval needs --checkpoint and --data")
    out = _resolve_out(args)
    state = load_checkpoint(args.checkpoint)
    bench = load_dataset(args.data)
    bank = state.params.bank
    if bank.h * DOWNSAMPLE != bench.image_size:
        raise ConfigError(f"checkpoint expects {bank.h * DOWNSAMPLE}px images, dataset "
                          f"has {bench.image_size}px")
    k, use_prompt = _eval_settings(cfg, state.config, overrides)
    report = evaluate(state.params, bench, k=k, use_prompt=use_prompt)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(report))
    (out / "utilization.csv").write_text(utilization_csv(report.utilization))
    write_config_echo(out, cfg)
    if cfg.export_samples > 0:
        _export_eval_samples(state.params, bench, k, use_prompt,
                             out / "samples", cfg.export_samples)
    for row in report.rows:
        print(f"{row.domain:20s} n={row.n_samples:4d} dice={row.dice_mean:.4f}"
              f"±{row.dice_std:.4f} hd={row.hd_mean:.2f}±{row.hd_std:.2f}")
    print(f"usage_cv={report.utilization.usage_cv:.4f} "
          f"dead_experts={report.utilization.dead_expert_count}")
    return EXIT_OK


def _export_eval_samples(params: ModelParams, bench, k: int, use_prompt: bool,
                         out_dir: Path, count: int) -> None:
    from .model import infer

    out_dir.mkdir(parents=True, exist_ok=True)
    pools = [("source_val", bench.source_val)]
    pools += [(name, bench.targets[name]["test"]) for name in sorted(bench.targets)]
    for domain, samples in pools:
        for sample in samples[:count]:
            stem = f"{domain}_{sample.index:04d}"
            mask, out = infer(sample.image, params, k=k, use_prompt=use_prompt)
            write_pgm(out_dir / f"{stem}_pred.pgm", (mask == 1).astype(np.uint8), maxval=1)
            if out.shape_map is not None:
                write_heatmap(out_dir / f"{stem}_shape_map.pgm", out.shape_map.map.data)
                write_pgm(out_dir / f"{stem}_prompt.pgm",
                          np.round(out.shape_map.prompt.data * 255.0).astype(np.uint8),
                          maxval=255)


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _resolve_out(args)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(out, cfg)
    if args.data is not None:
        bench = load_dataset(args.data)
        if bench.image_size != cfg.image_size:
            cfg = dataclasses.replace(cfg, image_size=bench.image_size)
    else:
        bench = make_benchmark(seed=cfg.seed, image_size=cfg.image_size,
                               n_source_train=cfg.source_train,
                               n_source_val=cfg.source_val, n_target=cfg.target_size,
                               include_deformed=cfg.deformed_target)
    sweep_path = out / "sweep.csv"
    header = ("n,k,beta,t_warmup,no_moe,source_val_dice,target_dice_avg,"
              "target_hd_avg\n")
    sweep_path.write_text(header)
    grid = [(n, k, b, tw)
            for n, k, b, tw in itertools.product(cfg.sweep_n, cfg.sweep_k,
                                                 cfg.sweep_beta, cfg.sweep_t_warmup)
            if k <= n]
    if not grid:
        raise ConfigError("ablation grid is empty (is every k > n?)")
    for n, k, beta, t_warmup in grid:
        point = dataclasses.replace(cfg, n_experts=n, top_k=k, beta=beta,
                                    t_warmup=t_warmup)
        point_dir = out / f"n{n}_k{k}_beta{beta}_tw{t_warmup}"
        state, _ = train(point.train_config(), point.loss_config(), bench, point_dir)
        report = evaluate(state.params, bench, k=k, use_prompt=point.use_prompt)
        src = report.rows[0]
        row = (f"{n},{k},{beta!r},{t_warmup},{int(n == k)},{src.dice_mean!r},"
               f"{report.avg_target_dice(bench.source_name)!r},"
               f"{report.avg_target_hd(bench.source_name)!r}\n")
        with open(sweep_path, "a") as fh:  # flush per point: partial sweeps survive
            fh.write(row)
        print(f"n={n} k={k} beta={beta} t_warmup={t_warmup}: "
              f"target dice {report.avg_target_dice(bench.source_name):.4f}")
    print(f"sweep written to {sweep_path}")
    return EXIT_OK


def _gradcheck_point(cfg: RunConfig, params: ModelParams, phase: str, attempt: int):
    """Synthetic input for one gradient check, plus its kink margins.

    Rasterizes a blob directly (gen_mask insists on >= 32px; gradcheck
    configs may be smaller) and reports how far the evaluation point sits
    from top-k ties and |.| kinks, so callers can resample near-boundary
    draws.
    """
    from .synthdata import SOURCE_DOMAIN, rasterize_contour

    size = cfg.image_size
    draw = Rng(cfg.seed).substream("gradcheck", phase, attempt)
    mask_rng = draw.substream("mask")
    r0 = float(mask_rng.uniform(0.22, 0.30)) * size
    cx = float(mask_rng.uniform(0.40, 0.60)) * size
    cy = float(mask_rng.uniform(0.40, 0.60)) * size
    coeffs = mask_rng.uniform(-0.15, 0.15, 5)
    phases_ = mask_rng.uniform(0.0, 2.0 * np.pi, 5)
    mask = rasterize_contour(size, size, cx, cy, r0, coeffs, phases_)
    image = render(mask, SOURCE_DOMAIN, draw.substream("render"))
    field = forward(image, params, phase="warmup").coding.dense.data
    if phase == "warmup":
        gap, smallest = math.inf, float(np.abs(field).min())
    else:
        gap, smallest = topk_margins(field, cfg.top_k)
    return image, mask.astype(np.int64), gap, smallest


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    if cfg.image_size > 32 or cfg.n_experts > 8:
        raise ConfigError("gradcheck needs a tiny config (image_size <= 32, "
                          f"n_experts <= 8); got {cfg.image_size}, {cfg.n_experts}")
    phases = ("warmup", "sparse") if args.phase == "both" else (args.phase,)
    params = init_params(Rng(cfg.seed).substream("init"), cfg.image_size,
                         cfg.n_experts, cfg.classes)
    tensors = list(params.named().values())
    loss_cfg = cfg.loss_config()
    worst_overall = 0.0
    failed = False
    lines = ["phase,group,checked,max_rel_error"]
    for phase in phases:
        iteration = loss_cfg.t_warmup if phase == "warmup" else loss_cfg.t_warmup + 1
        if phase == "warmup" and loss_cfg.t_warmup < 1:
            raise ConfigError("warmup phase check needs t_warmup >= 1")
        for attempt in range(cfg.gc_resample_budget):
            image, mask, gap, smallest = _gradcheck_point(cfg, params, phase, attempt)
            if gap > cfg.gc_margin and smallest > cfg.gc_margin:
                break
        else:
            raise InconclusiveError(
                f"{phase}: no tie-free evaluation point in "
                f"{cfg.gc_resample_budget} resamples")

        def loss_fn():
            out = forward(image, params, phase=phase, k=cfg.top_k)
            node = total_loss(out, mask, loss_cfg, iteration, classes=cfg.classes)[0]
            if args.corrupt_gradient:
                original = node._backward

                def doubled(gout):
                    original(gout)
                    original(gout)

                node._backward = doubled
            return node

        groups = grad_check_groups(loss_fn, tensors, eps=cfg.gc_eps,
                                   samples_per_param=cfg.gc_samples_per_param,
                                   rng=Rng(cfg.seed).substream("gc_idx", phase))
        for g in groups:
            lines.append(f"{phase},{g.name},{g.checked},{g.max_rel_error!r}")
            status = "ok" if g.max_rel_error < GRADCHECK_TOL else "FAIL"
            print(f"{phase:7s} {g.name:14s} checked={g.checked:4d} "
                  f"max_rel={g.max_rel_error:.3e} {status}")
            worst_overall = max(worst_overall, g.max_rel_error)
            failed = failed or g.max_rel_error >= GRADCHECK_TOL
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
        write_config_echo(out, cfg)
    print(f"worst max_rel_error: {worst_overall:.3e} "
          f"({'FAIL' if failed else 'pass'} at {GRADCHECK_TOL:g})")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_visualize(cfg: RunConfig, args) -> int:
    if args.checkpoint is None:
        raise ConfigError("visualize needs --checkpoint")
    out = _resolve_out(args)
    state = load_checkpoint(args.checkpoint)
    ranges = visualize_experts(state.params, out)
    write_config_echo(out, cfg)
    print(f"wrote {len(ranges)} expert heatmaps to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for f in fields(RunConfig):
        if f.name in _BOOL_FIELDS:
            parser.add_argument(_flag(f.name), dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction,
                                help=f"override config key {f.name}")
        elif f.name in _LIST_FIELDS:
            elem = _LIST_FIELDS[f.name]
            parser.add_argument(_flag(f.name), dest=f.name, default=None,
                                type=lambda s, e=elem: [e(v) for v in s.split(",")],
                                help=f"comma list for {f.name}")
        elif f.name in _OPTIONAL_FIELDS:
            elem = _OPTIONAL_FIELDS[f.name]
            parser.add_argument(_flag(f.name), dest=f.name, default=None,
                                type=lambda s, e=elem: None if s == "none" else e(s),
                                help=f"override config key {f.name} ('none' clears)")
        else:
            parser.add_argument(_flag(f.name), dest=f.name, default=None,
                                type=type(f.default),
                                help=f"override config key {f.name}")
    # short aliases used throughout the docs
    parser.add_argument("--n", dest="n_experts", default=None, type=int,
                        help=argparse.SUPPRESS)
    parser.add_argument("--k", dest="top_k", default=None, type=int,
                        help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapemix",
        description="Shape-prior dictionaries with sparse expert gating: "
                    "synthetic benchmark, training, evaluation, and checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
        _add_config_flags(p)
        return p

    command("gen-data", "generate the synthetic benchmark dataset")
    p_train = command("train", "train a model on a generated dataset")
    p_train.add_argument("--data", default=None, help="dataset directory")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_eval = command("eval", "evaluate a checkpoint on a dataset")
    p_eval.add_argument("--data", default=None, help="dataset directory")
    p_eval.add_argument("--checkpoint", default=None, help="checkpoint file")
    p_ablate = command("ablate", "grid sweep over n/k/beta/t_warmup")
    p_ablate.add_argument("--data", default=None,
                          help="dataset directory (generated fresh when omitted)")
    p_gc = command("gradcheck", "finite-difference check of every parameter group")
    p_gc.add_argument("--phase", choices=("warmup", "sparse", "both"), default="both")
    p_gc.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p_vis = command("visualize", "export expert heatmaps from a checkpoint")
    p_vis.add_argument("--checkpoint", default=None, help="checkpoint file")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args)
        if args.command == "train":
            return cmd_train(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args, overrides)
        if args.command == "ablate":
            return cmd_ablate(cfg, args)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args)
        if args.command == "visualize":
            return cmd_visualize(cfg, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except InconclusiveError as exc:
        print(f"inconclusive: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ShapemixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
