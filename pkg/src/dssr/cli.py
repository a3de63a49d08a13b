"""Command-line entry point.

Subcommands: degrade, train, eval, infer, ablate, plot. Every option can
come from a flat `key = value` config file (--config) with command-line
flags taking precedence; each run writes the fully resolved configuration
back to its output directory so any command can be reproduced exactly from
that snapshot. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .degradation import (
    ANISO_NOISE,
    ANISO_SIGMA_RANGE,
    ANISO_SIZE,
    ISO_SIZE,
    DegradationSpec,
    degrade,
    gaussian8_set,
    make_anisotropic_kernel,
    make_isotropic_kernel,
    save_kernel,
)
from .evaluation import build_testset, evaluate, sr_outputs
from .imaging import load_image, save_image
from .model import DssrConfig
from .training import TrainConfig, load_corpus, train
from .variants import VARIANTS, load_checkpoint

SNAPSHOT_NAME = "resolved_config.txt"


class UsageError(Exception):
    """Bad flags, bad config keys, or missing inputs; exits with code 2."""


@dataclass(frozen=True)
class Opt:
    key: str
    typ: type
    default: object
    help: str
    choices: tuple = ()
    required: bool = False


MODEL_OPTS = [
    Opt("scale", int, 2, "upscaling factor", choices=(2, 3, 4)),
    Opt("channels", int, 128, "feature width"),
    Opt("stru_fe_blocks", int, 15, "residual blocks in the structure extractor"),
    Opt("recon_blocks", int, 5, "residual blocks in the reconstruction path"),
    Opt("detail_fe_convs", int, 4, "convs per detail branch"),
    Opt("steps", int, 4, "recurrent unroll length"),
]

TRAIN_OPTS = MODEL_OPTS + [
    Opt("alpha", float, 1.0, "weight of the detail loss term"),
    Opt("lr0", float, 2e-4, "initial learning rate"),
    Opt("total_iters", int, 20000, "optimization steps"),
    Opt("lr_halve_every", int, 4000, "halve the learning rate this often"),
    Opt("batch", int, 8, "batch size"),
    Opt("lr_patch", int, 64, "LR patch side"),
    Opt("kernel_kind", str, "isotropic", "training degradation family",
        choices=("isotropic", "anisotropic")),
    Opt("seed", int, 0, "root seed for all randomness"),
    Opt("workers", int, 0, "batch-preparation threads (0 = synchronous)"),
    Opt("log_every", int, 100, "CSV logging interval"),
    Opt("checkpoint_every", int, 5000, "checkpoint interval"),
    Opt("fixed_batch", bool, False, "overfit a single fixed batch"),
    Opt("corpus", str, None, "directory of HR training images", required=True),
    Opt("out", str, None, "output directory", required=True),
]

# scaled-down and full-size configurations; flags still override
PRESETS = {
    "smoke": {"channels": 8, "stru_fe_blocks": 1, "recon_blocks": 1, "steps": 2,
              "total_iters": 50, "lr_halve_every": 20, "batch": 2, "lr_patch": 12,
              "log_every": 10, "checkpoint_every": 50},
    "desk": {"channels": 32, "total_iters": 20000, "lr_halve_every": 4000,
             "lr_patch": 24, "log_every": 100, "checkpoint_every": 2000},
    "full": {"channels": 128, "total_iters": 480000, "lr_halve_every": 80000,
             "lr_patch": 64, "log_every": 100, "checkpoint_every": 10000},
}

OPTIONS = {
    "degrade": [
        Opt("input", str, None, "directory of HR images", required=True),
        Opt("out", str, None, "output directory", required=True),
        Opt("scale", int, 2, "downscaling factor", choices=(2, 3, 4)),
        Opt("protocol", str, "gaussian8", "kernel protocol",
            choices=("gaussian8", "anisotropic", "single-sigma")),
        Opt("sigma", float, 1.2, "width for --protocol single-sigma"),
        Opt("seed", int, 0, "root seed for kernel sampling"),
        Opt("downsampler", str, "bicubic", "downsampling operator",
            choices=("bicubic", "direct")),
    ],
    "train": TRAIN_OPTS + [
        Opt("variant", str, "full_smu", "modulation variant", choices=VARIANTS),
    ],
    "eval": [
        Opt("checkpoint", str, None, "trained model archive", required=True),
        Opt("test_dir", str, None, "directory of HR test images", required=True),
        Opt("out", str, None, "output directory", required=True),
        Opt("protocol", str, "gaussian8", "kernel protocol",
            choices=("gaussian8", "anisotropic")),
        Opt("steps", int, 0, "unroll length (0 = value the model was trained with)"),
        Opt("shave", int, -1, "border shave in pixels (-1 = scale)"),
        Opt("seed", int, 0, "root seed for anisotropic kernels"),
    ],
    "infer": [
        Opt("checkpoint", str, None, "trained model archive", required=True),
        Opt("input", str, None, "directory of LR images", required=True),
        Opt("out", str, None, "output directory", required=True),
        Opt("steps", int, 0, "unroll length (0 = value the model was trained with)"),
    ],
    "ablate": TRAIN_OPTS + [
        Opt("variant", str, "full_smu", "variant used for the alpha sweep",
            choices=VARIANTS),
        Opt("mode", str, "alpha", "sweep the loss weight or the modulation variant",
            choices=("alpha", "variants")),
        Opt("values", str, "0,1", "comma-separated alpha values (mode=alpha)"),
        Opt("variants", str, "full_smu,no_smu", "comma-separated tags (mode=variants)"),
        Opt("test_dir", str, None, "directory of HR test images", required=True),
        Opt("protocol", str, "gaussian8", "kernel protocol",
            choices=("gaussian8", "anisotropic")),
    ],
    "plot": [
        Opt("run", str, None, "directory with train_log.csv / metrics files",
            required=True),
        Opt("out", str, None, "output directory (default: the run directory)"),
    ],
}


def _coerce(opt: Opt, raw: str, where: str):
    try:
        if opt.typ is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return opt.typ(raw)
    except ValueError:
        raise UsageError(f"{where}: cannot parse {opt.key} value {raw!r} "
                         f"as {opt.typ.__name__}") from None


def read_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    entries = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def resolve(command: str, args: argparse.Namespace) -> dict:
    """defaults -> preset -> config file -> explicit flags (flags win)."""
    options = {o.key: o for o in OPTIONS[command]}
    resolved = {o.key: o.default for o in options.values()}

    preset = getattr(args, "preset", None)
    if preset:
        resolved.update(PRESETS[preset])

    if args.config:
        entries = read_config_file(args.config)
        file_command = entries.pop("command", command)
        if file_command != command:
            raise UsageError(f"config {args.config} was written for "
                             f"'{file_command}', not '{command}'")
        for key, raw in entries.items():
            if key not in options:
                raise UsageError(f"{args.config}: unknown key {key!r}")
            resolved[key] = _coerce(options[key], raw, str(args.config))

    for key, opt in options.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            if opt.typ is bool:
                flag_value = flag_value == "true"
            resolved[key] = flag_value

    for key, opt in options.items():
        value = resolved[key]
        if opt.required and value is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
        if opt.choices and value not in opt.choices:
            raise UsageError(f"{key} must be one of {opt.choices}, got {value!r}")
    return resolved


def write_snapshot(command: str, resolved: dict, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# reproduce with: dssr {command} --config {SNAPSHOT_NAME}",
             f"command = {command}"]
    for key in sorted(resolved):
        value = resolved[key]
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    path = out_dir / SNAPSHOT_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def _require_dir(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.is_dir():
        raise UsageError(f"{what} directory not found: {path}")
    return path


def _require_file(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _image_paths(directory: Path) -> list[Path]:
    from .training import IMAGE_SUFFIXES

    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise UsageError(f"no images found in {directory}")
    return paths


def cmd_degrade(resolved: dict) -> None:
    in_dir = _require_dir(resolved["input"], "input")
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    scale = resolved["scale"]
    rng = np.random.default_rng(resolved["seed"])
    for path in _image_paths(in_dir):
        hr = load_image(path)
        if resolved["protocol"] == "gaussian8":
            kernels = gaussian8_set(scale)
        elif resolved["protocol"] == "single-sigma":
            kernels = [make_isotropic_kernel(ISO_SIZE, resolved["sigma"])]
        else:
            sx, sy = rng.uniform(*ANISO_SIGMA_RANGE, size=2)
            theta = rng.uniform(-np.pi, np.pi)
            kernels = [make_anisotropic_kernel(ANISO_SIZE, sx, sy, theta,
                                               ANISO_NOISE, rng)]
        for idx, kernel in enumerate(kernels):
            spec = DegradationSpec(scale, kernel, resolved["downsampler"])
            save_image(degrade(hr, spec), out_dir / f"{path.stem}_k{idx}.png")
            save_kernel(kernel, out_dir / f"{path.stem}_k{idx}.kernel.txt")


def _split_configs(resolved: dict):
    model_cfg = DssrConfig(**{o.key: resolved[o.key] for o in MODEL_OPTS})
    train_keys = ("alpha", "lr0", "total_iters", "lr_halve_every", "batch",
                  "lr_patch", "kernel_kind", "seed", "workers", "log_every",
                  "checkpoint_every", "fixed_batch")
    train_cfg = TrainConfig(scale=resolved["scale"],
                            **{k: resolved[k] for k in train_keys})
    return model_cfg, train_cfg


def cmd_train(resolved: dict, resume: bool = False) -> None:
    corpus_dir = _require_dir(resolved["corpus"], "corpus")
    out_dir = Path(resolved["out"])
    model_cfg, train_cfg = _split_configs(resolved)
    resume_from = None
    if resume:
        resume_from = out_dir / "last.pt"
        if not resume_from.is_file():
            raise UsageError(f"cannot resume: checkpoint not found: {resume_from}")
    write_snapshot("train", resolved, out_dir)
    train(train_cfg, model_cfg, corpus_dir, out_dir,
          variant=resolved["variant"], resume_from=resume_from)


def cmd_eval(resolved: dict) -> None:
    ckpt = _require_file(resolved["checkpoint"], "checkpoint")
    test_dir = _require_dir(resolved["test_dir"], "test")
    out_dir = Path(resolved["out"])
    model, _ = load_checkpoint(ckpt)
    pairs = build_testset(test_dir, model.config.scale, resolved["protocol"],
                          seed=resolved["seed"])
    steps = resolved["steps"] if resolved["steps"] > 0 else None
    shave = resolved["shave"] if resolved["shave"] >= 0 else None
    report = evaluate(model, pairs, steps=steps, shave=shave)
    write_snapshot("eval", resolved, out_dir)
    report.write_csv(out_dir / "metrics.csv")
    report.write_json(out_dir / "metrics.json")
    agg = report.aggregates
    print(f"evaluated {agg['count']} pairs: "
          f"PSNR {agg['psnr_final']:.2f} dB (bicubic {agg['bicubic_psnr']:.2f}), "
          f"SSIM {agg['ssim_final']:.4f}")


def cmd_infer(resolved: dict) -> None:
    ckpt = _require_file(resolved["checkpoint"], "checkpoint")
    in_dir = _require_dir(resolved["input"], "input")
    out_dir = Path(resolved["out"])
    model, _ = load_checkpoint(ckpt)
    steps = resolved["steps"] if resolved["steps"] > 0 else None
    write_snapshot("infer", resolved, out_dir)
    for path in _image_paths(in_dir):
        for t, sr in enumerate(sr_outputs(model, load_image(path), steps=steps)):
            save_image(sr, out_dir / f"{path.stem}_t{t + 1}.png")


def cmd_ablate(resolved: dict) -> None:
    corpus_dir = _require_dir(resolved["corpus"], "corpus")
    test_dir = _require_dir(resolved["test_dir"], "test")
    out_dir = Path(resolved["out"])
    model_cfg, base_train_cfg = _split_configs(resolved)

    if resolved["mode"] == "alpha":
        try:
            settings = [("alpha", float(v)) for v in resolved["values"].split(",")]
        except ValueError:
            raise UsageError(f"cannot parse alpha list {resolved['values']!r}") from None
    else:
        settings = [("variant", tag) for tag in resolved["variants"].split(",")]
        for _, tag in settings:
            if tag not in VARIANTS:
                raise UsageError(f"unknown variant {tag!r}; expected one of {VARIANTS}")

    write_snapshot("ablate", resolved, out_dir)
    corpus = load_corpus(corpus_dir, base_train_cfg.lr_patch * base_train_cfg.scale)
    rows = []
    for kind, value in settings:
        label = f"{kind}_{value}"
        run_dir = out_dir / label
        if kind == "alpha":
            train_cfg = dataclasses.replace(base_train_cfg, alpha=value)
            variant = resolved["variant"]
        else:
            train_cfg = base_train_cfg
            variant = value
        train(train_cfg, model_cfg, corpus, run_dir, variant=variant)
        model, _ = load_checkpoint(run_dir / "last.pt")
        pairs = build_testset(test_dir, model_cfg.scale, resolved["protocol"],
                              seed=base_train_cfg.seed)
        report = evaluate(model, pairs)
        report.write_csv(run_dir / "metrics.csv")
        report.write_json(run_dir / "metrics.json")
        agg = report.aggregates
        rows.append((label, agg["psnr_final"], agg["ssim_final"],
                     agg["detail_l1_per_step"][-1], agg["bicubic_psnr"]))

    with open(out_dir / "ablation.csv", "w") as f:
        f.write("setting,psnr_final,ssim_final,detail_l1_final,bicubic_psnr\n")
        for label, psnr, ssim, detail, base in rows:
            f.write(f"{label},{psnr:.6f},{ssim:.6f},{detail:.6f},{base:.6f}\n")


def _read_csv(path: Path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(f))


def cmd_plot(resolved: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = _require_dir(resolved["run"], "run")
    out_dir = Path(resolved["out"]) if resolved["out"] else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []

    log_path = run_dir / "train_log.csv"
    if log_path.is_file():
        rows = _read_csv(log_path)
        iters = [int(r["iter"]) for r in rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        for column in ("total", "detail_loss", "sr_loss"):
            ax.plot(iters, [float(r[column]) for r in rows], label=column)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "loss_curve.png", dpi=120)
        plt.close(fig)
        made.append("loss_curve.png")

    metrics_json = run_dir / "metrics.json"
    if metrics_json.is_file():
        import json

        agg = json.loads(metrics_json.read_text())
        steps = list(range(1, agg["steps"] + 1))
        for key, ylabel, fname in (
                ("psnr_per_step", "PSNR (dB)", "psnr_vs_step.png"),
                ("detail_l1_per_step", "detail L1", "detail_l1_vs_step.png")):
            fig, ax = plt.subplots(figsize=(5, 4))
            ax.plot(steps, agg[key], marker="o")
            ax.set_xlabel("time step")
            ax.set_ylabel(ylabel)
            ax.set_xticks(steps)
            fig.tight_layout()
            fig.savefig(out_dir / fname, dpi=120)
            plt.close(fig)
            made.append(fname)

    metrics_csv = run_dir / "metrics.csv"
    if metrics_csv.is_file():
        rows = [r for r in _read_csv(metrics_csv) if r["kernel"].startswith("iso_")]
        if rows:
            last = max(int(k.split("_t")[1]) for k in rows[0] if k.startswith("psnr_t"))
            widths = sorted({float(r["kernel"].split("_")[1]) for r in rows})
            means = [float(np.mean([float(r[f"psnr_t{last}"]) for r in rows
                                    if float(r["kernel"].split("_")[1]) == w]))
                     for w in widths]
            fig, ax = plt.subplots(figsize=(5, 4))
            ax.plot(widths, means, marker="s")
            ax.set_xlabel("kernel width")
            ax.set_ylabel(f"PSNR at t={last} (dB)")
            fig.tight_layout()
            fig.savefig(out_dir / "psnr_vs_width.png", dpi=120)
            plt.close(fig)
            made.append("psnr_vs_width.png")

    if not made:
        raise UsageError(f"nothing to plot in {run_dir}: no train_log.csv, "
                         "metrics.json or metrics.csv")
    print("wrote " + ", ".join(made))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dssr",
        description="blind super-resolution by recurrent detail-structure optimization")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in OPTIONS.items():
        p = sub.add_parser(command, help=f"{command} command")
        p.add_argument("--config", default=None,
                       help="flat key = value config file (flags override it)")
        if command in ("train", "ablate"):
            p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                           help="apply a named size/budget preset first")
        if command == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from <out>/last.pt")
        for opt in options:
            flag = "--" + opt.key.replace("_", "-")
            kwargs = {"dest": opt.key, "default": None, "help": opt.help}
            if opt.typ is bool:
                kwargs["type"] = str
                kwargs["choices"] = ["true", "false"]
            else:
                kwargs["type"] = opt.typ
                if opt.choices:
                    kwargs["choices"] = list(opt.choices)
            p.add_argument(flag, **kwargs)
    return parser


COMMANDS = {
    "degrade": cmd_degrade,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        resolved = resolve(args.command, args)
        if args.command == "train":
            cmd_train(resolved, resume=args.resume)
        else:
            COMMANDS[args.command](resolved)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 — the CLI boundary reports and exits
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
