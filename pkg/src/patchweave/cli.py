"""Command-line interface.

Verbs: train, generate, interpolate, extrapolate, panorama, guide, eval.
Exit codes: 0 success, 1 config or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    build_arch,
    build_layout,
    build_train_config,
    load_config,
    validate_data_section,
)
from .data import (
    Dataset,
    image_folder_ingest,
    load_checkpoint,
    read_ppm,
    sample_latent,
    synth_dataset,
    write_ppm,
)
from .evaluate import (
    coord_head_error,
    frechet_proxy,
    generate_set,
    guide_from_patch,
    seam_energy,
    slerp,
)
from .layers import ModelBundle
from .training import Trainer, beyond_boundary_posttrain, load_trainer, save_trainer

METRIC_COLUMNS = ("step", "L_W", "L_GP", "L_S", "L_Q", "wall_ms")
REPORT_COLUMNS = ("frechet_proxy", "seam_energy_generated", "seam_energy_real",
                  "coord_head_error")


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors surface as config errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="patchweave", description=__doc__)
    sub = parser.add_subparsers(dest="verb", metavar="VERB")
    for verb in ("train", "generate", "interpolate", "extrapolate",
                 "panorama", "guide", "eval"):
        p = sub.add_parser(verb)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--checkpoint", type=Path, default=None)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--extend", type=int, default=1)
        p.add_argument("--mode", choices=("latent", "coord"), default="latent")
        p.add_argument("--guide", type=Path, default=None)
    return parser


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise ConfigError(f"{args.verb} requires --{name}")


def _out_dir(args) -> Path:
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(values: dict) -> Dataset:
    validate_data_section(values)
    kind = values["data.kind"]
    layout = build_layout(values)
    if kind == "folder":
        images = image_folder_ingest(values["data.folder"], layout)
        return Dataset(images, "folder", values["data.seed"],
                       values["data.heldout_fraction"])
    return synth_dataset(kind, values["data.count"], layout, values["data.seed"],
                         values["data.heldout_fraction"])


def _load_bundle(args) -> ModelBundle:
    blob = args.checkpoint.read_bytes()
    return load_checkpoint(blob).bundle


def _fmt(value: float) -> str:
    return format(float(value), ".10g")


def _write_csv(path: Path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) if c != "step" else str(row[c])
                              for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ------------------------------------------------------------------- verbs


def _cmd_train(args) -> int:
    _require(args, "config", "out")
    values = load_config(args.config)
    out = _out_dir(args)
    dataset = _load_dataset(values)
    steps = args.steps if args.steps is not None else values["train.steps"]
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if args.checkpoint is not None:
        trainer = load_trainer(args.checkpoint.read_bytes(), dataset.train_images)
    else:
        layout = build_layout(values)
        arch = build_arch(values)
        cfg = build_train_config(values)
        bundle = ModelBundle.create(arch, layout, seed=args.seed)
        trainer = Trainer(bundle, dataset.train_images, cfg, seed=args.seed)

    snapshot_every = max(values["train.snapshot_every"], 1)
    rows: list[dict] = []

    def hook(metrics):
        rows.append(metrics)
        if metrics["step"] % snapshot_every == 0:
            (out / "snapshot.ckpt").write_bytes(save_trainer(trainer))

    try:
        trainer.run(steps, hook)
    finally:
        # keep whatever was logged even when a non-finite loss aborts the run
        _write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    (out / "checkpoint.ckpt").write_bytes(save_trainer(trainer))
    return 0


def _cmd_generate(args) -> int:
    _require(args, "checkpoint", "out")
    out = _out_dir(args)
    bundle = _load_bundle(args)
    count = args.steps if args.steps is not None else 8
    if count < 1:
        raise ConfigError(f"generate needs at least one sample, got {count}")
    rng = np.random.default_rng([args.seed, 0x9E4E])
    images = generate_set(bundle, rng, count)
    for i, img in enumerate(images):
        write_ppm(out / f"sample_{i:03d}.ppm", img)
    return 0


def _cmd_interpolate(args) -> int:
    _require(args, "checkpoint", "out")
    out = _out_dir(args)
    bundle = _load_bundle(args)
    frames = args.steps if args.steps is not None else 8
    if frames < 2:
        raise ConfigError(f"interpolation needs at least 2 frames, got {frames}")
    rng = np.random.default_rng([args.seed, 0x17E9])
    lay = bundle.layout
    strips = []
    if args.mode == "latent":
        z_pair = sample_latent(rng, 2, bundle.arch.latent_dim)
        for k in range(frames):
            z = slerp(z_pair[0], z_pair[1], k / (frames - 1))
            strips.append(bundle.generate_full(z))
    else:
        # sweep a macro patch across anchor columns at the middle row
        z = sample_latent(rng, 1, bundle.arch.latent_dim)[0]
        fi = (lay.anchor_rows - 1) / 2.0
        for k in range(frames):
            fj = (lay.anchor_cols - 1) * k / (frames - 1)
            cells = lay.micro_coords_frac(fi, fj).astype(np.float32)
            n, m = lay.macro_rows, lay.macro_cols
            zs = np.ascontiguousarray(np.broadcast_to(z, (n * m, z.shape[0])))
            micros = bundle.generator_forward(zs, cells.reshape(n * m, -1))
            strips.append(np.concatenate(
                [np.concatenate(list(micros[r * m:(r + 1) * m]), axis=2)
                 for r in range(n)], axis=1))
    write_ppm(out / "filmstrip.ppm", np.concatenate(strips, axis=1))
    return 0


def _cmd_extrapolate(args) -> int:
    _require(args, "checkpoint", "config", "out")
    values = load_config(args.config)
    out = _out_dir(args)
    if args.extend < 1:
        raise ConfigError(f"extrapolate requires --extend >= 1, got {args.extend}")
    bundle = _load_bundle(args)
    dataset = _load_dataset(values)
    if dataset.train_images.shape[2:] != (bundle.layout.canvas_h, bundle.layout.canvas_w):
        raise ConfigError("data canvas does not match the checkpoint layout")
    cfg = build_train_config(values)
    steps = args.steps if args.steps is not None else values["train.steps"]
    trainer = beyond_boundary_posttrain(bundle, dataset.train_images, cfg,
                                        steps=steps, extend=args.extend, seed=args.seed)
    (out / "checkpoint.ckpt").write_bytes(save_trainer(trainer))
    rng = np.random.default_rng([args.seed, 0xE47A])
    z = sample_latent(rng, 1, bundle.arch.latent_dim)[0]
    canvas = bundle.generate_full(z, extend=args.extend)
    write_ppm(out / "extended.ppm", canvas)
    s, k = bundle.layout.micro_size, args.extend
    top, left = k * s, k * s
    bounds = {
        "core_top": top,
        "core_left": left,
        "core_bottom": top + bundle.layout.canvas_h - 1,
        "core_right": left + bundle.layout.canvas_w - 1,
    }
    text = "".join(f"{key}={val}\n" for key, val in bounds.items())
    (out / "extended_bounds.txt").write_text(text, encoding="utf-8")
    return 0


def _cmd_panorama(args) -> int:
    _require(args, "checkpoint", "out")
    out = _out_dir(args)
    bundle = _load_bundle(args)
    if bundle.layout.topology != "cylindrical":
        raise ConfigError("panorama requires a cylindrical-topology checkpoint")
    rng = np.random.default_rng([args.seed, 0x9A40])
    z = sample_latent(rng, 1, bundle.arch.latent_dim)[0]
    canvas = bundle.generate_full(z)
    write_ppm(out / "panorama.ppm", np.concatenate([canvas, canvas], axis=2))
    return 0


def _cmd_guide(args) -> int:
    _require(args, "checkpoint", "guide", "out")
    out = _out_dir(args)
    bundle = _load_bundle(args)
    if not bundle.arch.latent_head:
        raise ConfigError("guide requires a checkpoint trained with the latent head")
    patch = read_ppm(args.guide)
    canvas, preds = guide_from_patch(bundle, patch)
    write_ppm(out / "guided.ppm", canvas)
    lines = [
        "coord=" + " ".join(_fmt(v) for v in preds["coord"]),
        "z=" + " ".join(_fmt(v) for v in preds["z"]),
    ]
    (out / "guide_info.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _cmd_eval(args) -> int:
    _require(args, "checkpoint", "config", "out")
    values = load_config(args.config)
    out = _out_dir(args)
    bundle = _load_bundle(args)
    dataset = _load_dataset(values)
    real = dataset.heldout_images
    if real.shape[2:] != (bundle.layout.canvas_h, bundle.layout.canvas_w):
        raise ConfigError("data canvas does not match the checkpoint layout")
    count = max(values["eval.count"], 2)
    rng = np.random.default_rng([args.seed, 0xE7A1])
    generated = generate_set(bundle, rng, count)
    s = bundle.layout.micro_size
    report = {
        "frechet_proxy": frechet_proxy(real, generated),
        "seam_energy_generated": float(np.mean([seam_energy(g, s) for g in generated])),
        "seam_energy_real": float(np.mean([seam_energy(r, s) for r in real])),
        "coord_head_error": coord_head_error(bundle, real),
    }
    for key, value in report.items():
        if not np.isfinite(value):
            raise RuntimeError(f"metric {key} is not finite: {value}")
    _write_csv(out / "report.csv", REPORT_COLUMNS, [report])
    (out / "report.json").write_text(
        json.dumps({k: float(v) for k, v in report.items()}, indent=2, sort_keys=True)
        + "\n", encoding="utf-8")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "generate": _cmd_generate,
    "interpolate": _cmd_interpolate,
    "extrapolate": _cmd_extrapolate,
    "panorama": _cmd_panorama,
    "guide": _cmd_guide,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise ConfigError("no verb given; expected one of " + ", ".join(_COMMANDS))
        return _COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
