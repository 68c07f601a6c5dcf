"""Command-line entry point. Exit codes: 0 success, 1 usage error, 2 runtime error."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("uvsplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file whose keys override the defaults")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uvsplat", description="UV-anchored Gaussian splat avatars on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic ground-truth scene")
    _common(p)
    p.add_argument("--frames", type=int, help="number of frames")

    p = sub.add_parser("train", help="stage-I splat optimisation")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--num-splats", type=int)
    p.add_argument("--densify", choices=["sample", "threshold", "none"])

    p = sub.add_parser("bake", help="stage-II neural baking into attribute maps")
    _common(p)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="stage-I checkpoint (omit with --one-stage)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--one-stage", action="store_true", help="ablation: train prefilter from uniform anchors")
    p.add_argument("--appearance-only", action="store_true", help="bake color and opacity only")
    p.add_argument("--direct", action="store_true", help="baseline: optimise texels directly")

    p = sub.add_parser("edit", help="texture editing on a baked checkpoint")
    esub = p.add_subparsers(dest="edit_command", required=True, parser_class=_Parser)
    e = esub.add_parser("apply-sticker", help="paste an RGB image into a UV rectangle")
    _common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--sticker", type=Path, required=True, help="binary PPM image")
    e.add_argument("--uv-rect", required=True, help="u0,v0,u1,v1")
    e.add_argument("--translucent", action="store_true", help="keep the existing opacity")
    e = esub.add_parser("export", help="write one channel group as an image")
    _common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--group", required=True, choices=["color", "opacity", "offset", "scale", "rotation"])
    e = esub.add_parser("import", help="read an edited channel-group image back")
    _common(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--group", required=True, choices=["color", "opacity", "offset", "scale", "rotation"])
    e.add_argument("--image", type=Path, required=True)

    p = sub.add_parser("render", help="render a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--orbit", type=int, help="render N neutral frames on the scene's orbit arc")
    p.add_argument("--split", default="all", choices=["all", "train", "test"])

    p = sub.add_parser("eval", help="PSNR/SSIM against scene frames")
    _common(p, out_required=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["all", "train", "test"])
    p.add_argument("--json", action="store_true", help="machine-readable output")
    return parser


def _parse_rect(text: str):
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--uv-rect expects four comma-separated numbers, got {text!r}") from None
    if len(vals) != 4:
        raise UsageError(f"--uv-rect expects four comma-separated numbers, got {text!r}")
    return vals


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def _override(cfg: dict, **flags) -> dict:
    cfg = dict(cfg)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    from .synth import SceneConfig, synth

    raw = _load_config(args.config)
    seed = args.seed if args.seed is not None else int(raw.pop("seed", 0))
    raw.pop("seed", None)
    cfg = SceneConfig.from_dict(_override(raw, num_frames=args.frames))
    scene = synth(cfg, seed, args.out)
    print(f"wrote {len(scene.frames)} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .synth import load_scene
    from .train import TrainConfig, Trainer

    cfg = TrainConfig.from_dict(_override(_load_config(args.config), rng_seed=args.seed, iterations=args.iterations,
                                          num_splats=args.num_splats, densify=args.densify))
    scene = load_scene(args.scene)
    trainer = Trainer(scene, cfg)
    result = trainer.run(out_dir=args.out)
    final = result.metrics[-1] if result.metrics else None
    print(f"checkpoint: {args.out / 'checkpoint.uvgs'} ({len(result.splats)} splats)"
          + (f", last train PSNR {final[7]:.2f} dB" if final else ""))
    return EXIT_OK


def cmd_bake(args) -> int:
    from .baking import BakeConfig, bake_train, direct_map_train, one_stage_bake_train, save_baked
    from .synth import load_scene
    from .train import TrainConfig

    raw = _load_config(args.config)
    train_raw = raw.pop("train", {})
    seeds = {} if args.seed is None else {"noise_seed": args.seed, "net_seed": args.seed, "rng_seed": args.seed}
    cfg = BakeConfig.from_dict(_override(raw, iterations=args.iterations,
                                         appearance_only=True if args.appearance_only else None, **seeds))
    scene = load_scene(args.scene)
    if args.one_stage:
        tcfg = TrainConfig.from_dict(_override(train_raw, rng_seed=args.seed))
        result = one_stage_bake_train(scene, cfg, tcfg)
    else:
        if args.checkpoint is None:
            raise UsageError("bake: --checkpoint is required unless --one-stage is given")
        fn = direct_map_train if args.direct else bake_train
        result = fn(args.checkpoint, scene, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_baked(args.out / "baked.uvgs", result)
    (args.out / "bake_history.json").write_text(json.dumps(result.history, indent=1))
    print(f"baked checkpoint: {args.out / 'baked.uvgs'}")
    return EXIT_OK


def _load_baked(path):
    from .baking import load_any

    anchors, dp, de, maps = load_any(path)
    if maps is None:
        raise ValueError(f"{path} has no baked attribute maps; run `uvsplat bake` first")
    return anchors, dp, de, maps


def cmd_edit(args) -> int:
    from .baking import apply_sticker, export_texture, import_texture, save_baked
    from .imageio import read_image

    rect = _parse_rect(args.uv_rect) if args.edit_command == "apply-sticker" else None
    anchors, dp, de, maps = _load_baked(args.checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.edit_command == "export":
        ext = "ppm" if args.group in ("color", "scale", "rotation") else "pgm"
        path = args.out / f"{args.group}.{ext}"
        export_texture(maps, args.group, path)
        print(f"wrote {path}")
        return EXIT_OK
    if args.edit_command == "import":
        edited = import_texture(maps, args.image, args.group)
    else:
        edited, mask = apply_sticker(maps, read_image(args.sticker), rect, opaque=not args.translucent)
        print(f"edited {int(mask.sum())} texels")
    save_baked(args.out / "edited.uvgs", (anchors, dp, de, edited))
    print(f"wrote {args.out / 'edited.uvgs'}")
    return EXIT_OK


def _frames_for(scene, split):
    return scene.frames if split == "all" else scene.split(split)


def cmd_render(args) -> int:
    from .baking import load_any, renderable_splats
    from .imageio import write_image
    from .raster import render
    from .synth import load_scene, orbit_camera
    from .train import frame_state

    scene = load_scene(args.scene)
    anchors, dp, de, maps = load_any(args.checkpoint)
    splats = renderable_splats(anchors, maps, scene.mesh)
    out = args.out / "frames"
    out.mkdir(parents=True, exist_ok=True)
    if args.orbit is not None:
        if args.orbit < 1:
            raise UsageError("--orbit must be at least 1")
        cfg = dataclasses.replace(scene.config, num_frames=args.orbit)
        from .mesh import deform
        state = deform(scene.mesh, np.zeros(len(scene.mesh.pose_basis)), np.zeros(len(scene.mesh.expr_basis)), dp, de)
        for i in range(args.orbit):
            img = render(splats, state, orbit_camera(i, cfg), scene.background).image
            write_image(out / f"{i:04d}.ppm", img)
        count = args.orbit
    else:
        frames = _frames_for(scene, args.split)
        for f in frames:
            img = render(splats, frame_state(scene.mesh, f, dp, de), f.camera, scene.background).image
            write_image(out / f"{f.index:04d}.ppm", img)
        count = len(frames)
    print(f"wrote {count} frames to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .baking import load_any, renderable_splats
    from .metrics import MetricsReport
    from .raster import render
    from .synth import load_scene
    from .train import frame_state

    scene = load_scene(args.scene)
    anchors, dp, de, maps = load_any(args.checkpoint)
    splats = renderable_splats(anchors, maps, scene.mesh)
    frames = _frames_for(scene, args.split)
    if frames and frames[0].image.shape[:2] != (frames[0].camera.height, frames[0].camera.width):
        raise ValueError("scene image size does not match its cameras")
    report = MetricsReport()
    for f in frames:
        report.add(f.index, render(splats, frame_state(scene.mesh, f, dp, de), f.camera, scene.background).image, f.image)
    doc = {"checkpoint": str(args.checkpoint), "split": args.split, "baked": maps is not None, **report.to_dict()}
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(json.dumps(doc, indent=2))
    if args.json:
        print(json.dumps(doc))
    else:
        print(f"{args.split}: PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f} over {len(frames)} frames")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "bake": cmd_bake, "edit": cmd_edit,
            "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"uvsplat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, FloatingPointError, KeyError, json.JSONDecodeError) as exc:
        print(f"uvsplat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
