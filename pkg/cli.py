"""
cli.py
Command-line surface: python cli.py <command> [flags]

    train     train encoders + decoder from a JSON config (or the desk preset)
    embed     watermark an OBJ (+ texture) with a hex message
    extract   decode a message from a PNG, or from a mesh rendered at a given view
    render    render an OBJ to PNG
    eval      bit accuracy and quality metrics over the evaluation meshes
    sweep     bit accuracy vs distortion strength, one CSV per kind
    finetune  fine-tune the decoder on externally rendered images

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, NoReturn, Optional, Sequence

import numpy as np
from rich.console import Console
from rich.logging import RichHandler

import pipeline
from checkpoint import checkpoint_load, checkpoint_save
from config import TrainConfig, desk_preset, load_config
from errors import MeshmarkError, UsageError
from mesh_io import Message, load_obj, load_png, preprocess, save_obj, save_png
from networks import STRATEGIES, ArchConfig, NetworkParams, encode_mesh, init_params
from renderer import Camera, PointLight, RenderConfig, render, sample_camera, sample_lights
from workers import THREADS_ENV

logger = logging.getLogger("meshmark")

LOG_LEVEL_ENV = "MESHMARK_LOG_LEVEL"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting, so main() owns the exit code."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def setup_logging(level: str) -> None:
    root = logging.getLogger()
    for handler in [h for h in root.handlers if isinstance(h, RichHandler)]:
        root.removeHandler(handler)
    root.addHandler(RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=True))
    root.setLevel(level)


# ---------------------------------------------------------------------------
# Flag helpers
# ---------------------------------------------------------------------------


def _existing(path: Optional[str], what: str) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {path}: no such file or directory")
    return p


def _read_json(path: Path, what: str) -> Any:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def _config(args: argparse.Namespace, n_bits: Optional[int] = None) -> TrainConfig:
    path = _existing(getattr(args, "config", None), "config")
    if path is not None:
        return load_config(path)
    return desk_preset(n_bits=n_bits or 4)


def _load_params(
    args: argparse.Namespace, expected: Optional[ArchConfig] = None
) -> tuple[NetworkParams, dict[str, Any]]:
    path = _existing(args.checkpoint, "checkpoint")
    assert path is not None
    return checkpoint_load(path, expected=expected)


def _camera(path: Optional[str], config: RenderConfig, rng: np.random.Generator) -> Camera:
    p = _existing(path, "camera")
    if p is None:
        return sample_camera(rng, config)
    data = _read_json(p, "camera")
    if not isinstance(data, dict):
        raise UsageError(f"camera {p}: expected a JSON object")
    data.setdefault("aspect", config.aspect)
    return Camera.from_dict(data)


def _lights(path: Optional[str], config: RenderConfig, rng: np.random.Generator) -> list[PointLight]:
    p = _existing(path, "light")
    if p is None:
        return sample_lights(rng, config)
    data = _read_json(p, "light")
    items = data if isinstance(data, list) else [data]
    if not items or not all(isinstance(d, dict) for d in items):
        raise UsageError(f"light {p}: expected a JSON object or a list of objects")
    return [PointLight.from_dict(d) for d in items]


def _load_mesh(path: str, texture: Optional[str] = None) -> Any:
    mesh_path = _existing(path, "mesh")
    tex_path = _existing(texture, "texture")
    mesh = load_obj(mesh_path)  # type: ignore[arg-type]
    return preprocess(mesh, texture=load_png(tex_path) if tex_path is not None else None)


def _render_config(args: argparse.Namespace) -> RenderConfig:
    base = _config(args).render if getattr(args, "config", None) else RenderConfig()
    if args.height or args.width:
        return dataclasses.replace(base, height=args.height or base.height, width=args.width or base.width)
    return base


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args, args.n_bits)
    if args.steps is not None:
        config.steps = args.steps
    params, start = None, 0
    if args.resume:
        resume = _existing(args.resume, "checkpoint")
        assert resume is not None
        params, header = checkpoint_load(resume, expected=config.arch)
        start = int(header["step"])
    trainer = pipeline.Trainer(config, args.out_dir, params=params, start_step=start)
    history = trainer.run()
    if history:
        last = history[-1]
        logger.info("finished at step %d: loss %.5f, bit accuracy %.3f", last.step, last.total, last.bit_accuracy)
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    params, header = _load_params(args)
    strategy = args.strategy or header.get("meta", {}).get("strategy", "vertex_and_texture")
    message = Message.from_hex(args.message, params.arch.n_bits)
    mesh = _load_mesh(args.mesh, args.texture)
    marked = encode_mesh(params, mesh, message, strategy, mode="eval")

    prefix = Path(args.out_prefix)
    texture_path = save_png(marked.texture, prefix.with_suffix(".png"))
    obj_path = save_obj(marked, prefix.with_suffix(".obj"), texture_name=texture_path.name)
    sidecar = prefix.with_suffix(".json")
    record = {"n_bits": message.n_bits, "strategy": strategy, "sha256": message.digest()}
    sidecar.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s, %s and %s", obj_path, texture_path, sidecar)
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    params, _ = _load_params(args)
    if args.image:
        image = load_png(_existing(args.image, "image"))  # type: ignore[arg-type]
    else:
        if not args.mesh:
            raise UsageError("extract needs --image or --mesh")
        config = _render_config(args)
        rng = np.random.default_rng(args.seed)
        mesh = _load_mesh(args.mesh)
        image = render(mesh, _camera(args.camera, config, rng), _lights(args.light, config, rng), config)
    soft, bits = pipeline.decode_image(params, image)
    decoded = Message(bits, decoded=soft, binarized=bits)
    print(decoded.to_hex())
    print(" ".join(f"{v:.6f}" for v in soft))
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    config = _render_config(args)
    rng = np.random.default_rng(args.seed)
    mesh = _load_mesh(args.mesh, args.texture)
    camera = _camera(args.camera_json, config, rng)
    lights = _lights(args.light_json, config, rng)
    path = save_png(render(mesh, camera, lights, config), args.out)
    logger.info("wrote %s (%dx%d)", path, config.width, config.height)
    return 0


def _eval_setup(args: argparse.Namespace) -> tuple[NetworkParams, TrainConfig, list[Any]]:
    config = _config(args)
    if args.checkpoint:
        params, _ = _load_params(args, expected=config.arch)
    else:
        logger.warning("no checkpoint given; evaluating freshly initialized networks")
        assert config.arch is not None
        params = init_params(np.random.default_rng([config.seed, 1]), config.arch)
    meshes = pipeline.load_dataset(config.dataset)[: config.eval_meshes]
    return params, config, meshes


def cmd_eval(args: argparse.Namespace) -> int:
    params, config, meshes = _eval_setup(args)
    report = pipeline.evaluate(params, meshes, config, n_views=args.views)
    report.write(args.out_dir)
    Console().print(report.table())
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    params, config, meshes = _eval_setup(args)
    kinds = args.kinds or tuple(pipeline.SWEEP_STRENGTHS)
    pipeline.run_sweeps(params, meshes, config, args.out_dir, kinds=kinds, n_views=args.views)
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    config = _config(args)
    params, header = _load_params(args, expected=config.arch)
    assert config.arch is not None
    if len(args.images) != len(args.labels):
        raise UsageError(f"{len(args.images)} image directories but {len(args.labels)} labels files")
    sets: dict[str, tuple[list[Any], list[Message]]] = {}
    for image_dir, labels in zip(args.images, args.labels):
        name = Path(image_dir).name
        if name in sets:
            raise UsageError(f"two image directories are named {name!r}")
        image_path, labels_path = _existing(image_dir, "image directory"), _existing(labels, "labels")
        assert image_path is not None and labels_path is not None
        sets[name] = pipeline.load_labeled_images(image_path, labels_path, config.arch.n_bits)
    tune_on = args.tune_on or next(iter(sets))
    if tune_on not in sets:
        raise UsageError(f"--tune-on {tune_on!r} is not one of {sorted(sets)}")
    tuned, report = pipeline.renderer_generalization(params, sets, tune_on, config, steps=args.steps)

    out = Path(args.out_dir)
    meta = {**header.get("meta", {}), "fine_tuned": True}
    checkpoint_save(tuned, out / "checkpoint.mmck", step=int(header["step"]), meta=meta)
    before = next(r for r in report.rows if r.renderer == tune_on and r.decoder == "default")
    summary = {
        **report.to_dict(),
        "bit_accuracy_before": before.bit_accuracy,
        "bit_accuracy_after": report.rows[-1].bit_accuracy,
        "n_images": before.n_images,
    }
    (out / "finetune.json").write_text(json.dumps(summary, indent=2) + "\n")
    Console().print(report.table())
    return 0



# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _non_negative(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="meshmark", description="3D mesh watermarking through differentiable rendering")
    parser.add_argument("--log-level", choices=LOG_LEVELS, default=os.environ.get(LOG_LEVEL_ENV, "INFO").upper())
    parser.add_argument("--threads", type=_positive, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config (default: desk preset)")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=_non_negative, help="override config steps")
    p.add_argument("--n-bits", type=_positive, help="message length for the desk preset")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="watermark a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--texture")
    p.add_argument("--message", required=True, help="hex string, most-significant bit first")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strategy", choices=STRATEGIES, help="default: the strategy the checkpoint was trained with")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="decode a message")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--image")
    source.add_argument("--mesh")
    p.add_argument("--camera", help="camera JSON (with --mesh)")
    p.add_argument("--light", help="light JSON (with --mesh)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="render settings for --mesh")
    p.add_argument("--height", type=_positive)
    p.add_argument("--width", type=_positive)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("render", help="render a mesh to PNG")
    p.add_argument("--mesh", required=True)
    p.add_argument("--texture")
    p.add_argument("--camera-json")
    p.add_argument("--light-json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="render settings")
    p.add_argument("--height", type=_positive)
    p.add_argument("--width", type=_positive)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a checkpoint"),
        ("sweep", cmd_sweep, "bit accuracy vs distortion strength"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--checkpoint")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--views", type=_positive, help="override eval_views")
        if name == "sweep":
            p.add_argument("--kinds", nargs="+", choices=tuple(pipeline.SWEEP_STRENGTHS))
        p.set_defaults(func=func)

    p = sub.add_parser("finetune", help="fine-tune the decoder on external renders")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True, help="directories of PNG renders, one per renderer")
    p.add_argument("--labels", nargs="+", required=True, help="JSON labels (file name -> hex), one per --images")
    p.add_argument("--tune-on", help="renderer (image directory name) to fine-tune on; default: the first")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=_non_negative)
    p.set_defaults(func=cmd_finetune)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.log_level not in LOG_LEVELS:
            raise UsageError(f"{LOG_LEVEL_ENV}={args.log_level!r}; expected one of {LOG_LEVELS}")
        setup_logging(args.log_level)
        if args.threads:
            os.environ[THREADS_ENV] = str(args.threads)
        return int(args.func(args))
    except MeshmarkError as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
