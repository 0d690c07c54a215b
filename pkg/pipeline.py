"""
pipeline.py
Training, evaluation, robustness curves and decoder fine-tuning.

One training step: fresh random messages -> encoders (per embedding
strategy) -> one distortion draw per sample -> render original and
watermarked meshes from the same sampled view -> decode -> weighted losses
-> one optimizer update. The trainer thread owns the parameters; evaluation
fans (mesh, view) pairs out to the worker pool with read-only parameters.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from rich.table import Table

import distortion
from checkpoint import checkpoint_save
from config import DatasetConfig, TrainConfig, save_config
from errors import DataError, NumericError
from losses import LossParts, LossWeights, image_loss, message_loss, reg_loss, texture_loss, total_loss, vertex_loss
from mesh_io import (
    NORMAL,
    TEXCOORD,
    Mesh,
    Message,
    PathLike,
    crop_texture,
    load_obj,
    load_png,
    load_texture_dir,
    make_primitive,
    preprocess,
    synth_noise_texture,
    unit_normals,
)
from metrics import bit_accuracy, l1, psnr, ssim
from networks import (
    NetworkParams,
    binarize,
    decoder_forward,
    encode_mesh,
    init_params,
    strategy_prefixes,
)
from optim import Adam, SGD, make_optimizer
from renderer import RenderConfig, render, sample_camera, sample_lights
from tensor_autodiff import Tape, Tensor, backward, set_precision, stack
from workers import parallel_map, parallel_map_reduce, thread_count

logger = logging.getLogger(__name__)

PRIMITIVE_KINDS = ("cube", "sphere", "tetra", "plane")
METRIC_FIELDS = ("step", "total", "vertex", "texture", "image", "message", "reg", "bit_accuracy")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def load_dataset(config: DatasetConfig, num_threads: Optional[int] = None) -> list[Mesh]:
    """Preprocessed meshes, each paired with a texture crop or a noise texture."""
    rng = np.random.default_rng(config.seed)
    if config.mesh_dir is not None:
        paths = sorted(Path(config.mesh_dir).glob("*.obj"))
        if not paths:
            raise DataError(f"{config.mesh_dir}: no OBJ files")
        raw = parallel_map(lambda p: load_obj(p, load_texture=False), paths, num_threads or thread_count())
    else:
        raw = []
        for i in range(config.primitives):
            kind = PRIMITIVE_KINDS[i % len(PRIMITIVE_KINDS)]
            raw.append(make_primitive(kind, resolution=6, stretch=rng.uniform(0.5, 1.5, size=3)))

    sources = load_texture_dir(config.texture_dir) if config.texture_dir else None
    textures = []
    for i in range(len(raw)):
        if sources is not None:
            textures.append(crop_texture(sources[int(rng.integers(len(sources)))], rng, config.texture_size))
        else:
            seed = int(rng.integers(2**31))
            textures.append(synth_noise_texture(seed, config.texture_size, config.texture_size, config.noise_blur))
    meshes = [preprocess(m, texture=t) for m, t in zip(raw, textures)]
    sizes = [m.n_vertices for m in meshes]
    logger.info("dataset: %d meshes, %d-%d vertices", len(meshes), min(sizes), max(sizes))
    return meshes


def as_original(mesh: Mesh) -> Mesh:
    """The unwatermarked reference: same normal renormalization the encoders apply."""
    return mesh.replace(attributes=unit_normals(mesh.attributes))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    total: float
    vertex: float
    texture: float
    image: float
    message: float
    reg: float
    bit_accuracy: float

    def row(self) -> dict[str, Any]:
        return asdict(self)


def apply_step(
    optimizer: Adam | SGD, params: NetworkParams, grads: dict[str, Tensor], view: NetworkParams
) -> NetworkParams:
    """
    Optimizer step plus the running statistics the forward pass left on `view`.
    A zero learning rate freezes the statistics along with the tensors.
    """
    stepped = optimizer.step(params, grads)
    if optimizer.lr == 0.0:
        return stepped
    return stepped.with_running(view.running)


def train_step(
    params: NetworkParams,
    optimizer: Adam | SGD,
    batch: Sequence[Mesh],
    config: TrainConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> tuple[NetworkParams, StepMetrics]:
    assert config.arch is not None
    n_bits = config.arch.n_bits
    trainable = [n for n in params if n.startswith(strategy_prefixes(config.strategy))]
    weights: LossWeights = config.loss
    render_cfg: RenderConfig = config.render

    with Tape() as tape:
        leaves = {name: tape.watch(params[name]) for name in trainable}
        view = params.with_tensors(leaves)
        messages, watermarked_images = [], []
        v_terms, t_terms, i_terms = [], [], []
        for mesh in batch:
            message = Message.random(rng, n_bits)
            original = as_original(mesh)
            marked = encode_mesh(view, mesh, message, config.strategy, mode="train")
            spec = config.distortions[int(rng.integers(len(config.distortions)))]
            realization = distortion.draw(spec, mesh.n_vertices, rng, mesh.positions.data)
            camera = sample_camera(rng, render_cfg)
            lights = sample_lights(rng, render_cfg)
            image_o = render(distortion.apply_draw(original, realization), camera, lights, render_cfg)
            image_w = render(distortion.apply_draw(marked, realization), camera, lights, render_cfg)
            v_terms.append(vertex_loss(original.attributes, marked.attributes, weights))
            t_terms.append(texture_loss(original.texture, marked.texture))
            i_terms.append(image_loss(image_o, image_w))
            messages.append(message.bits)
            watermarked_images.append(image_w)

        truth = np.stack(messages).astype(np.float64)
        soft = decoder_forward(view, stack(watermarked_images, axis=0), mode="train")
        scale = 1.0 / len(batch)
        parts = LossParts(
            vertex=stack(v_terms).sum() * scale,
            texture=stack(t_terms).sum() * scale,
            image=stack(i_terms).sum() * scale,
            message=message_loss(Tensor(truth), soft),
            reg=reg_loss(view, strategy_prefixes(config.strategy)),
        )
        loss = total_loss(parts, weights)
        values = parts.values()
        if not np.isfinite(loss.item()):
            raise NumericError(f"step {step}: non-finite loss; parts {values}")

    grads = backward(tape, loss, [leaves[name] for name in trainable])
    new_params = apply_step(optimizer, params, dict(zip(trainable, grads)), view)
    accuracy = bit_accuracy(truth, binarize(soft).data)
    return new_params, StepMetrics(step=step, total=loss.item(), bit_accuracy=accuracy, **values)


class Trainer:
    """
    Owns the parameters and optimizer for a run and writes its artifacts:
    out_dir/config.json, out_dir/metrics.csv, out_dir/checkpoint.mmck
    (plus checkpoint-<step>.mmck every `checkpoint_every` steps).
    """

    def __init__(
        self,
        config: TrainConfig,
        out_dir: PathLike,
        params: Optional[NetworkParams] = None,
        meshes: Optional[Sequence[Mesh]] = None,
        start_step: int = 0,
    ) -> None:
        assert config.arch is not None
        set_precision(config.precision)
        self.config = config
        self.out_dir = Path(out_dir)
        self.rng = np.random.default_rng([config.seed, 0])
        if params is None:
            params = init_params(np.random.default_rng([config.seed, 1]), config.arch)
        self.params = params
        self.optimizer = make_optimizer(config.optimizer)
        self.meshes = list(meshes) if meshes is not None else load_dataset(config.dataset)
        if not self.meshes:
            raise DataError("training needs at least one mesh")
        self.step = start_step
        self.history: list[StepMetrics] = []

    def sample_batch(self) -> list[Mesh]:
        n = len(self.meshes)
        size = self.config.batch_size
        idx = self.rng.choice(n, size=size, replace=n < size)
        return [self.meshes[int(i)] for i in idx]

    def save(self, name: str = "checkpoint.mmck") -> Path:
        return checkpoint_save(
            self.params,
            self.out_dir / name,
            step=self.step,
            meta={"strategy": self.config.strategy, "seed": self.config.seed},
        )

    def run(self, steps: Optional[int] = None) -> list[StepMetrics]:
        """Train until the step counter reaches `steps` (default: config.steps)."""
        steps = self.config.steps if steps is None else steps
        self.out_dir.mkdir(parents=True, exist_ok=True)
        save_config(self.config, self.out_dir / "config.json")
        metrics_path = self.out_dir / "metrics.csv"
        with metrics_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            writer.writeheader()
            while self.step < steps:
                self.step += 1
                self.params, metrics = train_step(
                    self.params, self.optimizer, self.sample_batch(), self.config, self.rng, self.step
                )
                self.history.append(metrics)
                writer.writerow(metrics.row())
                if self.step % self.config.log_every == 0:
                    fh.flush()
                    logger.info(
                        "step %d  loss %.5f  message %.4f  bit acc %.3f",
                        self.step,
                        metrics.total,
                        metrics.message,
                        metrics.bit_accuracy,
                    )
                if self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                    self.save(f"checkpoint-{self.step}.mmck")
        self.save()
        return self.history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    bit_accuracy_mean: float
    bit_accuracy_best: float
    bit_accuracy_std: float
    image_psnr: float
    image_ssim: float
    image_l1: float
    texture_psnr: float
    texture_ssim: float
    texture_l1: float
    normal_l1: float
    texcoord_l1: float
    n_bits: int
    n_meshes: int
    n_views: int
    total_bits: int
    distortions: dict[str, float] = field(default_factory=dict)

    def scalars(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if k != "distortions"}

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def write(self, out_dir: PathLike) -> list[Path]:
        """eval.json, eval.csv (metric,value) and distortions.csv (distortion,bit_accuracy)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        json_path = out / "eval.json"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        csv_path = out / "eval.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for key, value in self.scalars().items():
                writer.writerow([key, value])
        table_path = out / "distortions.csv"
        with table_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["distortion", "bit_accuracy"])
            for label, acc in self.distortions.items():
                writer.writerow([label, acc])
        return [json_path, csv_path, table_path]

    def table(self) -> Table:
        table = Table(title=f"evaluation ({self.n_meshes} meshes x {self.n_views} views, {self.n_bits} bits)")
        table.add_column("metric")
        table.add_column("value", justify="right")
        for key, value in self.scalars().items():
            table.add_row(key, f"{value:.4f}" if isinstance(value, float) else str(value))
        for label, acc in self.distortions.items():
            table.add_row(f"bit accuracy / {label}", f"{acc:.4f}")
        return table


@dataclass
class _PairResult:
    mesh_index: int
    accuracy: dict[str, float]
    image: tuple[float, float, float]
    texture: tuple[float, float, float]
    normal_l1: float
    texcoord_l1: float


def decode_image(params: NetworkParams, image: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode decode of one image: (soft bits, binarized bits)."""
    soft = decoder_forward(params, image, mode="eval")
    return soft.numpy(), binarize(soft).numpy().astype(np.uint8)


def _eval_pair(
    params: NetworkParams,
    mesh: Mesh,
    mesh_index: int,
    view_index: int,
    config: TrainConfig,
    rows: Sequence[distortion.DistortionSpec],
) -> _PairResult:
    assert config.arch is not None
    rng = np.random.default_rng([config.seed, 2, mesh_index, view_index])
    message = Message.random(rng, config.arch.n_bits)
    original = as_original(mesh)
    marked = encode_mesh(params, mesh, message, config.strategy, mode="eval")
    camera = sample_camera(rng, config.render)
    lights = sample_lights(rng, config.render)

    accuracy = {}
    image_metrics = (0.0, 0.0, 0.0)
    for spec in rows:
        realization = distortion.draw(spec, mesh.n_vertices, rng, mesh.positions.data)
        image_w = render(distortion.apply_draw(marked, realization), camera, lights, config.render)
        _, bits = decode_image(params, image_w)
        accuracy[spec.label()] = bit_accuracy(message.bits, bits)
        if spec.kind == "none":
            image_o = render(original, camera, lights, config.render)
            image_metrics = (psnr(image_o, image_w), ssim(image_o, image_w), l1(image_o, image_w))
    attrs_o, attrs_w = original.attributes.data, marked.attributes.data
    return _PairResult(
        mesh_index=mesh_index,
        accuracy=accuracy,
        image=image_metrics,
        texture=(
            psnr(original.texture, marked.texture),
            ssim(original.texture, marked.texture),
            l1(original.texture, marked.texture),
        ),
        normal_l1=l1(attrs_o[:, NORMAL], attrs_w[:, NORMAL]),
        texcoord_l1=l1(attrs_o[:, TEXCOORD], attrs_w[:, TEXCOORD]),
    )


def evaluate(
    params: NetworkParams,
    meshes: Sequence[Mesh],
    config: TrainConfig,
    n_views: Optional[int] = None,
    rows: Sequence[distortion.DistortionSpec] = distortion.TABLE_ROWS,
    num_threads: Optional[int] = None,
) -> EvalReport:
    """
    For every (mesh, view) pair: watermark with a fresh message, render
    under each distortion row, decode and compare. Bit accuracy mean/best/std
    are taken over per-mesh undistorted accuracies.
    """
    assert config.arch is not None
    if not meshes:
        raise DataError("evaluation needs at least one mesh")
    n_views = n_views or config.eval_views
    if not any(spec.kind == "none" for spec in rows):
        rows = (distortion.DistortionSpec("none"), *rows)
    pairs = [(i, j) for i in range(len(meshes)) for j in range(n_views)]
    results = parallel_map(
        lambda p: _eval_pair(params, meshes[p[0]], p[0], p[1], config, rows),
        pairs,
        num_threads or thread_count(),
    )

    clean = "none"
    per_mesh = np.array(
        [np.mean([r.accuracy[clean] for r in results if r.mesh_index == i]) for i in range(len(meshes))]
    )
    image = np.array([r.image for r in results])
    texture = np.array([r.texture for r in results])
    report = EvalReport(
        bit_accuracy_mean=float(per_mesh.mean()),
        bit_accuracy_best=float(per_mesh.max()),
        bit_accuracy_std=float(per_mesh.std()),
        image_psnr=float(image[:, 0].mean()),
        image_ssim=float(image[:, 1].mean()),
        image_l1=float(image[:, 2].mean()),
        texture_psnr=float(texture[:, 0].mean()),
        texture_ssim=float(texture[:, 1].mean()),
        texture_l1=float(texture[:, 2].mean()),
        normal_l1=float(np.mean([r.normal_l1 for r in results])),
        texcoord_l1=float(np.mean([r.texcoord_l1 for r in results])),
        n_bits=config.arch.n_bits,
        n_meshes=len(meshes),
        n_views=n_views,
        total_bits=len(results) * config.arch.n_bits,
        distortions={spec.label(): float(np.mean([r.accuracy[spec.label()] for r in results])) for spec in rows},
    )
    logger.info(
        "bit accuracy %.4f (best %.4f, std %.4f)",
        report.bit_accuracy_mean,
        report.bit_accuracy_best,
        report.bit_accuracy_std,
    )
    return report


def distortion_curve(
    params: NetworkParams,
    meshes: Sequence[Mesh],
    spec: distortion.DistortionSpec,
    strengths: Sequence[float],
    config: TrainConfig,
    n_views: Optional[int] = None,
    out_csv: Optional[PathLike] = None,
    num_threads: Optional[int] = None,
) -> list[tuple[float, float]]:
    """
    Bit accuracy per distortion strength. Messages and views depend only on
    (mesh, view), so the strength-0 row is the undistorted accuracy.
    CSV columns: strength,bit_accuracy,n_bits.
    """
    assert config.arch is not None
    n_views = n_views or config.eval_views
    strengths = list(strengths)

    def run_pair(pair: tuple[int, int]) -> list[float]:
        i, j = pair
        rng = np.random.default_rng([config.seed, 3, i, j])
        message = Message.random(rng, config.arch.n_bits)  # type: ignore[union-attr]
        camera = sample_camera(rng, config.render)
        lights = sample_lights(rng, config.render)
        marked = encode_mesh(params, meshes[i], message, config.strategy, mode="eval")
        out = []
        for distorted in distortion.sweep(marked, spec, strengths, seed=[config.seed, 4, i, j]):
            _, bits = decode_image(params, render(distorted, camera, lights, config.render))
            out.append(bit_accuracy(message.bits, bits))
        return out

    pairs = [(i, j) for i in range(len(meshes)) for j in range(n_views)]
    per_pair = np.array(parallel_map(run_pair, pairs, num_threads or thread_count()))
    curve = [(float(s), float(a)) for s, a in zip(strengths, per_pair.mean(axis=0))]
    if out_csv is not None:
        path = Path(out_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["strength", "bit_accuracy", "n_bits"])
            for strength, acc in curve:
                writer.writerow([strength, acc, config.arch.n_bits])
    return curve


# ---------------------------------------------------------------------------
# Decoder fine-tuning on external renders
# ---------------------------------------------------------------------------


def load_labeled_images(image_dir: PathLike, labels: PathLike, n_bits: int) -> tuple[list[Tensor], list[Message]]:
    """
    Read *.png from `image_dir` (sorted) and a JSON labels file mapping each
    file name to its hex message.
    """
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise DataError(f"{image_dir}: not a directory")
    files = sorted(image_dir.glob("*.png"))
    try:
        table = json.loads(Path(labels).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{labels}: cannot read labels ({exc})") from exc
    if not isinstance(table, dict):
        raise DataError(f"{labels}: expected an object mapping file names to hex messages")
    if len(table) != len(files):
        raise DataError(f"{len(files)} images but {len(table)} labels")
    messages = []
    for f in files:
        if f.name not in table:
            raise DataError(f"{labels}: no label for {f.name}")
        if not isinstance(table[f.name], str):
            raise DataError(f"{labels}: label for {f.name} must be a hex string, got {table[f.name]!r}")
        messages.append(Message.from_hex(table[f.name], n_bits))
    return [load_png(f) for f in files], messages


def decoder_accuracy(
    params: NetworkParams, images: Sequence[Tensor], messages: Sequence[Message], num_threads: int = 1
) -> float:
    pairs = list(zip(images, messages))
    if not pairs:
        raise DataError("decoder accuracy needs at least one image")

    def count(chunk: Sequence[tuple[Tensor, Message]]) -> tuple[int, int]:
        correct = sum(int((decode_image(params, im)[1] == m.bits).sum()) for im, m in chunk)
        return correct, sum(m.n_bits for _, m in chunk)

    def total(parts: list[tuple[int, int]]) -> tuple[int, int]:
        return sum(p[0] for p in parts), sum(p[1] for p in parts)

    correct, n = parallel_map_reduce(pairs, count, total, num_threads)
    return correct / n


def fine_tune_decoder(
    params: NetworkParams,
    images: Sequence[Tensor],
    messages: Sequence[Message],
    config: TrainConfig,
    steps: Optional[int] = None,
) -> tuple[NetworkParams, float, float]:
    """
    Train the decoder alone on (image, message) pairs with the message loss.
    Returns (params, accuracy before, accuracy after); encoder tensors are
    passed through untouched.
    """
    if len(images) != len(messages):
        raise DataError(f"{len(images)} images but {len(messages)} messages")
    if not images:
        raise DataError("fine-tuning needs at least one image")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"fine-tuning images must share one size, got {sorted(shapes)}")
    steps = config.steps if steps is None else steps
    threads = thread_count()
    before = decoder_accuracy(params, images, messages, threads)

    rng = np.random.default_rng([config.seed, 5])
    optimizer = make_optimizer(config.optimizer)
    names = params.names("decoder.")
    params = params.copy()
    for step in range(1, steps + 1):
        idx = rng.choice(len(images), size=config.batch_size, replace=len(images) < config.batch_size)
        with Tape() as tape:
            leaves = {name: tape.watch(params[name]) for name in names}
            view = params.with_tensors(leaves)
            soft = decoder_forward(view, stack([images[int(i)] for i in idx], axis=0), mode="train")
            truth = Tensor(np.stack([messages[int(i)].bits for i in idx]).astype(np.float64))
            loss = message_loss(truth, soft)
        grads = backward(tape, loss, [leaves[n] for n in names])
        params = apply_step(optimizer, params, dict(zip(names, grads)), view)
        if step % config.log_every == 0:
            logger.info("fine-tune step %d  message loss %.5f", step, loss.item())

    after = decoder_accuracy(params, images, messages, threads)
    logger.info("decoder fine-tuning: bit accuracy %.4f -> %.4f", before, after)
    return params, before, after


@dataclass
class RendererRow:
    renderer: str
    decoder: str  # "default" or "fine-tuned"
    n_images: int
    bit_accuracy: float


@dataclass
class GeneralizationReport:
    """Decoder accuracy on renders from other renderers, plus one fine-tuned row."""

    tuned_on: str
    rows: list[RendererRow] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"tuned_on": self.tuned_on, "rows": [asdict(r) for r in self.rows]}

    def table(self) -> Table:
        table = Table(title="decoder accuracy by renderer")
        table.add_column("renderer")
        table.add_column("decoder")
        table.add_column("images", justify="right")
        table.add_column("bit accuracy", justify="right")
        for row in self.rows:
            table.add_row(row.renderer, row.decoder, str(row.n_images), f"{row.bit_accuracy:.4f}")
        return table


def renderer_generalization(
    params: NetworkParams,
    sets: dict[str, tuple[Sequence[Tensor], Sequence[Message]]],
    tune_on: str,
    config: TrainConfig,
    steps: Optional[int] = None,
) -> tuple[NetworkParams, GeneralizationReport]:
    """
    Score the decoder on every renderer's labelled images, then fine-tune it
    on the `tune_on` set and score that set again.
    """
    if not sets:
        raise DataError("no renderer image sets given")
    if tune_on not in sets:
        raise DataError(f"cannot fine-tune on {tune_on!r}; renderers are {sorted(sets)}")
    threads = thread_count()
    report = GeneralizationReport(tuned_on=tune_on)
    for name, (images, messages) in sets.items():
        if len(images) != len(messages):
            raise DataError(f"{name}: {len(images)} images but {len(messages)} messages")
        accuracy = decoder_accuracy(params, images, messages, threads)
        logger.info("renderer %s: bit accuracy %.4f over %d images", name, accuracy, len(images))
        report.rows.append(RendererRow(name, "default", len(images), accuracy))
    images, messages = sets[tune_on]
    tuned, _, after = fine_tune_decoder(params, images, messages, config, steps=steps)
    report.rows.append(RendererRow(tune_on, "fine-tuned", len(images), after))
    return tuned, report



# ---------------------------------------------------------------------------
# Protocol helpers
# ---------------------------------------------------------------------------


def message_length_sweep(
    base: TrainConfig, bit_lengths: Sequence[int], out_dir: PathLike, runs: int = 1
) -> list[dict[str, Any]]:
    """Train and evaluate once per (message length, run); writes bit_lengths.csv."""
    out = Path(out_dir)
    meshes = load_dataset(base.dataset)
    rows = []
    for n_bits in bit_lengths:
        for run in range(runs):
            arch = replace(base.arch, n_bits=n_bits) if base.arch is not None else None
            config = replace(base, n_bits=n_bits, arch=arch, seed=base.seed + run)
            trainer = Trainer(config, out / f"bits{n_bits}-run{run}", meshes=meshes)
            trainer.run()
            clean = (distortion.DistortionSpec("none"),)
            report = evaluate(trainer.params, meshes[: config.eval_meshes], config, rows=clean)
            rows.append({"n_bits": n_bits, "run": run, "bit_accuracy": report.bit_accuracy_mean})
    _write_rows(out / "bit_lengths.csv", rows)
    return rows


def message_weight_sweep(base: TrainConfig, weights: Sequence[float], out_dir: PathLike) -> list[dict[str, Any]]:
    """Quality/accuracy trade-off: one run per message-loss weight; writes message_weight.csv."""
    out = Path(out_dir)
    meshes = load_dataset(base.dataset)
    rows = []
    for weight in weights:
        config = replace(base, loss=replace(base.loss, message=weight))
        trainer = Trainer(config, out / f"weight{weight:g}", meshes=meshes)
        trainer.run()
        clean = (distortion.DistortionSpec("none"),)
        report = evaluate(trainer.params, meshes[: config.eval_meshes], config, rows=clean)
        rows.append(
            {
                "message_weight": weight,
                "bit_accuracy": report.bit_accuracy_mean,
                "texture_l1": report.texture_l1,
                "image_l1": report.image_l1,
                "image_psnr": report.image_psnr,
                "image_ssim": report.image_ssim,
            }
        )
    _write_rows(out / "message_weight.csv", rows)
    return rows


def _write_rows(path: Path, rows: Sequence[dict[str, Any]]) -> None:
    if not rows:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# Strengths per distortion kind for the robustness curves: noise sigma,
# rotation half-range (radians), scaling fraction, cropped fraction.
SWEEP_STRENGTHS: dict[str, tuple[float, ...]] = {
    "noise": (0.0, 0.005, 0.01, 0.02, 0.03, 0.05),
    "rotation": (0.0, np.pi / 12, np.pi / 6, np.pi / 4, np.pi / 3),
    "scaling": (0.0, 0.1, 0.25, 0.4),
    "cropping": (0.0, 0.1, 0.2, 0.3),
}


def run_sweeps(
    params: NetworkParams,
    meshes: Sequence[Mesh],
    config: TrainConfig,
    out_dir: PathLike,
    kinds: Sequence[str] = tuple(SWEEP_STRENGTHS),
    n_views: Optional[int] = None,
) -> dict[str, Path]:
    """One sweep_<kind>.csv per distortion kind."""
    out = Path(out_dir)
    written = {}
    for kind in kinds:
        if kind not in SWEEP_STRENGTHS:
            raise DataError(f"no sweep defined for distortion kind {kind!r}")
        path = out / f"sweep_{kind}.csv"
        spec = distortion.DistortionSpec(kind)
        curve = distortion_curve(params, meshes, spec, SWEEP_STRENGTHS[kind], config, n_views, path)
        logger.info("%s sweep: %s", kind, ", ".join(f"{s:.3g}->{a:.3f}" for s, a in curve))
        written[kind] = path
    return written
