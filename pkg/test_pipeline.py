import csv
import json

import numpy as np
import pytest

from checkpoint import checkpoint_load, from_bytes, to_bytes
from config import DatasetConfig, TrainConfig, desk_preset
from distortion import TABLE_ROWS, DistortionSpec
from errors import DataError
from losses import LossParts, LossWeights, image_loss, message_loss, reg_loss, texture_loss, total_loss, vertex_loss
from mesh_io import Message, make_primitive, preprocess, save_obj, save_png, synth_noise_texture
from metrics import PSNR_CAP, psnr, ssim
from networks import ArchConfig, decoder_forward, encode_mesh, init_params
from optim import OptimizerConfig, make_optimizer
from pipeline import (
    METRIC_FIELDS,
    Trainer,
    as_original,
    decode_image,
    distortion_curve,
    evaluate,
    fine_tune_decoder,
    load_dataset,
    load_labeled_images,
    message_length_sweep,
    run_sweeps,
    message_weight_sweep,
    renderer_generalization,
    train_step,
)
from renderer import Camera, PointLight, RenderConfig, render
from tensor_autodiff import Tensor, grad_check, precision

TINY_ARCH = dict(
    vertex_widths=(8, 16),
    vertex_head_width=8,
    texture_width=4,
    decoder_width=4,
    decoder_blocks=2,
    decoder_stride_blocks=1,
)


def tiny_config(n_bits=4, **overrides):
    settings = dict(
        n_bits=n_bits,
        steps=2,
        batch_size=2,
        log_every=1,
        eval_meshes=2,
        eval_views=1,
        dataset=DatasetConfig(primitives=2, texture_size=16, noise_blur=1.0),
        arch=ArchConfig(n_bits=n_bits, **TINY_ARCH),
        render=RenderConfig(height=32, width=32),
        optimizer=OptimizerConfig(learning_rate=1e-3),
    )
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def meshes(config):
    return load_dataset(config.dataset, num_threads=1)


@pytest.fixture
def params(config):
    return init_params(np.random.default_rng(0), config.arch)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def test_primitive_dataset_is_seeded(config, meshes):
    again = load_dataset(config.dataset, num_threads=1)
    assert [m.name for m in meshes] == [m.name for m in again]
    assert len(meshes) == 2
    for a, b in zip(meshes, again):
        np.testing.assert_array_equal(a.positions.data, b.positions.data)
        np.testing.assert_array_equal(a.texture.data, b.texture.data)
        assert a.texture.shape == (16, 16, 3)


def test_dataset_from_directories(tmp_path):
    mesh_dir = tmp_path / "meshes"
    mesh_dir.mkdir()
    save_obj(make_primitive("tetra"), mesh_dir / "a.obj")
    save_obj(make_primitive("cube"), mesh_dir / "b.obj")
    texture_dir = tmp_path / "textures"
    texture_dir.mkdir()
    save_png(np.random.default_rng(0).uniform(size=(24, 24, 3)), texture_dir / "t.png")

    meshes = load_dataset(
        DatasetConfig(mesh_dir=str(mesh_dir), texture_dir=str(texture_dir), texture_size=16), num_threads=2
    )
    assert [m.n_vertices for m in meshes] == [4, 8]
    assert all(m.texture.shape == (16, 16, 3) and m.has_texture for m in meshes)

    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(DataError):
        load_dataset(DatasetConfig(mesh_dir=str(empty)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def test_fresh_networks_watermark_nothing(config, meshes, params):
    mesh = meshes[1]
    message = Message(np.array([1, 0, 1, 0], dtype=np.uint8))
    original = as_original(mesh)
    marked = encode_mesh(params, mesh, message, "vertex_and_texture", mode="train")
    camera = Camera(position=(0.0, -3.0, 2.5), aspect=1.0)
    light = PointLight(position=(2.0, 1.0, 2.0))
    image_o = render(original, camera, light, config.render)
    image_w = render(marked, camera, light, config.render)
    np.testing.assert_array_equal(image_o.data, image_w.data)
    assert vertex_loss(original.attributes, marked.attributes).item() == 0.0
    assert texture_loss(original.texture, marked.texture).item() == 0.0
    assert image_loss(image_o, image_w).item() == 0.0
    assert psnr(image_o, image_w) == PSNR_CAP
    assert ssim(image_o, image_w) == pytest.approx(1.0)


def test_train_step_updates_only_the_strategy_groups(meshes, params):
    config = tiny_config(strategy="texture_only")
    optimizer = make_optimizer(config.optimizer)
    new, metrics = train_step(params, optimizer, meshes, config, np.random.default_rng(1), step=1)
    for name in params.names("vertex."):
        np.testing.assert_array_equal(new[name].data, params[name].data)
    assert not np.array_equal(new["texture.out.kernel"].data, params["texture.out.kernel"].data)
    assert not np.array_equal(new["decoder.fc.weight"].data, params["decoder.fc.weight"].data)
    assert metrics.step == 1
    assert all(np.isfinite(v) for v in metrics.row().values())
    assert metrics.bit_accuracy in {i / 8 for i in range(9)}


def _running_snapshot(params):
    return {k: (s.mean.copy(), s.var.copy()) for k, s in params.running.items()}


def test_zero_learning_rate_keeps_params(meshes, params):
    before = _running_snapshot(params)
    config = tiny_config(optimizer=OptimizerConfig(learning_rate=0.0))
    new, _ = train_step(params, make_optimizer(config.optimizer), meshes, config, np.random.default_rng(2))
    for name in params:
        np.testing.assert_array_equal(new[name].data, params[name].data)
    for key, (mean, var) in before.items():
        np.testing.assert_array_equal(params.running[key].mean, mean)
        np.testing.assert_array_equal(new.running[key].mean, mean)
        np.testing.assert_array_equal(new.running[key].var, var)


def test_train_step_moves_statistics_on_the_returned_params_only(meshes, params):
    before = _running_snapshot(params)
    config = tiny_config()
    new, _ = train_step(params, make_optimizer(config.optimizer), meshes, config, np.random.default_rng(2))
    for key, (mean, var) in before.items():
        np.testing.assert_array_equal(params.running[key].mean, mean)
        np.testing.assert_array_equal(params.running[key].var, var)
    assert not np.array_equal(new.running["decoder.block0"].mean, before["decoder.block0"][0])


def test_trained_statistics_survive_a_checkpoint(meshes, params):
    config = tiny_config()
    new, _ = train_step(params, make_optimizer(config.optimizer), meshes, config, np.random.default_rng(4))
    loaded, _ = from_bytes(to_bytes(new), expected=config.arch)
    for key, stats in new.running.items():
        assert stats.mean.dtype == np.float32
        np.testing.assert_array_equal(loaded.running[key].mean, stats.mean)
        np.testing.assert_array_equal(loaded.running[key].var, stats.var)
    image = Tensor(np.random.default_rng(5).uniform(size=(32, 32, 3)))
    np.testing.assert_array_equal(decode_image(loaded, image)[0], decode_image(new, image)[0])


def test_trainer_writes_its_artifacts(tmp_path, meshes):
    config = tiny_config(checkpoint_every=1)
    history = Trainer(config, tmp_path, meshes=meshes).run()
    assert len(history) == 2
    assert json.loads((tmp_path / "config.json").read_text())["n_bits"] == 4
    rows = _rows(tmp_path / "metrics.csv")
    assert rows[0] == list(METRIC_FIELDS)
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    for name in ("checkpoint-1.mmck", "checkpoint-2.mmck", "checkpoint.mmck"):
        assert (tmp_path / name).is_file()
    _, header = checkpoint_load(tmp_path / "checkpoint.mmck", expected=config.arch)
    assert header["step"] == 2
    assert header["meta"]["strategy"] == "vertex_and_texture"


def test_training_is_reproducible(tmp_path, meshes):
    config = tiny_config()
    Trainer(config, tmp_path / "a", meshes=meshes).run()
    Trainer(config, tmp_path / "b", meshes=meshes).run()
    assert (tmp_path / "a" / "metrics.csv").read_text() == (tmp_path / "b" / "metrics.csv").read_text()
    assert (tmp_path / "a" / "checkpoint.mmck").read_bytes() == (tmp_path / "b" / "checkpoint.mmck").read_bytes()


def test_full_loss_gradient_reaches_the_texture():
    with precision("float64"):
        rng = np.random.default_rng(12)
        params = init_params(np.random.default_rng(11), ArchConfig(n_bits=4, **TINY_ARCH))
        params = params.with_tensors(
            {
                "texture.out.kernel": Tensor(rng.normal(0, 0.1, size=(3, 3, 4, 3))),
                "texture.out.bias": Tensor([0.02, -0.01, 0.03]),
            }
        )
        mesh = preprocess(make_primitive("plane"), texture=synth_noise_texture(3, 16, 16, renormalize=False))
        render_cfg = RenderConfig(height=32, width=32)
        camera = Camera(position=(0.0, -3.0, 2.0), aspect=1.0)
        light = PointLight(position=(2.0, 1.0, 2.0))
        message = Message(np.array([1, 0, 0, 1], dtype=np.uint8))

        def loss(texture):
            textured = mesh.replace(texture=texture)
            original = as_original(textured)
            marked = encode_mesh(params, textured, message, "texture_only", mode="eval")
            image_o = render(original, camera, light, render_cfg)
            image_w = render(marked, camera, light, render_cfg)
            parts = LossParts(
                vertex=vertex_loss(original.attributes, marked.attributes),
                texture=texture_loss(original.texture, marked.texture),
                image=image_loss(image_o, image_w),
                message=message_loss(Tensor(message.bits), decoder_forward(params, image_w, "eval")),
                reg=reg_loss(params),
            )
            return total_loss(parts, LossWeights())

        err = grad_check(loss, mesh.texture.data, max_coords=30)
    assert err < 1e-3


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def test_evaluate_fresh_networks(config, meshes, params):
    report = evaluate(params, meshes, config, n_views=1, num_threads=1)
    assert report.image_psnr == PSNR_CAP and report.texture_psnr == PSNR_CAP
    assert report.image_ssim == pytest.approx(1.0)
    assert report.normal_l1 == 0.0 and report.texcoord_l1 == 0.0
    assert (report.n_meshes, report.n_views, report.total_bits) == (2, 1, 8)
    assert list(report.distortions) == [spec.label() for spec in TABLE_ROWS]
    assert 0.0 <= report.bit_accuracy_mean <= report.bit_accuracy_best <= 1.0


def test_evaluate_does_not_depend_on_thread_count(config, meshes, params):
    one = evaluate(params, meshes, config, n_views=2, num_threads=1)
    three = evaluate(params, meshes, config, n_views=2, num_threads=3)
    assert one.to_dict() == three.to_dict()


def test_evaluate_adds_the_undistorted_row(config, meshes, params):
    report = evaluate(params, meshes[:1], config, rows=(DistortionSpec("scaling"),))
    assert list(report.distortions) == ["none", "scaling(<25%)"]


def test_untrained_decoder_is_at_chance(config, meshes, params):
    report = evaluate(params, meshes, config, n_views=50, rows=(DistortionSpec("none"),))
    assert report.total_bits == 400
    assert 0.4 <= report.bit_accuracy_mean <= 0.6


def test_report_files_and_table(tmp_path, config, meshes, params):
    report = evaluate(params, meshes, config, n_views=1)
    paths = report.write(tmp_path)
    assert [p.name for p in paths] == ["eval.json", "eval.csv", "distortions.csv"]
    assert json.loads(paths[0].read_text())["n_bits"] == 4
    assert _rows(paths[1])[0] == ["metric", "value"]
    table = _rows(paths[2])
    assert table[0] == ["distortion", "bit_accuracy"]
    assert len(table) == 1 + len(TABLE_ROWS)
    assert report.table().row_count == len(report.scalars()) + len(report.distortions)


def test_distortion_curve(tmp_path, config, meshes, params):
    strengths = [0.0, 0.01, 0.05]
    curve = distortion_curve(params, meshes, DistortionSpec("noise"), strengths, config, 2, tmp_path / "noise.csv")
    assert [s for s, _ in curve] == strengths
    assert all(0.0 <= a <= 1.0 for _, a in curve)
    rows = _rows(tmp_path / "noise.csv")
    assert rows[0] == ["strength", "bit_accuracy", "n_bits"]
    assert len(rows) == 4 and rows[1][2] == "4"
    undistorted = distortion_curve(params, meshes, DistortionSpec("noise"), [0.0], config, 2)
    assert undistorted[0][1] == curve[0][1]


def test_run_sweeps(tmp_path, config, meshes, params):
    written = run_sweeps(params, meshes[:1], config, tmp_path, kinds=("scaling",), n_views=1)
    assert list(written) == ["scaling"]
    assert len(_rows(written["scaling"])) == 1 + 4
    with pytest.raises(DataError):
        run_sweeps(params, meshes, config, tmp_path, kinds=("blur",))


# ---------------------------------------------------------------------------
# Decoder fine-tuning
# ---------------------------------------------------------------------------


def _write_images(directory, names, size=32):
    directory.mkdir(exist_ok=True)
    rng = np.random.default_rng(0)
    for name in names:
        save_png(rng.uniform(size=(size, size, 3)), directory / name)


def test_labeled_images(tmp_path):
    _write_images(tmp_path / "renders", ["a.png", "b.png"])
    labels = tmp_path / "labels.json"
    labels.write_text(json.dumps({"a.png": "5", "b.png": "a"}))
    images, messages = load_labeled_images(tmp_path / "renders", labels, 4)
    assert [im.shape for im in images] == [(32, 32, 3)] * 2
    assert [m.to_hex() for m in messages] == ["5", "a"]

    labels.write_text(json.dumps({"a.png": "5"}))
    with pytest.raises(DataError, match="2 images but 1 labels"):
        load_labeled_images(tmp_path / "renders", labels, 4)
    labels.write_text(json.dumps({"a.png": "5", "c.png": "1"}))
    with pytest.raises(DataError, match="b.png"):
        load_labeled_images(tmp_path / "renders", labels, 4)
    labels.write_text(json.dumps({"a.png": "5", "b.png": 10}))
    with pytest.raises(DataError, match="hex string"):
        load_labeled_images(tmp_path / "renders", labels, 4)


def test_fine_tuning_touches_the_decoder_only(config, params):
    rng = np.random.default_rng(3)
    images = [Tensor(rng.uniform(size=(32, 32, 3))) for _ in range(3)]
    messages = [Message.random(rng, 4) for _ in range(3)]
    running = params.running["decoder.block0"].mean.copy()
    tuned, before, after = fine_tune_decoder(params, images, messages, config, steps=3)
    np.testing.assert_array_equal(params.running["decoder.block0"].mean, running)
    assert not np.array_equal(tuned.running["decoder.block0"].mean, running)
    assert 0.0 <= before <= 1.0 and 0.0 <= after <= 1.0
    for name in params:
        if not name.startswith("decoder."):
            assert tuned[name] is params[name]
    assert not np.array_equal(tuned["decoder.fc.weight"].data, params["decoder.fc.weight"].data)
    soft, bits = decode_image(tuned, images[0])
    assert soft.shape == (4,) and set(bits.tolist()) <= {0, 1}


def test_fine_tuning_input_checks(config, params):
    image = Tensor(np.zeros((32, 32, 3)))
    message = Message(np.ones(4, dtype=np.uint8))
    with pytest.raises(DataError):
        fine_tune_decoder(params, [image, image], [message], config)
    with pytest.raises(DataError):
        fine_tune_decoder(params, [image, Tensor(np.zeros((40, 32, 3)))], [message, message], config)


def test_renderer_generalization_rows(config, params):
    rng = np.random.default_rng(6)

    def renders(n):
        return [Tensor(rng.uniform(size=(32, 32, 3))) for _ in range(n)], [Message.random(rng, 4) for _ in range(n)]

    sets = {"raster": renders(2), "path_traced": renders(3)}
    tuned, report = renderer_generalization(params, sets, "path_traced", config, steps=2)
    rows = [(r.renderer, r.decoder, r.n_images) for r in report.rows]
    assert rows == [("raster", "default", 2), ("path_traced", "default", 3), ("path_traced", "fine-tuned", 3)]
    assert all(0.0 <= r.bit_accuracy <= 1.0 for r in report.rows)
    assert report.to_dict()["tuned_on"] == "path_traced"
    assert report.table().row_count == 3
    assert not np.array_equal(tuned["decoder.fc.weight"].data, params["decoder.fc.weight"].data)
    with pytest.raises(DataError):
        renderer_generalization(params, sets, "rasterizer", config, steps=1)



# ---------------------------------------------------------------------------
# Protocol helpers
# ---------------------------------------------------------------------------


def test_message_length_and_message_weight_sweeps(tmp_path):
    base = tiny_config(steps=1, eval_meshes=1)
    lengths = message_length_sweep(base, [2, 4], tmp_path / "bits")
    assert [row["n_bits"] for row in lengths] == [2, 4]
    assert _rows(tmp_path / "bits" / "bit_lengths.csv")[0] == ["n_bits", "run", "bit_accuracy"]
    _, header = checkpoint_load(tmp_path / "bits" / "bits2-run0" / "checkpoint.mmck")
    assert header["arch"]["n_bits"] == 2

    weights = message_weight_sweep(base, [0.01, 1.0], tmp_path / "weight")
    assert [row["message_weight"] for row in weights] == [0.01, 1.0]
    assert len(_rows(tmp_path / "weight" / "message_weight.csv")) == 3


# ---------------------------------------------------------------------------
# Desk-scale runs (--runslow)
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_desk_scale_training_learns_the_message(tmp_path):
    config = desk_preset(n_bits=4, steps=3000)
    trainer = Trainer(config, tmp_path)
    trainer.run()
    report = evaluate(trainer.params, trainer.meshes, config)
    assert report.bit_accuracy_mean >= 0.90
    clean = report.distortions["none"]
    for spec in (TABLE_ROWS[1], TABLE_ROWS[2]):
        assert abs(report.distortions[spec.label()] - clean) <= 0.05


@pytest.mark.slow
def test_message_weight_trades_quality_for_accuracy(tmp_path):
    rows = message_weight_sweep(desk_preset(n_bits=4, steps=3000), [0.01, 1.0], tmp_path)
    low, high = rows
    assert high["bit_accuracy"] >= low["bit_accuracy"]
    assert high["texture_l1"] >= low["texture_l1"]
