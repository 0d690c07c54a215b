import json

import numpy as np
import pytest

from checkpoint import checkpoint_load, checkpoint_save
from cli import LOG_LEVEL_ENV, main
from config import DatasetConfig, TrainConfig, save_config
from mesh_io import Message, load_png, make_primitive, save_obj, save_png, synth_noise_texture
from networks import ArchConfig, init_params
from optim import OptimizerConfig
from renderer import RenderConfig
from workers import THREADS_ENV

TINY_ARCH = dict(
    vertex_widths=(8, 16),
    vertex_head_width=8,
    texture_width=4,
    decoder_width=4,
    decoder_blocks=2,
    decoder_stride_blocks=1,
)
SMALL = ["--height", "32", "--width", "32"]


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
    # main() writes the thread count into os.environ; monkeypatch restores it
    monkeypatch.setenv(THREADS_ENV, "1")
    monkeypatch.delenv(LOG_LEVEL_ENV, raising=False)


@pytest.fixture
def checkpoint(tmp_path):
    params = init_params(np.random.default_rng(0), ArchConfig(n_bits=4, **TINY_ARCH))
    return str(checkpoint_save(params, tmp_path / "tiny.mmck", step=5, meta={"strategy": "texture_only"}))


@pytest.fixture
def mesh_files(tmp_path):
    mesh = save_obj(make_primitive("sphere", resolution=6), tmp_path / "sphere.obj")
    texture = save_png(synth_noise_texture(7, 32, 32), tmp_path / "noise.png")
    return str(mesh), str(texture)


@pytest.fixture
def config_file(tmp_path):
    config = TrainConfig(
        n_bits=4,
        steps=1,
        batch_size=1,
        log_every=1,
        eval_meshes=2,
        eval_views=1,
        dataset=DatasetConfig(primitives=2, texture_size=16, noise_blur=1.0),
        arch=ArchConfig(n_bits=4, **TINY_ARCH),
        render=RenderConfig(height=32, width=32),
        optimizer=OptimizerConfig(learning_rate=1e-3),
    )
    return str(save_config(config, tmp_path / "tiny.json"))


def test_usage_errors_exit_with_one(tmp_path):
    assert main([]) == 1
    assert main(["render", "--bogus"]) == 1
    assert main(["train", "--out-dir", str(tmp_path), "--steps", "-3"]) == 1
    assert main(["render", "--mesh", str(tmp_path / "missing.obj"), "--out", str(tmp_path / "x.png")]) == 1


def test_bad_log_level_from_the_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(LOG_LEVEL_ENV, "loud")
    assert main(["eval", "--out-dir", str(tmp_path)]) == 1


def test_config_errors_exit_with_two(tmp_path, caplog):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_bits": 4, "steps": 1, "render": {"camera_y": "far"}}))
    assert main(["train", "--config", str(bad), "--out-dir", str(tmp_path / "run")]) == 2
    assert "$.render.camera_y" in caplog.text


def test_corrupt_checkpoint_exits_with_two(tmp_path, mesh_files):
    broken = tmp_path / "broken.mmck"
    broken.write_bytes(b"not a checkpoint")
    mesh, _ = mesh_files
    argv = ["embed", "--mesh", mesh, "--message", "5", "--checkpoint", str(broken), "--out-prefix", str(tmp_path / "m")]
    assert main(argv) == 2


def test_message_must_fit_the_checkpoint(tmp_path, checkpoint, mesh_files):
    mesh, texture = mesh_files
    prefix = tmp_path / "marked"
    base = ["embed", "--mesh", mesh, "--texture", texture, "--checkpoint", checkpoint, "--out-prefix", str(prefix)]
    assert main(base + ["--message", "a5"]) == 1
    assert main(base + ["--message", "zz"]) == 1
    assert not prefix.with_suffix(".obj").exists()


def test_embed_writes_mesh_texture_and_sidecar(tmp_path, checkpoint, mesh_files):
    mesh, texture = mesh_files
    prefix = tmp_path / "out" / "marked"
    argv = ["embed", "--mesh", mesh, "--texture", texture, "--message", "5"]
    assert main(argv + ["--checkpoint", checkpoint, "--out-prefix", str(prefix)]) == 0
    assert prefix.with_suffix(".obj").is_file()
    assert load_png(prefix.with_suffix(".png")).shape == (32, 32, 3)
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    assert sidecar == {
        "n_bits": 4,
        "strategy": "texture_only",
        "sha256": Message.from_hex("5", 4).digest(),
    }
    assert "map_Kd marked.png" in prefix.with_suffix(".mtl").read_text()


def test_render_is_deterministic(tmp_path, mesh_files):
    mesh, texture = mesh_files
    outputs = []
    for name in ("a.png", "b.png"):
        out = tmp_path / name
        assert main(["render", "--mesh", mesh, "--texture", texture, "--seed", "3", *SMALL, "--out", str(out)]) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
    assert load_png(tmp_path / "a.png").shape == (32, 32, 3)


def test_explicit_camera_and_light_ignore_the_seed(tmp_path, mesh_files):
    mesh, texture = mesh_files
    camera = tmp_path / "camera.json"
    camera.write_text(json.dumps({"position": [0.0, -2.5, 0.5]}))
    light = tmp_path / "light.json"
    light.write_text(json.dumps([{"position": [1.0, -2.0, 2.0], "color": [1.0, 1.0, 1.0]}]))
    outputs = []
    for seed in ("1", "2"):
        out = tmp_path / f"seed{seed}.png"
        argv = ["render", "--mesh", mesh, "--texture", texture, "--camera-json", str(camera)]
        argv += ["--light-json", str(light), "--seed", seed, *SMALL, "--out", str(out)]
        assert main(argv) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_malformed_camera_json_is_a_usage_error(tmp_path, mesh_files):
    mesh, _ = mesh_files
    camera = tmp_path / "camera.json"
    camera.write_text("{position: nope")
    argv = ["render", "--mesh", mesh, "--camera-json", str(camera), *SMALL, "--out", str(tmp_path / "x.png")]
    assert main(argv) == 1


def test_extract_prints_hex_and_soft_bits(tmp_path, checkpoint, mesh_files, capsys):
    mesh, texture = mesh_files
    prefix = tmp_path / "marked"
    argv = ["embed", "--mesh", mesh, "--texture", texture, "--message", "5"]
    assert main(argv + ["--checkpoint", checkpoint, "--out-prefix", str(prefix)]) == 0
    image = tmp_path / "view.png"
    assert main(["render", "--mesh", str(prefix.with_suffix(".obj")), *SMALL, "--out", str(image)]) == 0
    capsys.readouterr()

    assert main(["extract", "--image", str(image), "--checkpoint", checkpoint]) == 0
    first = capsys.readouterr().out.splitlines()
    assert main(["extract", "--image", str(image), "--checkpoint", checkpoint]) == 0
    assert capsys.readouterr().out.splitlines() == first

    hex_line, values = first
    assert len(hex_line) == 1 and int(hex_line, 16) < 16
    soft = [float(v) for v in values.split()]
    assert len(soft) == 4
    assert all(0.0 <= v <= 1.0 for v in soft)
    bits = "".join("1" if v > 0.5 else "0" for v in soft)
    assert int(hex_line, 16) == int(bits, 2)


def test_extract_from_a_mesh_view(checkpoint, mesh_files, capsys):
    mesh, _ = mesh_files
    assert main(["extract", "--mesh", mesh, "--seed", "4", *SMALL, "--checkpoint", checkpoint]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and len(lines[1].split()) == 4


def test_extract_needs_exactly_one_source(checkpoint, mesh_files):
    mesh, texture = mesh_files
    assert main(["extract", "--checkpoint", checkpoint]) == 1
    assert main(["extract", "--image", texture, "--mesh", mesh, "--checkpoint", checkpoint]) == 1


def test_undecodable_image_exits_with_two(tmp_path, checkpoint):
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"\x89PNG but not really")
    assert main(["extract", "--image", str(junk), "--checkpoint", checkpoint]) == 2


def test_train_then_resume(tmp_path, config_file):
    out = tmp_path / "run"
    assert main(["--threads", "2", "train", "--config", config_file, "--out-dir", str(out)]) == 0
    _, header = checkpoint_load(out / "checkpoint.mmck")
    assert header["step"] == 1
    argv = ["train", "--config", config_file, "--out-dir", str(tmp_path / "more"), "--steps", "2"]
    assert main(argv + ["--resume", str(out / "checkpoint.mmck")]) == 0
    _, header = checkpoint_load(tmp_path / "more" / "checkpoint.mmck")
    assert header["step"] == 2


def test_eval_and_sweep_write_reports(tmp_path, checkpoint, config_file):
    assert main(["eval", "--config", config_file, "--checkpoint", checkpoint, "--out-dir", str(tmp_path / "eval")]) == 0
    report = json.loads((tmp_path / "eval" / "eval.json").read_text())
    assert 0.0 <= report["bit_accuracy_mean"] <= 1.0
    assert (tmp_path / "eval" / "distortions.csv").is_file()

    argv = ["sweep", "--config", config_file, "--checkpoint", checkpoint, "--out-dir", str(tmp_path / "sweep")]
    assert main(argv + ["--kinds", "scaling", "--views", "1"]) == 0
    assert [p.name for p in (tmp_path / "sweep").iterdir()] == ["sweep_scaling.csv"]


def test_eval_rejects_a_checkpoint_of_another_length(tmp_path, config_file):
    params = init_params(np.random.default_rng(0), ArchConfig(n_bits=2, **TINY_ARCH))
    other = checkpoint_save(params, tmp_path / "two.mmck")
    argv = ["eval", "--config", config_file, "--checkpoint", str(other), "--out-dir", str(tmp_path / "eval")]
    assert main(argv) == 2


def _labelled_renders(directory, seed):
    rng = np.random.default_rng(seed)
    for name in ("a.png", "b.png"):
        save_png(rng.uniform(0, 1, (32, 32, 3)), directory / name)
    labels = directory.with_suffix(".json")
    labels.write_text(json.dumps({"a.png": "5", "b.png": "c"}))
    return str(directory), str(labels)


def test_finetune_writes_checkpoint_and_summary(tmp_path, checkpoint, config_file, capsys):
    raster, raster_labels = _labelled_renders(tmp_path / "raster", 0)
    eevee, eevee_labels = _labelled_renders(tmp_path / "eevee", 1)
    out = tmp_path / "tuned"
    argv = ["finetune", "--config", config_file, "--checkpoint", checkpoint, "--images", raster, eevee]
    argv += ["--labels", raster_labels, eevee_labels, "--tune-on", "eevee", "--out-dir", str(out), "--steps", "1"]
    assert main(argv) == 0
    summary = json.loads((out / "finetune.json").read_text())
    assert summary["n_images"] == 2 and summary["tuned_on"] == "eevee"
    assert [(r["renderer"], r["decoder"]) for r in summary["rows"]] == [
        ("raster", "default"),
        ("eevee", "default"),
        ("eevee", "fine-tuned"),
    ]
    assert "decoder accuracy by renderer" in capsys.readouterr().out
    _, header = checkpoint_load(out / "checkpoint.mmck")
    assert header["step"] == 5
    assert header["meta"] == {"strategy": "texture_only", "fine_tuned": True}


def test_finetune_pairs_every_image_directory_with_labels(tmp_path, checkpoint, config_file):
    raster, raster_labels = _labelled_renders(tmp_path / "raster", 0)
    eevee, _ = _labelled_renders(tmp_path / "eevee", 1)
    argv = ["finetune", "--config", config_file, "--checkpoint", checkpoint, "--out-dir", str(tmp_path / "out")]
    assert main(argv + ["--images", raster, eevee, "--labels", raster_labels]) == 1
    assert main(argv + ["--images", raster, "--labels", raster_labels, "--tune-on", "cycles"]) == 1
