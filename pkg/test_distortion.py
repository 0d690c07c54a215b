import math

import numpy as np
import pytest

from distortion import (
    TABLE_ROWS,
    DistortionDraw,
    DistortionSpec,
    apply,
    apply_draw,
    draw,
    noise_grid_specs,
    sweep,
)
from errors import DataError
from mesh_io import make_primitive
from tensor_autodiff import Tape, Tensor, backward, precision


@pytest.fixture
def sphere():
    return make_primitive("sphere", resolution=6)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "blur"},
        {"kind": "noise", "sigma": -0.1},
        {"kind": "rotation", "max_angle": 4.0},
        {"kind": "scaling", "max_scale": 1.0},
        {"kind": "cropping", "max_crop": -0.1},
    ],
)
def test_bad_specs_are_rejected(kwargs):
    with pytest.raises(DataError):
        DistortionSpec(**kwargs)


def test_table_rows_and_strengths():
    assert [spec.kind for spec in TABLE_ROWS] == ["none", "noise", "rotation", "scaling", "cropping"]
    assert [spec.strength for spec in TABLE_ROWS] == [0.0, 0.01, math.pi / 6, 0.25, 0.2]
    assert TABLE_ROWS[3].label() == "scaling(<25%)"
    assert TABLE_ROWS[2].with_strength(0.1).max_angle == 0.1
    assert TABLE_ROWS[0].with_strength(0.5) is TABLE_ROWS[0]


def test_noise_grid_pairs_means_with_sigmas():
    specs = noise_grid_specs()
    assert len(specs) == 12
    assert (specs[0].mean, specs[0].sigma) == (-0.1, 0.03)
    assert (specs[1].mean, specs[1].sigma) == (0.1, 0.03)
    assert specs[-1].mean == 0.4


def test_draws_are_reproducible(sphere):
    spec = DistortionSpec("noise", sigma=0.05)
    a = draw(spec, sphere.n_vertices, np.random.default_rng(3))
    b = draw(spec, sphere.n_vertices, np.random.default_rng(3))
    np.testing.assert_array_equal(a.offsets, b.offsets)


def test_noise_moves_positions_only(sphere):
    realization = draw(DistortionSpec("noise", mean=0.1, sigma=0.05), sphere.n_vertices, np.random.default_rng(0))
    out = apply_draw(sphere, realization)
    np.testing.assert_allclose(out.positions.data - sphere.positions.data, realization.offsets, atol=1e-6)
    np.testing.assert_array_equal(out.attributes.data, sphere.attributes.data)
    np.testing.assert_array_equal(out.faces, sphere.faces)


def test_noise_statistics():
    offsets = draw(DistortionSpec("noise", mean=0.1, sigma=0.05), 20000, np.random.default_rng(1)).offsets
    assert offsets.mean() == pytest.approx(0.1, abs=2e-3)
    assert offsets.std() == pytest.approx(0.05, abs=2e-3)


def test_rotation_is_proper_and_bounded(sphere):
    spec = DistortionSpec("rotation", max_angle=math.pi / 6)
    rng = np.random.default_rng(4)
    for _ in range(10):
        rot = draw(spec, sphere.n_vertices, rng).rotation
        np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0)
        angle = math.acos(np.clip((np.trace(rot) - 1) / 2, -1, 1))
        assert angle <= math.pi / 6 + 1e-9


def test_rotation_turns_normals_with_positions():
    with precision("float64"):
        mesh = make_primitive("sphere", resolution=6)
        out = apply(mesh, DistortionSpec("rotation", max_angle=math.pi / 3), np.random.default_rng(5))
    np.testing.assert_allclose(
        np.linalg.norm(out.positions.data, axis=1), np.linalg.norm(mesh.positions.data, axis=1), atol=1e-12
    )
    before = (mesh.positions.data * mesh.attributes.data[:, :3]).sum(axis=1)
    after = (out.positions.data * out.attributes.data[:, :3]).sum(axis=1)
    np.testing.assert_allclose(after, before, atol=1e-12)
    np.testing.assert_array_equal(out.attributes.data[:, 3:], mesh.attributes.data[:, 3:])


def test_scaling_factor_in_range(sphere):
    spec = DistortionSpec("scaling", max_scale=0.25)
    rng = np.random.default_rng(6)
    for _ in range(20):
        realization = draw(spec, sphere.n_vertices, rng)
        assert 0.75 <= realization.factor <= 1.25
    out = apply_draw(sphere, DistortionDraw("scaling", factor=0.5))
    np.testing.assert_allclose(out.positions.data, sphere.positions.data * 0.5)


def test_cropping_removes_a_bounded_fraction(sphere):
    spec = DistortionSpec("cropping", max_crop=0.2)
    rng = np.random.default_rng(7)
    for _ in range(20):
        out = apply(sphere, spec, rng)
        removed = (~out.vertex_mask).sum()
        assert removed <= 0.2 * sphere.n_vertices
        np.testing.assert_array_equal(out.positions.data, sphere.positions.data)
    assert len(out.visible_faces()) <= sphere.n_faces


def test_cropping_composes_with_an_existing_mask(sphere):
    earlier = np.ones(sphere.n_vertices, bool)
    earlier[0] = False
    keep = np.ones(sphere.n_vertices, bool)
    keep[1] = False
    out = apply_draw(sphere.replace(vertex_mask=earlier), DistortionDraw("cropping", keep=keep))
    assert not out.vertex_mask[0] and not out.vertex_mask[1]
    assert out.vertex_mask[2:].all()


def test_mismatched_draws_are_rejected(sphere):
    with pytest.raises(DataError):
        apply_draw(sphere, DistortionDraw("noise", offsets=np.zeros((3, 3))))
    with pytest.raises(DataError):
        apply_draw(sphere, DistortionDraw("cropping", keep=np.ones(2, bool)))
    with pytest.raises(DataError):
        draw(DistortionSpec("cropping"), sphere.n_vertices, np.random.default_rng(0))


def test_none_returns_the_same_mesh(sphere):
    assert apply(sphere, DistortionSpec("none"), np.random.default_rng(0)) is sphere


def test_sweep_is_seeded_and_starts_at_identity(sphere):
    spec = DistortionSpec("noise")
    first = sweep(sphere, spec, [0.0, 0.01, 0.05], seed=[1, 2])
    again = sweep(sphere, spec, [0.0, 0.01, 0.05], seed=[1, 2])
    assert first[0] is sphere
    for a, b in zip(first, again):
        np.testing.assert_array_equal(a.positions.data, b.positions.data)
    spread = [np.abs(m.positions.data - sphere.positions.data).mean() for m in first]
    assert spread[0] == 0.0 < spread[1] < spread[2]
    with pytest.raises(DataError):
        sweep(sphere, spec, [0.05, 0.01])


def test_gradients_flow_through_rotation():
    with precision("float64"):
        sphere = make_primitive("sphere", resolution=6)
        realization = draw(DistortionSpec("rotation"), sphere.n_vertices, np.random.default_rng(8))
        weights = np.random.default_rng(9).normal(size=(sphere.n_vertices, 3))
        with Tape() as tape:
            positions = tape.watch(sphere.positions.data)
            out = apply_draw(sphere.replace(positions=positions), realization)
            loss = (out.positions * Tensor(weights)).sum()
        (grad,) = backward(tape, loss, [positions])
    np.testing.assert_allclose(grad.data, weights @ realization.rotation, atol=1e-12)
