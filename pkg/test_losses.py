import numpy as np
import pytest

from errors import DataError, ShapeError
from losses import (
    LossParts,
    LossWeights,
    image_loss,
    message_loss,
    reg_loss,
    texture_loss,
    total_loss,
    vertex_loss,
)
from networks import ArchConfig, init_params
from tensor_autodiff import Tape, Tensor, backward, precision


def test_vertex_loss_weights_each_component():
    v = np.zeros((2, 5))
    v_e = np.array([[1.0, 1.0, 1.0, 0.5, 0.5], [-1.0, -1.0, -1.0, 0.5, -0.5]])
    assert vertex_loss(v, v_e).item() == pytest.approx((6 + 2) / 10)
    weights = LossWeights(normal=2.0, texcoord=0.0)
    assert vertex_loss(v, v_e, weights).item() == pytest.approx(2 * 6 / 10)


def test_vertex_loss_shape_checks():
    with pytest.raises(ShapeError):
        vertex_loss(np.zeros((2, 5)), np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        vertex_loss(np.zeros((2, 4)), np.zeros((2, 4)))


def test_mean_absolute_losses():
    t = np.zeros((4, 4, 3))
    t_e = np.full((4, 4, 3), 0.25)
    assert texture_loss(t, t_e).item() == pytest.approx(0.25)
    assert image_loss(t_e, t).item() == pytest.approx(0.25)
    with pytest.raises(ShapeError):
        image_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_message_loss_value_and_gradient():
    with precision("float64"):
        m = Tensor([1.0, 0.0, 1.0, 0.0])
        with Tape() as tape:
            m_r = tape.watch([0.9, 0.2, 0.6, 0.1])
            loss = message_loss(m, m_r)
        (grad,) = backward(tape, loss, [m_r])
    assert loss.item() == pytest.approx(0.2)
    np.testing.assert_allclose(grad.data, [-0.25, 0.25, -0.25, 0.25])
    with pytest.raises(ShapeError):
        message_loss(np.ones(4), np.ones(5))


def test_reg_loss_covers_weights_only():
    params = init_params(
        np.random.default_rng(0),
        ArchConfig(
            n_bits=2,
            vertex_widths=(4,),
            vertex_head_width=4,
            texture_width=2,
            decoder_width=2,
            decoder_blocks=1,
            decoder_stride_blocks=1,
        ),
    )
    expected = sum(
        float((params[n].data.astype(np.float64) ** 2).sum())
        for n in params
        if n.endswith(".kernel") or n.endswith(".weight")
    )
    assert reg_loss(params).item() == pytest.approx(expected, rel=1e-5)
    decoder_only = sum(
        float((params[n].data.astype(np.float64) ** 2).sum()) for n in ("decoder.block0.kernel", "decoder.fc.weight")
    )
    assert reg_loss(params, ("decoder.",)).item() == pytest.approx(decoder_only, rel=1e-5)
    assert reg_loss(params, ("nothing.",)).item() == 0.0


def test_total_is_the_weighted_sum():
    parts = LossParts(Tensor(1.0), Tensor(2.0), Tensor(3.0), Tensor(4.0), Tensor(5.0))
    weights = LossWeights(vertex=2.0, texture=1.0, image=0.5, message=0.1, reg=0.01)
    assert total_loss(parts, weights).item() == pytest.approx(2 + 2 + 1.5 + 0.4 + 0.05)
    assert parts.values() == {"vertex": 1.0, "texture": 2.0, "image": 3.0, "message": 4.0, "reg": 5.0}


def test_negative_weights_are_rejected():
    with pytest.raises(DataError):
        LossWeights(image=-1.0)
