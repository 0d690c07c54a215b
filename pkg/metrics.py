"""
metrics.py
Image quality and decoding metrics on plain arrays (no gradients).
PSNR and SSIM come from scikit-image.
"""

from typing import Union

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from errors import ShapeError
from tensor_autodiff import Tensor

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11  # gaussian window skimage derives from sigma 1.5

Image = Union[Tensor, np.ndarray]


def _pair(name: str, a: Image, b: Image) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    y = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"{name}: shapes {x.shape} and {y.shape} differ")
    return x, y


def psnr(a: Image, b: Image) -> float:
    """PSNR for values in [0, 1]; identical inputs report PSNR_CAP."""
    x, y = _pair("psnr", a, b)
    if float(np.mean((x - y) ** 2)) < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, float(peak_signal_noise_ratio(x, y, data_range=1.0)))


def ssim(a: Image, b: Image) -> float:
    """
    Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and population
    statistics, averaged over channels. Values are taken to lie in [0, 1].
    """
    x, y = _pair("ssim", a, b)
    if x.ndim not in (2, 3):
        raise ShapeError(f"ssim expects [H, W] or [H, W, C] images, got {x.shape}")
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[:2]}")
    return float(
        structural_similarity(
            x,
            y,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=1.0,
            channel_axis=-1 if x.ndim == 3 else None,
        )
    )


def l1(a: Image, b: Image) -> float:
    x, y = _pair("l1", a, b)
    return float(np.mean(np.abs(x - y)))


def bit_accuracy(bits: np.ndarray, decoded_bits: np.ndarray) -> float:
    """Fraction of positions where the binarized output equals the true bit."""
    truth = np.asarray(bits).reshape(-1)
    guess = np.asarray(decoded_bits).reshape(-1)
    if truth.shape != guess.shape:
        raise ShapeError(f"bit_accuracy: {truth.size} true bits vs {guess.size} decoded")
    if truth.size == 0:
        raise ShapeError("bit_accuracy over zero bits")
    return float(np.mean(truth.astype(np.int64) == np.rint(guess).astype(np.int64)))
