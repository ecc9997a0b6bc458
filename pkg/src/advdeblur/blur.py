"""Uniform blur forward model: circular convolution, its adjoint, and noise."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .imaging import Kernel, as_image

DEFAULT_NOISE_SIGMA = 0.01


@dataclass(frozen=True, eq=False)
class BlurModel:
    kernel: Kernel
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def pad_kernel(kernel: Kernel, shape: tuple[int, int]) -> np.ndarray:
    """Zero-pad ``kernel`` to ``shape`` with its center tap moved to (0, 0)."""
    h, w = shape
    k = kernel.size
    if k > min(h, w):
        raise ValueError(f"kernel of size {k} does not fit a {h}x{w} image")
    out = np.zeros((h, w))
    out[:k, :k] = kernel.weights
    c = k // 2
    return np.roll(out, (-c, -c), axis=(0, 1))


# Cached per process; workers never share spectra.
@lru_cache(maxsize=64)
def kernel_spectrum(kernel: Kernel, shape: tuple[int, int]) -> np.ndarray:
    """Half-plane DFT (``rfft2`` layout) of the padded kernel."""
    spec = np.fft.rfft2(pad_kernel(kernel, shape))
    spec.flags.writeable = False
    return spec


def full_spectrum(kernel: Kernel, shape: tuple[int, int]) -> np.ndarray:
    """Full complex DFT of the padded kernel, one coefficient per frequency bin."""
    return np.fft.fft2(pad_kernel(kernel, shape))


def apply_filter(x: np.ndarray, filt: np.ndarray) -> np.ndarray:
    """Multiply each channel of ``x`` by a half-plane frequency response."""
    h, w = x.shape[:2]
    X = np.fft.rfft2(x, axes=(0, 1))
    return np.fft.irfft2(X * filt[:, :, None], s=(h, w), axes=(0, 1))


def convolve_circular(x, kernel: Kernel) -> np.ndarray:
    x = as_image(x)
    if kernel.size == 1:  # exact identity, no FFT round-off
        return x * kernel.weights[0, 0]
    return apply_filter(x, kernel_spectrum(kernel, x.shape[:2]))


def adjoint_convolve(u, kernel: Kernel) -> np.ndarray:
    """Circular correlation with ``kernel`` (the adjoint of convolution)."""
    u = as_image(u)
    if kernel.size == 1:
        return u * kernel.weights[0, 0]
    return apply_filter(u, np.conj(kernel_spectrum(kernel, u.shape[:2])))


def gaussian_noise(shape, sigma: float, seed: int) -> np.ndarray:
    """Box-Muller normals drawn from a Philox counter-based stream."""
    n = int(np.prod(shape))
    m = (n + 1) // 2
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    u = gen.random((2, m))
    r = np.sqrt(-2.0 * np.log1p(-u[0]))
    theta = 2.0 * np.pi * u[1]
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return sigma * z.reshape(shape)


def add_gaussian_noise(y, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    y = as_image(y)
    if sigma == 0:
        return y.copy()
    return y + gaussian_noise(y.shape, sigma, seed)


def make_blurry(x, model: BlurModel) -> np.ndarray:
    return add_gaussian_noise(convolve_circular(x, model.kernel), model.noise_sigma, model.seed)
