"""Differentiable deblurring operators.

Three operator classes are provided:

* ``wiener``: closed-form Wiener deconvolution in the DFT domain (non-blind, linear).
* ``unrolled``: a fixed number of gradient-descent steps on a least-squares
  data term plus Charbonnier-smoothed total variation (non-blind, iterative).
* ``cnn``: a small residual convolutional network (blind); see :mod:`advdeblur.cnn`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from . import cnn
from .blur import apply_filter, convolve_circular, kernel_spectrum
from .cnn import CnnConfig
from .imaging import Kernel, as_image

DEFAULT_WIENER_LAMBDA = 0.005
DEFAULT_CRAFT_STEPS = 10
DEFAULT_EVAL_STEPS = 50


@dataclass(frozen=True)
class WienerConfig:
    lam: float = DEFAULT_WIENER_LAMBDA

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("wiener lambda must be > 0")


@dataclass(frozen=True)
class UnrolledConfig:
    steps: int = DEFAULT_CRAFT_STEPS
    step_size: float = 0.9
    tv_weight: float = 0.002
    charbonnier_eps: float = 0.01

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("unrolled steps must be >= 0")
        if not self.step_size > 0:
            raise ValueError("unrolled step_size must be > 0")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if not self.charbonnier_eps > 0:
            raise ValueError("charbonnier_eps must be > 0")


Config = Union[WienerConfig, UnrolledConfig, CnnConfig]

_KINDS = {WienerConfig: "wiener", UnrolledConfig: "unrolled", CnnConfig: "cnn"}


@dataclass(frozen=True, eq=False)
class Reconstructor:
    """A deblurring operator ``N``; non-blind kinds carry the blur kernel."""

    config: Config
    kernel: Optional[Kernel] = None

    def __post_init__(self):
        if type(self.config) not in _KINDS:
            raise TypeError(f"unknown reconstructor config {type(self.config).__name__}")
        if self.kind == "cnn":
            if self.kernel is not None:
                raise ValueError("blind cnn reconstructor takes no kernel")
        elif self.kernel is None:
            raise ValueError(f"{self.kind} reconstructor requires a kernel")

    @property
    def kind(self) -> str:
        return _KINDS[type(self.config)]

    def with_kernel(self, kernel: Kernel) -> "Reconstructor":
        if self.kind == "cnn":
            return self
        return Reconstructor(self.config, kernel)

    def with_steps(self, steps: int) -> "Reconstructor":
        if self.kind != "unrolled":
            raise ValueError("only the unrolled reconstructor has a step count")
        return Reconstructor(replace(self.config, steps=steps), self.kernel)


def wiener_filter(kernel: Kernel, shape, lam: float) -> np.ndarray:
    """Half-plane Wiener response ``conj(B) / (|B|^2 + lam)``."""
    B = kernel_spectrum(kernel, tuple(shape))
    return np.conj(B) / (np.abs(B) ** 2 + lam)


# -- Charbonnier total variation, circular forward differences, per channel --

def _diffs(x):
    return np.roll(x, -1, axis=1) - x, np.roll(x, -1, axis=0) - x


def _diffs_adjoint(px, py):
    return (np.roll(px, 1, axis=1) - px) + (np.roll(py, 1, axis=0) - py)


def tv_value(x, eps_c: float) -> float:
    dx, dy = _diffs(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.sqrt(dx * dx + dy * dy + eps_c * eps_c)))


def tv_gradient(x, eps_c: float) -> np.ndarray:
    if not eps_c > 0:
        raise ValueError("eps_c must be > 0")
    dx, dy = _diffs(np.asarray(x, dtype=np.float64))
    n = np.sqrt(dx * dx + dy * dy + eps_c * eps_c)
    return _diffs_adjoint(dx / n, dy / n)


def tv_hvp(x, v, eps_c: float) -> np.ndarray:
    """Hessian of the TV functional at ``x`` applied to ``v``."""
    dx, dy = _diffs(np.asarray(x, dtype=np.float64))
    vx, vy = _diffs(v)
    n = np.sqrt(dx * dx + dy * dy + eps_c * eps_c)
    s = (dx * vx + dy * vy) / n**3
    return _diffs_adjoint(vx / n - dx * s, vy / n - dy * s)


def unrolled_objective(r: Reconstructor, x, y) -> float:
    """Data-plus-prior energy ``0.5*||b*x - y||^2 + alpha*TV(x)``."""
    cfg = r.config
    res = convolve_circular(x, r.kernel) - y
    return 0.5 * float(np.sum(res * res)) + cfg.tv_weight * tv_value(x, cfg.charbonnier_eps)


def unrolled_iterates(r: Reconstructor, y) -> list[np.ndarray]:
    """All iterates ``x_0 = y, ..., x_K`` of the unrolled recursion."""
    y = as_image(y)
    cfg = r.config
    h, w = y.shape[:2]
    B = kernel_spectrum(r.kernel, (h, w))[:, :, None]
    B2 = np.abs(B) ** 2
    BtY = np.conj(B) * np.fft.rfft2(y, axes=(0, 1))
    xs = [y]
    x = y
    for _ in range(cfg.steps):
        X = np.fft.rfft2(x, axes=(0, 1))
        g = np.fft.irfft2(B2 * X - BtY, s=(h, w), axes=(0, 1))
        if cfg.tv_weight:
            g = g + cfg.tv_weight * tv_gradient(x, cfg.charbonnier_eps)
        x = x - cfg.step_size * g
        xs.append(x)
    return xs


def forward(r: Reconstructor, y):
    """Evaluate ``N(y)``; also return the cache needed by the backward pass."""
    y = as_image(y)
    kind = r.kind
    if kind == "wiener":
        return apply_filter(y, wiener_filter(r.kernel, y.shape[:2], r.config.lam)), None
    if kind == "unrolled":
        xs = unrolled_iterates(r, y)
        return xs[-1], xs
    out, cache = cnn.forward(r.config, y[None])
    return out[0], cache


def reconstruct(r: Reconstructor, y) -> np.ndarray:
    return forward(r, y)[0]
