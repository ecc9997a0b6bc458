"""Vector-Jacobian products of the reconstructors and the two attack losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import cnn
from .blur import apply_filter, kernel_spectrum
from .imaging import as_image
from .reconstructors import Reconstructor, forward, tv_hvp, wiener_filter


@dataclass(frozen=True, eq=False)
class Untargeted:
    """Push ``N(y + delta)`` away from the frozen clean output ``reference``."""

    reference: np.ndarray


@dataclass(frozen=True, eq=False)
class Targeted:
    """Pull ``N(y + delta)`` towards ``target``."""

    target: np.ndarray


LossKind = Union[Untargeted, Targeted]


def _unrolled_backward(r: Reconstructor, xs, u):
    cfg = r.config
    h, w = u.shape[:2]
    B = kernel_spectrum(r.kernel, (h, w))[:, :, None]
    B2 = np.abs(B) ** 2
    tau, alpha = cfg.step_size, cfg.tv_weight
    g = u
    ybar_hat = np.zeros_like(np.fft.rfft2(u, axes=(0, 1)))
    # x_{k+1} = x_k - tau*(B^T B x_k - B^T y + alpha*gradTV(x_k))
    for k in range(cfg.steps - 1, -1, -1):
        G = np.fft.rfft2(g, axes=(0, 1))
        ybar_hat += tau * B * G
        step = np.fft.irfft2(B2 * G, s=(h, w), axes=(0, 1))
        if alpha:
            step = step + alpha * tv_hvp(xs[k], g, cfg.charbonnier_eps)
        g = g - tau * step
    return g + np.fft.irfft2(ybar_hat, s=(h, w), axes=(0, 1))


def backward(r: Reconstructor, cache, cotangent) -> np.ndarray:
    """Apply ``J^T`` using a cache produced by :func:`reconstructors.forward`."""
    u = as_image(cotangent)
    kind = r.kind
    if kind == "wiener":
        return apply_filter(u, np.conj(wiener_filter(r.kernel, u.shape[:2], r.config.lam)))
    if cache is None:
        raise ValueError(f"{kind} backward pass needs a forward cache")
    if kind == "unrolled":
        if cache[0].shape != u.shape:
            raise ValueError(f"cotangent shape {u.shape} != input shape {cache[0].shape}")
        return _unrolled_backward(r, cache, u)
    return cnn.backward(r.config, cache, u[None])[0]


def vjp(r: Reconstructor, y, cotangent) -> np.ndarray:
    """``J^T u`` where ``J`` is the Jacobian of ``reconstruct(r, .)`` at ``y``."""
    y = as_image(y)
    u = as_image(cotangent)
    if u.shape != y.shape:
        raise ValueError(f"cotangent shape {u.shape} != input shape {y.shape}")
    if r.kind == "wiener":
        return backward(r, None, u)
    _, cache = forward(r, y)
    return backward(r, cache, u)


def loss_and_grad(r: Reconstructor, y, delta, loss, scale: float = 1.0):
    """Attack loss at ``y + delta`` and its gradient with respect to ``delta``.

    Untargeted: ``-0.5 * ||N(y+delta) - reference||^2``.
    Targeted: ``0.5 * ||N(y+delta) - target||^2``.
    Both are multiplied by ``scale``.
    """
    out, cache = forward(r, as_image(y) + as_image(delta))
    if isinstance(loss, Untargeted):
        diff = out - loss.reference
        sign = -1.0
    elif isinstance(loss, Targeted):
        diff = out - loss.target
        sign = 1.0
    else:
        raise TypeError(f"unknown loss kind {type(loss).__name__}")
    if diff.shape != out.shape:
        raise ValueError(f"loss reference shape does not match output shape {out.shape}")
    value = sign * scale * 0.5 * float(np.sum(diff * diff))
    grad = backward(r, cache, (sign * scale) * diff)
    return value, grad
