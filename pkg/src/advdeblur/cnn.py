"""Small residual CNN: 3x3 same-padded convolutions with leaky ReLU.

Activations are laid out ``(batch, height, width, channels)``. Weights are
stored ``(out_channels, in_channels, 3, 3)`` and applied as cross-correlation
with zero padding. The network output is added to its input.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import FormatError

log = logging.getLogger(__name__)

SLOPE = 0.1
DEFAULT_HIDDEN = 32
DEFAULT_LAYERS = 3
WEIGHTS_MAGIC = b"DBNN"


@dataclass(frozen=True, eq=False)
class CnnConfig:
    weights: tuple
    biases: tuple

    def __post_init__(self):
        ws = tuple(np.asarray(w) for w in self.weights)
        bs = tuple(np.asarray(b) for b in self.biases)
        if not ws or len(ws) != len(bs):
            raise ValueError("cnn needs at least one layer and one bias per layer")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 4 or w.shape[2:] != (3, 3):
                raise ValueError(f"layer {i}: weights must be (out, in, 3, 3), got {w.shape}")
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} != ({w.shape[0]},)")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i}: takes {w.shape[1]} channels but layer {i - 1} emits {ws[i - 1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite weights")
        if ws[-1].shape[0] != ws[0].shape[1]:
            raise ValueError("last layer must emit as many channels as the input has")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def channels(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)


def init_config(channels=1, hidden=DEFAULT_HIDDEN, layers=DEFAULT_LAYERS, seed=0) -> CnnConfig:
    """He-normal hidden layers; the last layer starts at zero so N(y) = y."""
    rng = np.random.default_rng(seed)
    widths = [channels] + [hidden] * (layers - 1) + [channels]
    ws, bs = [], []
    for i in range(layers):
        cin, cout = widths[i], widths[i + 1]
        if i == layers - 1:
            w = np.zeros((cout, cin, 3, 3), dtype=np.float32)
        else:
            w = (rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (9 * cin))).astype(np.float32)
        ws.append(w)
        bs.append(np.zeros(cout, dtype=np.float32))
    return CnnConfig(tuple(ws), tuple(bs))


class _Layout:
    """Zero-padded images stacked and flattened to ``(rows, channels)``.

    With row pitch ``Wp = W + 2`` every 3x3 tap ``(i, j)`` is the contiguous
    slice starting at ``i * Wp + j`` of the array extended by ``Wp + 1`` zero
    rows on both ends, so each tap is a single matrix product.
    """

    def __init__(self, n, h, w):
        self.n, self.h, self.w = n, h, w
        self.pitch = w + 2
        self.rows = n * (h + 2) * (w + 2)
        self.margin = self.pitch + 1
        mask = np.zeros((n, h + 2, w + 2, 1), dtype=bool)
        mask[:, 1:-1, 1:-1] = True
        self.mask = mask.reshape(self.rows, 1)
        self.offsets = [i * self.pitch + j for i in range(3) for j in range(3)]

    def pack(self, x):
        c = x.shape[-1]
        ext = np.zeros((self.rows + 2 * self.margin, c), dtype=x.dtype)
        view = ext[self.margin:self.margin + self.rows].reshape(self.n, self.h + 2, self.w + 2, c)
        view[:, 1:-1, 1:-1] = x
        return ext

    def unpack(self, flat):
        return flat.reshape(self.n, self.h + 2, self.w + 2, -1)[:, 1:-1, 1:-1]

    def extend(self, flat):
        ext = np.zeros((self.rows + 2 * self.margin, flat.shape[1]), dtype=flat.dtype)
        ext[self.margin:self.margin + self.rows] = flat
        return ext


def _taps(w, dtype):
    return [np.ascontiguousarray(w[:, :, i, j].T, dtype=dtype) for i in range(3) for j in range(3)]


def forward(cfg: CnnConfig, y: np.ndarray, dtype=None):
    """Batched forward pass; returns ``(output, cache)``.

    ``dtype`` defaults to the input dtype so that 64-bit inputs give 64-bit
    arithmetic regardless of the stored weight precision.
    """
    dtype = np.dtype(dtype or y.dtype)
    y = np.asarray(y, dtype=dtype)
    if y.ndim != 4 or y.shape[3] != cfg.channels:
        raise ValueError(f"cnn expects (N, H, W, {cfg.channels}) input, got {y.shape}")
    lay = _Layout(*y.shape[:3])
    ext = lay.pack(y)
    inputs, slopes = [], []
    last = cfg.num_layers - 1
    for i, (wt, b) in enumerate(zip(cfg.weights, cfg.biases)):
        z = _conv(ext, wt, lay, dtype) + b.astype(dtype)
        inputs.append(ext)
        if i != last:
            slope = np.where(z > 0, dtype.type(1), dtype.type(SLOPE))
            slopes.append(slope)
            z *= slope
            z *= lay.mask
            ext = lay.extend(z)
    return lay.unpack(z) + y, (inputs, slopes, lay, y.shape, dtype)


def _conv(ext, wt, lay, dtype):
    cout, cin = wt.shape[:2]
    if cin <= 8:
        # thin input: one product against the 9*cin column matrix
        cols = np.concatenate([ext[off:off + lay.rows] for off in lay.offsets], axis=1)
        return cols @ wt.transpose(2, 3, 1, 0).reshape(9 * cin, cout).astype(dtype)
    z = np.zeros((lay.rows, cout), dtype=dtype)
    for off, tap in zip(lay.offsets, _taps(wt, dtype)):
        z += ext[off:off + lay.rows] @ tap
    return z


def _conv_transpose(g, wt, lay, dtype):
    cout, cin = wt.shape[:2]
    gx = np.zeros((lay.rows + 2 * lay.margin, cin), dtype=dtype)
    if cout <= 8:
        cols = g @ wt.transpose(0, 2, 3, 1).reshape(cout, 9 * cin).astype(dtype)
        for t, off in enumerate(lay.offsets):
            gx[off:off + lay.rows] += cols[:, t * cin:(t + 1) * cin]
        return gx[lay.margin:lay.margin + lay.rows]
    for t, off in enumerate(lay.offsets):
        gx[off:off + lay.rows] += g @ np.ascontiguousarray(wt[:, :, t // 3, t % 3], dtype=dtype)
    return gx[lay.margin:lay.margin + lay.rows]


def backward(cfg: CnnConfig, cache, grad_out, params=False):
    """Backpropagate ``grad_out`` through the network.

    Returns the gradient with respect to the input and, if ``params`` is
    true, lists of weight and bias gradients.
    """
    inputs, slopes, lay, shape, dtype = cache
    grad_out = np.asarray(grad_out, dtype=dtype)
    if grad_out.shape != shape:
        raise ValueError(f"gradient shape {grad_out.shape} != output shape {shape}")
    g = lay.pack(grad_out)[lay.margin:lay.margin + lay.rows]
    dws, dbs = [None] * cfg.num_layers, [None] * cfg.num_layers
    for i in range(cfg.num_layers - 1, -1, -1):
        if i != cfg.num_layers - 1:
            g = g * slopes[i]
        wt = cfg.weights[i]
        if params:
            x = inputs[i]
            taps = np.stack([x[off:off + lay.rows].T @ g for off in lay.offsets])
            dws[i] = taps.reshape(3, 3, wt.shape[1], wt.shape[0]).transpose(3, 2, 0, 1)
            dbs[i] = g.sum(axis=0)
        g = _conv_transpose(g, wt, lay, dtype) * lay.mask
    grad_in = lay.unpack(g) + grad_out
    if params:
        return grad_in, dws, dbs
    return grad_in


def _adam_update(params, grads, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= b1
        mi += (1 - b1) * g
        vi *= b2
        vi += (1 - b2) * g * g
        mhat = mi / (1 - b1**t)
        vhat = vi / (1 - b2**t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


def _dataset_loss(cfg, blurry, sharp, batch_size):
    total = 0.0
    for s in range(0, len(blurry), batch_size):
        out, _ = forward(cfg, blurry[s:s + batch_size])
        total += float(np.sum((out.astype(np.float64) - sharp[s:s + batch_size]) ** 2))
    return total / sharp.size


def train(cfg: CnnConfig, dataset, epochs=30, lr=3e-3, seed=0, batch_size=4, noise_sigma=0.0):
    """Fit the network to ``(blurry, sharp)`` pairs by mini-batch Adam on MSE.

    Returns the trained config and a loss trace: entry 0 is the dataset loss
    before training, entry ``e`` the mean mini-batch loss seen during epoch
    ``e``. Training runs in float32.
    """
    pairs = list(dataset)
    if not pairs:
        raise ValueError("empty training dataset")
    blurry = np.stack([np.asarray(b, dtype=np.float32) for b, _ in pairs])
    sharp = np.stack([np.asarray(s, dtype=np.float32) for _, s in pairs])
    if blurry.shape != sharp.shape or blurry.ndim != 4:
        raise ValueError("training pairs must share one (H, W, C) shape")

    ws = [np.array(w, dtype=np.float32) for w in cfg.weights]
    bs = [np.array(b, dtype=np.float32) for b in cfg.biases]
    params = ws + bs
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(seed)
    t = 0

    def current():
        return CnnConfig(tuple(ws), tuple(bs))

    trace = [_dataset_loss(current(), blurry, sharp, batch_size)]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(blurry))
        sq_err = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            xb = blurry[idx]
            if noise_sigma > 0:
                xb = xb + (noise_sigma * rng.standard_normal(xb.shape)).astype(np.float32)
            state = current()
            out, cache = forward(state, xb)
            diff = out - sharp[idx]
            batch_err = float(np.sum(diff.astype(np.float64) ** 2))
            if not np.isfinite(batch_err):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch {s // batch_size}")
            sq_err += batch_err
            _, dws, dbs = backward(state, cache, 2.0 * diff / diff.size, params=True)
            t += 1
            _adam_update(params, dws + dbs, m, v, t, lr)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise FloatingPointError(f"non-finite weights at epoch {epoch}, batch {s // batch_size}")
        trace.append(sq_err / sharp.size)
        log.info("epoch %d loss %.6g", epoch, trace[-1])
    return current(), trace


def save_weights(cfg: CnnConfig, path) -> None:
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + struct.pack("<I", cfg.num_layers))
        for w, b in zip(cfg.weights, cfg.biases):
            fh.write(struct.pack("<4I", *w.shape))
            fh.write(np.asarray(w, dtype="<f4").tobytes())
            fh.write(np.asarray(b, dtype="<f4").tobytes())


def load_weights(path) -> CnnConfig:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        off = 8
        ws, bs = [], []
        for _ in range(count):
            shape = struct.unpack_from("<4I", data, off)
            off += 16
            nw = int(np.prod(shape))
            if off + 4 * (nw + shape[0]) > len(data):
                raise FormatError(f"{path}: truncated weights")
            ws.append(np.frombuffer(data, "<f4", nw, off).astype(np.float32).reshape(shape))
            off += 4 * nw
            bs.append(np.frombuffer(data, "<f4", shape[0], off).astype(np.float32))
            off += 4 * shape[0]
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return CnnConfig(tuple(ws), tuple(bs))
