"""Image and kernel containers, quality metrics and file I/O.

Images are plain numpy arrays of shape ``(height, width, channels)`` with
``channels`` in {1, 3}. Files store 32-bit samples; arithmetic on loaded
images is done in 64-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

RAW_MAGIC = b"DBIM"
RAW_HEADER = struct.Struct("<4sIII")

PSNR_CAP = 120.0
_MSE_FLOOR = 1e-12


class FormatError(ValueError):
    """Raised for malformed image or kernel files."""


class KernelError(ValueError):
    """Raised when kernel weights violate the kernel invariants."""


def as_image(a, dtype=np.float64) -> np.ndarray:
    """Validate ``a`` as an image and return it as a ``(H, W, C)`` array.

    2-D input is promoted to a single channel. Samples must be finite; the
    nominal [0, 1] range is deliberately not enforced since attacked inputs
    may leave it.
    """
    arr = np.asarray(a, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"image must be 2-D or 3-D, got shape {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1:
        raise ValueError(f"image must be at least 1x1, got {h}x{w}")
    if c not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {c}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite samples")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True, eq=False)
class Kernel:
    """Square, odd-sized, nonnegative blur kernel normalized to unit sum."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise KernelError(f"kernel must be 2-D, got shape {w.shape}")
        if w.shape[0] != w.shape[1]:
            raise KernelError(f"non-square kernel {w.shape[0]}x{w.shape[1]}")
        if w.shape[0] % 2 == 0:
            raise KernelError(f"even kernel size {w.shape[0]}")
        if not np.all(np.isfinite(w)):
            raise KernelError("non-finite kernel weight")
        if np.any(w < 0):
            raise KernelError("negative kernel weight")
        total = w.sum()
        if total <= 0:
            raise KernelError("kernel weights sum to zero")
        w = w / total
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def delta(cls, size: int = 1) -> "Kernel":
        w = np.zeros((size, size))
        w[size // 2, size // 2] = 1.0
        return cls(w)

    @classmethod
    def box(cls, size: int) -> "Kernel":
        return cls(np.ones((size, size)))


@dataclass(frozen=True)
class MetricsRecord:
    psnr_source: float
    ncc_source: float
    psnr_target: Optional[float] = None
    ncc_target: Optional[float] = None


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0, capped at 120 dB for near-identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ncc(a, b) -> float:
    """Normalized cross-correlation with one global mean per image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    da = (a - a.mean()).ravel()
    db = (b - b.mean()).ravel()
    na = np.linalg.norm(da)
    nb = np.linalg.norm(db)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate image: zero variance")
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def evaluate(output, source, target=None) -> MetricsRecord:
    if target is None:
        return MetricsRecord(psnr(output, source), ncc(output, source))
    return MetricsRecord(
        psnr(output, source), ncc(output, source), psnr(output, target), ncc(output, target)
    )


def save_raw(img, path) -> None:
    arr = as_image(img, dtype=np.float32)
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(RAW_MAGIC, w, h, c))
        fh.write(arr.astype("<f4").tobytes())


def load_raw(path) -> np.ndarray:
    """Load a DBIM file; the returned array keeps the stored float32 samples."""
    data = Path(path).read_bytes()
    if len(data) < RAW_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, w, h, c = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if w < 1 or h < 1 or c not in (1, 3):
        raise FormatError(f"{path}: bad dimensions {w}x{h}x{c}")
    n = w * h * c
    payload = data[RAW_HEADER.size:]
    if len(payload) != 4 * n:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {4 * n}")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(h, w, c)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite samples")
    return arr


def to_bytes8(img) -> np.ndarray:
    """Map samples to 0..255 with clamping and round-half-away-from-zero."""
    s = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(s + 0.5).astype(np.uint8)


def _write_pnm(arr: np.ndarray, path, magic: bytes) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(to_bytes8(arr).tobytes())


def save_pgm8(img, path) -> None:
    arr = as_image(img)
    if arr.shape[2] != 1:
        raise ValueError("save_pgm8 needs a single-channel image; use save_ppm8")
    _write_pnm(arr, path, b"P5")


def save_ppm8(img, path) -> None:
    arr = as_image(img)
    if arr.shape[2] != 3:
        raise ValueError("save_ppm8 needs a 3-channel image; use save_pgm8")
    _write_pnm(arr, path, b"P6")


def save_viewable(img, path) -> None:
    """Write a PGM or PPM depending on channel count."""
    arr = as_image(img)
    (save_pgm8 if arr.shape[2] == 1 else save_ppm8)(arr, path)


def parse_kernel(text: str, source: str = "<string>") -> Kernel:
    lines = [ln for ln in text.splitlines() if not ln.lstrip().startswith("#")]
    tokens = " ".join(lines).split()
    if len(tokens) < 2:
        raise FormatError(f"{source}: missing kernel dimensions")
    try:
        h, w = int(tokens[0]), int(tokens[1])
        values = [float(t) for t in tokens[2:]]
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from None
    if h < 1 or w < 1:
        raise FormatError(f"{source}: bad kernel dimensions {h}x{w}")
    if len(values) != h * w:
        raise FormatError(f"{source}: expected {h * w} weights, found {len(values)}")
    return Kernel(np.array(values).reshape(h, w))


def load_kernel(path) -> Kernel:
    return parse_kernel(Path(path).read_text(), str(path))


def save_kernel(kernel: Kernel, path) -> None:
    k = kernel.size
    rows = "\n".join(" ".join(repr(float(v)) for v in row) for row in kernel.weights)
    Path(path).write_text(f"{k} {k}\n{rows}\n")
