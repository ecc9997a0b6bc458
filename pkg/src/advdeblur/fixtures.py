"""Procedural test images, motion-blur kernels and CNN training pairs.

Everything here is a pure function of its seed, so fixture files can be
regenerated bit-for-bit instead of being downloaded.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import cnn
from .blur import convolve_circular, full_spectrum
from .imaging import Kernel, load_raw, save_kernel, save_raw

SIZE = 64
KERNEL_SIZES = (11, 17, 25)
MIN_KERNEL_GAIN = 1e-3  # smallest allowed |DFT| of a fixture kernel on a 64x64 grid

# 3x5 bitmaps, rows top to bottom
_DIGITS = {
    "0": ["111", "101", "101", "101", "111"],
    "1": ["010", "110", "010", "010", "111"],
    "2": ["111", "001", "111", "100", "111"],
    "3": ["111", "001", "111", "001", "111"],
    "4": ["101", "101", "111", "001", "001"],
    "5": ["111", "100", "111", "001", "111"],
    "6": ["111", "100", "111", "101", "111"],
    "7": ["111", "001", "010", "010", "010"],
    "8": ["111", "101", "111", "101", "111"],
    "9": ["111", "101", "111", "001", "111"],
}


def glyph(ch: str, scale: int = 1) -> np.ndarray:
    bitmap = np.array([[c == "1" for c in row] for row in _DIGITS[ch]], dtype=np.float64)
    return np.kron(bitmap, np.ones((scale, scale)))


def checker_disk(size=SIZE) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    img = np.where(((yy // 8) + (xx // 8)) % 2 == 0, 0.3, 0.7)
    c = (size - 1) / 2
    img[(yy - c) ** 2 + (xx - c) ** 2 <= (size / 4) ** 2] = 0.95
    img[(yy - c) ** 2 + (xx - c) ** 2 <= (size / 10) ** 2] = 0.05
    return img[:, :, None]


def smooth_field(size=SIZE, seed=1, sigma=3.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    f = np.fft.fftfreq(size)
    g = np.exp(-2 * (np.pi * sigma) ** 2 * (f[:, None] ** 2 + f[None, :] ** 2))
    field = np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) * g).real
    field = (field - field.min()) / (field.max() - field.min())
    return (0.05 + 0.9 * field)[:, :, None]


def glyph_grid(size=SIZE, seed=2) -> np.ndarray:
    rng = np.random.default_rng(seed)
    img = np.full((size, size), 0.9)
    for top in range(2, size - 10, 12):
        for left in range(2, size - 6, 8):
            g = glyph(str(rng.integers(10)), 2)
            img[top:top + 10, left:left + 6] = np.where(g > 0, 0.1, 0.9)
    return img[:, :, None]


def rings(size=SIZE) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    c = (size - 1) / 2
    r = np.hypot(yy - c, xx - c)
    return (0.5 + 0.4 * np.cos(r / 2.5))[:, :, None]


def nine_patch(size=16) -> np.ndarray:
    """Dark square with a bright '9', the localized-target insert."""
    p = np.full((size, size), 0.1)
    g = glyph("9", 3)
    top, left = (size - g.shape[0]) // 2, (size - g.shape[1]) // 2
    p[top:top + g.shape[0], left:left + g.shape[1]] = np.where(g > 0, 0.95, 0.1)
    return p[:, :, None]


def source_images() -> dict:
    return {"checker": checker_disk(), "field": smooth_field(), "glyphs": glyph_grid()}


def _walk(size, rng) -> np.ndarray:
    n = 8 * size
    angle = rng.uniform(0, 2 * np.pi)
    turn = rng.normal(0, 0.15, n).cumsum()
    steps = np.stack([np.cos(angle + turn), np.sin(angle + turn)], axis=1)
    path = np.cumsum(steps, axis=0)
    path -= (path.max(axis=0) + path.min(axis=0)) / 2
    extent = np.abs(path).max()
    return path * ((size - 1) / 2 - 1) / extent + (size - 1) / 2


def motion_kernel(size: int, seed: int, grid=SIZE) -> Kernel:
    """Random-walk motion blur of the given odd size.

    Walks are resampled (deterministically, by bumping the seed) until the
    kernel has no near-null DFT coefficient on a ``grid x grid`` image.
    """
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        w = np.zeros((size, size))
        for py, px in _walk(size, rng):
            y0, x0 = int(np.floor(py)), int(np.floor(px))
            fy, fx = py - y0, px - x0
            w[y0, x0] += (1 - fy) * (1 - fx)
            w[y0 + 1, x0] += fy * (1 - fx)
            w[y0, x0 + 1] += (1 - fy) * fx
            w[y0 + 1, x0 + 1] += fy * fx
        k = Kernel(w)
        if np.abs(full_spectrum(k, (grid, grid))).min() >= MIN_KERNEL_GAIN:
            return k
    raise RuntimeError(f"no admissible {size}x{size} motion kernel for seed {seed}")


def fixture_kernels() -> dict:
    return {f"k{s}": motion_kernel(s, seed=100 + s) for s in KERNEL_SIZES}


def training_pairs(n=200, patch=32, seed=7, kernels=None):
    """Blurred/sharp patch pairs cut from procedurally varied images."""
    rng = np.random.default_rng(seed)
    kernels = list((kernels or fixture_kernels()).values())
    pool = []
    for i in range(8):
        pool += [smooth_field(seed=1000 + i, sigma=rng.uniform(1.5, 4)), glyph_grid(seed=2000 + i)]
    pool.append(rings())
    blurred = [[convolve_circular(img, k) for k in kernels] for img in pool]
    pairs = []
    for _ in range(n):
        i = rng.integers(len(pool))
        j = rng.integers(len(kernels))
        top, left = rng.integers(0, SIZE - patch + 1, size=2)
        sl = (slice(top, top + patch), slice(left, left + patch))
        pairs.append((blurred[i][j][sl], pool[i][sl]))
    return pairs


SWEEP_RECT = (24, 24, 16, 16)

FIXTURE_SPEC = """\
# 3 images x 3 kernels x 3 reconstructors x 2 modes x 3 epsilons
images = images/checker.dbim, images/field.dbim, images/glyphs.dbim
kernels = kernels/k11.txt, kernels/k17.txt, kernels/k25.txt
reconstructors = wiener, unrolled, cnn
cnn_weights = cnn.dbnn
epsilons = 4/255, 8/255, 12/255
modes = untargeted, targeted
target = targets/rings.dbim
noise_sigma = 0.01
master_seed = 0
output_dir = out/grid
"""

SWEEP_SPEC = """\
# localized targeted attacks while the kernel size varies
images = images/checker.dbim, images/field.dbim, images/glyphs.dbim
kernels = kernels/k11.txt, kernels/k17.txt, kernels/k25.txt
reconstructors = wiener, unrolled, cnn
cnn_weights = cnn.dbnn
modes = targeted
target_patch = targets/nine.dbim
target_rect = {rect}
noise_sigma = 0.01
master_seed = 0
output_dir = out/sweep
""".format(rect=", ".join(str(v) for v in SWEEP_RECT))


def write_fixtures(directory, cnn_weights=None) -> dict:
    """Write images, kernels, targets, training pairs and spec files.

    ``cnn_weights`` is an optional :class:`~advdeblur.cnn.CnnConfig` saved as
    ``cnn.dbnn``; the spec files refer to that name either way.
    """
    root = Path(directory)
    for sub in ("images", "kernels", "targets", "train/blurry", "train/sharp"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for name, img in source_images().items():
        save_raw(img, root / "images" / f"{name}.dbim")
    for name, k in fixture_kernels().items():
        save_kernel(k, root / "kernels" / f"{name}.txt")
    save_raw(rings(), root / "targets" / "rings.dbim")
    save_raw(nine_patch(), root / "targets" / "nine.dbim")
    for i, (b, s) in enumerate(training_pairs()):
        save_raw(b, root / "train" / "blurry" / f"{i:04d}.dbim")
        save_raw(s, root / "train" / "sharp" / f"{i:04d}.dbim")
    (root / "fixture.spec").write_text(FIXTURE_SPEC, encoding="utf-8")
    (root / "sweep.spec").write_text(SWEEP_SPEC, encoding="utf-8")
    if cnn_weights is not None:
        cnn.save_weights(cnn_weights, root / "cnn.dbnn")
    return {"root": root, "fixture_spec": root / "fixture.spec", "sweep_spec": root / "sweep.spec"}


def load_training_dir(directory) -> list:
    """Pairs ``blurry/<name>.dbim`` with ``sharp/<name>.dbim``."""
    root = Path(directory)
    blurry = sorted((root / "blurry").glob("*.dbim"))
    if not blurry:
        raise FileNotFoundError(f"no blurry/*.dbim files under {root}")
    pairs = []
    for b in blurry:
        s = root / "sharp" / b.name
        if not s.exists():
            raise FileNotFoundError(f"missing sharp counterpart {s}")
        pairs.append((load_raw(b), load_raw(s)))
    return pairs
