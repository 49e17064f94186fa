"""Synthetic scenes with known ground truth, for smoke runs and self-checks."""

from __future__ import annotations

import numpy as np

from urbdiff.dataset import Region


def smooth_texture(height: int, width: int, seed: int = 0, shift=(0.0, 0.0),
                   waves: int = 24, min_wavelength: float = 12.0,
                   max_wavelength: float = 64.0) -> np.ndarray:
    """Sum of random plane waves sampled at (x - dx, y - dy).

    Evaluating the same analytic texture at shifted coordinates gives exact
    ground truth for sub-pixel translations. Values lie in [0, 1].
    """
    rng = np.random.default_rng(seed)
    dx, dy = shift
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    x -= dx
    y -= dy
    img = np.zeros((height, width))
    total = 0.0
    for _ in range(waves):
        wl = rng.uniform(min_wavelength, max_wavelength)
        theta = rng.uniform(0, np.pi)
        k = 2 * np.pi / wl
        amp = rng.uniform(0.5, 1.0)
        total += amp
        img += amp * np.sin(k * (np.cos(theta) * x + np.sin(theta) * y)
                                              + rng.uniform(0, 2 * np.pi))
    # normalise by the amplitude sum, not the sampled range, so shifts stay exact
    return (0.5 + 0.5 * img / total).astype(np.float32)


def fractal_texture(size: int, seed: int = 0, shift=(0.0, 0.0), beta: float = 1.0,
                    contrast: float = 0.25) -> np.ndarray:
    """Periodic 1/f^beta noise image, translated by ``shift`` in the Fourier domain.

    The translation is exact for the periodic image, so shifted copies have
    known sub-pixel ground truth away from the wrap-around border. Values are
    centred on 0.5 with standard deviation ``contrast``.
    """
    rng = np.random.default_rng(seed)
    spectrum = np.fft.fft2(rng.standard_normal((size, size)))
    ky = np.fft.fftfreq(size)[:, None]
    kx = np.fft.fftfreq(size)[None, :]
    k = np.hypot(kx, ky)
    k[0, 0] = 1.0
    spectrum = spectrum / k**beta
    spectrum[0, 0] = 0.0
    base = np.real(np.fft.ifft2(spectrum))
    scale = contrast / base.std()
    dx, dy = shift
    moved = np.real(np.fft.ifft2(spectrum * np.exp(-2j * np.pi * (kx * dx + ky * dy))))
    return (0.5 + scale * moved).astype(np.float32)


def _rectangles(rng, size, n, lo, hi):
    mask = np.zeros((size, size), bool)
    for _ in range(n):
        h, w = rng.integers(lo, hi + 1, size=2)
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        mask[r : r + h, c : c + w] = True
    return mask


def change_task(n_regions: int = 4, size: int = 64, bands: int = 3, seed: int = 0,
                threshold: float = 0.5, step: float = 1.5, noise: float = 0.05,
                rects: int = 4, rect_size=(6, 16), split: str = "train") -> list[Region]:
    """Separable change task: change means |b - a| > threshold on band 0.

    ``a`` is Gaussian noise, ``b`` is ``a`` plus small noise, and inside a few
    random rectangles band 0 of ``b`` is offset by +/- ``step``. Labels are
    computed from the per-pixel band-0 difference, so they are exact.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_regions):
        a = rng.standard_normal((bands, size, size)).astype(np.float32)
        b = a + noise * rng.standard_normal((bands, size, size)).astype(np.float32)
        mask = _rectangles(rng, size, rects, *rect_size)
        sign = rng.choice([-1.0, 1.0])
        b[0][mask] += np.float32(sign * step)
        label = (np.abs(b[0] - a[0]) > threshold).astype(np.uint8)
        out.append(Region(f"synthetic{i:02d}", a, b.astype(np.float32), label, split))
    return out


def identical_task(n_regions: int = 2, size: int = 64, bands: int = 3, seed: int = 0) -> list[Region]:
    """Pairs with b == a and all-zero labels."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_regions):
        a = rng.standard_normal((bands, size, size)).astype(np.float32)
        out.append(Region(f"same{i:02d}", a, a.copy(), np.zeros((size, size), np.uint8)))
    return out
