"""Shared numeric utilities: seeded RNG streams, finite-difference oracles,
and the Gaussian kernel used for gradient smoothing.

All array data is 64-bit float, and images are row-major ``(H, W, C)``
arrays on the 0-255 pixel scale unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ImageShape",
    "make_rng",
    "finite_diff_gradient",
    "finite_diff_hessian",
    "gaussian_kernel_2d",
]


@dataclass(frozen=True)
class ImageShape:
    """Height / width / channel layout of an image tensor."""

    height: int
    width: int
    channels: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError(f"all image dimensions must be >= 1, got {self}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; identical (seed, stream) pairs reproduce the
    same draw sequence regardless of what other streams are doing.

    Derive one stream per parallel task instead of sharing a generator.
    """
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


def _check_finite(value, where: str):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite function value at {where}")
    return value


def finite_diff_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector.

    This is the independent oracle for every analytic gradient in the
    package; it must not share code with the paths it checks.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        xp = xf.copy()
        xm = xf.copy()
        xp[i] += h
        xm[i] -= h
        fp = _check_finite(f(xp.reshape(x.shape)), f"x + h*e_{i}")
        fm = _check_finite(f(xm.reshape(x.shape)), f"x - h*e_{i}")
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_hessian(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Symmetrized central second-difference Hessian estimate."""
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    hess = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            xpp = x.copy(); xpp[i] += h; xpp[j] += h
            xpm = x.copy(); xpm[i] += h; xpm[j] -= h
            xmp = x.copy(); xmp[i] -= h; xmp[j] += h
            xmm = x.copy(); xmm[i] -= h; xmm[j] -= h
            vals = [_check_finite(f(p), "hessian probe") for p in (xpp, xpm, xmp, xmm)]
            hess[i, j] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * h * h)
    return 0.5 * (hess + hess.T)


def gaussian_kernel_2d(k: int, sigma: float) -> np.ndarray:
    """k-by-k Gaussian kernel, centered, normalized to sum exactly 1."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    half = k // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    ii, jj = np.meshgrid(coords, coords, indexing="ij")
    kernel = np.exp(-(ii**2 + jj**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()
