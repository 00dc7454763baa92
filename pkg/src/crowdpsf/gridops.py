"""Periodic grid arithmetic shared by the solvers.

Images are plain 2D float64 arrays and spectra are 2D complex arrays.
The DFT convention is fixed package-wide: unnormalized forward transform,
``1/N`` on the inverse (numpy's default ``norm="backward"``). All
convolutions are circular.

Small kernels are stored centred on their middle sample (``P // 2``);
when embedded in an image-sized grid the centre goes to index ``(0, 0)``
and the rest wraps around, so convolving with an embedded kernel does
not translate the image.
"""

import numpy as np
import scipy.fft as sfft


class GridError(ValueError):
    """Raised for malformed or mismatched grids."""


def as_grid(x, name="grid"):
    """Return ``x`` as a finite 2D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise GridError(f"{name} must be a non-empty 2D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GridError(f"{name} contains non-finite samples")
    return a


def forward_dft(x):
    return sfft.fft2(as_grid(x, "x"))


def inverse_dft(spec):
    return sfft.ifft2(spec).real


def circular_convolve(x, k):
    x = as_grid(x, "x")
    k = as_grid(k, "k")
    if x.shape != k.shape:
        raise GridError(f"shape mismatch: {x.shape} vs {k.shape}")
    return sfft.irfft2(sfft.rfft2(x) * sfft.rfft2(k), s=x.shape)


def zero_dc(spec):
    """Copy of ``spec`` with the zero-frequency bin set to zero."""
    out = np.array(spec, dtype=np.complex128, copy=True)
    out[(0,) * out.ndim] = 0.0
    return out


def weighted_fidelity(residual):
    """Half the squared norm of ``residual`` with its DC component removed.

    Computed in the frequency domain (Parseval with the unnormalized
    forward transform), which equals ``0.5 * ||r - mean(r)||^2``.
    """
    r = as_grid(residual, "residual")
    R = zero_dc(sfft.fft2(r))
    return 0.5 * float(np.sum(np.abs(R) ** 2)) / r.size


def embed_kernel(kernel, shape):
    """Zero-pad a centred odd-sized kernel to ``shape`` with its centre at the origin."""
    k = np.asarray(kernel, dtype=np.float64)
    kr, kc = k.shape
    if kr > shape[0] or kc > shape[1]:
        raise GridError(f"kernel {k.shape} does not fit in grid {shape}")
    out = np.zeros(shape, dtype=np.float64)
    out[:kr, :kc] = k
    return np.roll(out, (-(kr // 2), -(kc // 2)), axis=(0, 1))


def crop_kernel(grid, size):
    """Inverse of :func:`embed_kernel` for a ``size x size`` window."""
    g = np.asarray(grid)
    h = size // 2
    return np.roll(g, (h, h), axis=(0, 1))[:size, :size].copy()


def support_mask(shape, size):
    """Boolean image-sized mask of the origin-centred ``size x size`` window."""
    return embed_kernel(np.ones((size, size)), shape) > 0.5


def diff_filter_spectra(shape):
    """rfft2 spectra of the periodic forward-difference filters along rows and columns.

    The row filter computes ``y[i+1, j] - y[i, j]``; the column filter
    ``y[i, j+1] - y[i, j]``.
    """
    c0 = np.zeros(shape)
    c0[0, 0] = -1.0
    c0[-1, 0] = 1.0
    c1 = np.zeros(shape)
    c1[0, 0] = -1.0
    c1[0, -1] = 1.0
    return sfft.rfft2(c0), sfft.rfft2(c1)
