"""Lanczos filter bank for sub-pixel shifted copies of a sampled PSF.

Filter ``m`` holds the Lanczos kernel sampled at ``j + delta_m`` for
``j = -K .. K``, so convolving a centred kernel ``g`` with it gives
``g`` resampled at ``n + delta_m``, i.e. the PSF of a source displaced by
``-delta_m`` pixels.
"""

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft


def lanczos_kernel(x, K):
    """Lanczos window of order ``K``: ``sinc(x) sinc(x/K)`` on ``(-K, K)``, zero elsewhere."""
    if K < 1:
        raise ValueError("Lanczos order must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    out = np.sinc(x) * np.sinc(x / K)
    out = np.where(np.abs(x) < K, out, 0.0)
    return out if out.ndim else float(out)


def offset_grid(M):
    """The ``M`` fractional offsets ``n / M`` with ``-floor((M-1)/2) <= n <= floor(M/2)``."""
    if M < 1:
        raise ValueError("number of offsets must be >= 1")
    n = np.arange(-((M - 1) // 2), M // 2 + 1)
    return n / M


@dataclass(frozen=True)
class OffsetFilterBank:
    order: int
    count: int
    offsets: np.ndarray
    taps: np.ndarray  # (count, 2 * order + 1)

    @property
    def zero_index(self):
        return (self.count - 1) // 2

    @property
    def pad(self):
        return self.order

    def spectra(self, shape):
        """Row-axis fft and column-axis rfft responses of the embedded filters.

        Returns ``(hr, hc)`` with shapes ``(M, shape[0])`` and
        ``(M, shape[1] // 2 + 1)``; the 2D response of filter pair
        ``(m, n)`` is ``hr[m][:, None] * hc[n][None, :]``.
        """
        K = self.order
        rows = np.zeros((self.count, shape[0]))
        cols = np.zeros((self.count, shape[1]))
        idx_r = np.arange(-K, K + 1) % shape[0]
        idx_c = np.arange(-K, K + 1) % shape[1]
        # np.add.at handles filters longer than the grid (wrap-around)
        for m in range(self.count):
            np.add.at(rows[m], idx_r, self.taps[m])
            np.add.at(cols[m], idx_c, self.taps[m])
        return sfft.fft(rows, axis=1), sfft.rfft(cols, axis=1)


def build_filter_bank(M, K):
    if K < 1:
        raise ValueError("Lanczos order must be >= 1")
    offsets = offset_grid(M)
    j = np.arange(-K, K + 1)
    taps = lanczos_kernel(j[None, :] + offsets[:, None], K)
    # exact impulse for the zero offset (sinc(n) is only ~1e-17 at integers)
    taps[(M - 1) // 2] = (j == 0).astype(np.float64)
    return OffsetFilterBank(order=int(K), count=int(M), offsets=offsets,
                            taps=np.ascontiguousarray(taps))


def filter_along(x, taps, axis):
    """Full linear convolution of ``x`` with ``taps`` along one axis."""
    return np.apply_along_axis(np.convolve, axis, np.asarray(x, dtype=np.float64), taps)


def shift_kernel(g, bank, m, n):
    """``(h_m (x) h_n) * g`` on the grown ``(P + 2K)`` support."""
    rows = filter_along(g, bank.taps[m], 0)
    return filter_along(rows, bank.taps[n], 1)


def shift_dictionary(g, bank):
    """All ``M**2`` shifted copies of ``g``, shape ``(M, M, P + 2K, Q + 2K)``.

    Axis 0 indexes the row offset, axis 1 the column offset.
    """
    g = np.asarray(g, dtype=np.float64)
    M = bank.count
    rows = np.stack([filter_along(g, bank.taps[m], 0) for m in range(M)])
    out = np.empty((M, M, g.shape[0] + 2 * bank.order, g.shape[1] + 2 * bank.order))
    for m in range(M):
        for n in range(M):
            out[m, n] = filter_along(rows[m], bank.taps[n], 1)
    return out


def shift_same(x, taps, axis):
    """Apply one bank filter along ``axis`` keeping the input size (zero boundary)."""
    K = (len(taps) - 1) // 2
    full = filter_along(x, taps, axis)
    sl = [slice(None)] * full.ndim
    sl[axis] = slice(K, K + np.shape(x)[axis])
    return full[tuple(sl)]
