"""Shift- and scale-invariant SNR of a sampled PSF against a continuous reference."""

import math
from dataclasses import dataclass

import numpy as np

SNR_CAP = 100.0


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricResult:
    snr_db: float
    best_offset: tuple   # (row, col) in units of 1 / N_R pixel
    scale: float
    correlation: float
    n_r: int = 50


def _lattice(size):
    return np.arange(size) - size // 2


def sample_reference(ref, size, offset_rc=(0.0, 0.0)):
    """Reference sampled on the centred ``size x size`` lattice shifted by ``(row, col)``."""
    r = _lattice(size)
    yy, xx = np.meshgrid(r + offset_rc[0], r + offset_rc[1], indexing="ij")
    return ref.effective(xx, yy)


def _ncc(h, g):
    nh = np.linalg.norm(h)
    ng = np.linalg.norm(g)
    if nh == 0:
        raise MetricError("estimate has zero norm")
    if ng == 0:
        raise MetricError("sampled reference has zero norm")
    return float(np.sum(h * g) / (nh * ng))


def correlation(ref, h, offset, n_r):
    """Normalized correlation of ``h`` with the reference sampled at ``lattice + offset / n_r``."""
    h = np.asarray(h, dtype=np.float64)
    g = sample_reference(ref, h.shape[0], (offset[0] / n_r, offset[1] / n_r))
    return _ncc(h, g)


def snr_db(h, g):
    """SNR of ``h`` against ``a g`` with ``a = h.h / g.h``, capped at 100 dB."""
    h = np.asarray(h, dtype=np.float64)
    hh = float(np.sum(h * h))
    gh = float(np.sum(g * h))
    if hh == 0:
        raise MetricError("estimate has zero norm")
    if gh == 0:
        return -math.inf, 0.0
    a = hh / gh
    res = float(np.sum((h - a * g) ** 2))
    if res <= hh * 10 ** (-SNR_CAP / 10):
        return SNR_CAP, a
    return min(SNR_CAP, 10.0 * math.log10(hh / res)), a


def coarse_alignment(ref, h, search=None):
    """Integer ``(row, col)`` shift maximizing the correlation."""
    h = np.asarray(h, dtype=np.float64)
    P = h.shape[0]
    S = P // 2 if search is None else search
    big = sample_reference(ref, P + 2 * S)
    best, arg = -np.inf, (0, 0)
    for dr in range(-S, S + 1):
        for dc in range(-S, S + 1):
            g = big[S + dr:S + dr + P, S + dc:S + dc + P]
            ng = np.linalg.norm(g)
            if ng == 0:
                continue
            c = np.sum(h * g) / ng
            if c > best:
                best, arg = c, (dr, dc)
    return arg


def offset_correlations(ref, h, n_r, center=(0, 0)):
    """Correlation at every fine offset ``center * n_r + (i, j)``, ``|i|, |j| <= n_r // 2``.

    Returns ``(offsets, corr)`` with ``offsets`` the 1D list of fine
    offsets per axis (relative to ``center``) and ``corr`` a 2D array.
    """
    h = np.asarray(h, dtype=np.float64)
    P = h.shape[0]
    half = n_r // 2
    offs = np.arange(-half, half + 1)
    # one fine grid serves all offsets: point (i, n) sits at index i * n_r + n
    fine = (np.arange(-(P // 2) * n_r - half, (P // 2) * n_r + half + 1)) / n_r
    yy, xx = np.meshgrid(fine + center[0], fine + center[1], indexing="ij")
    G = ref.effective(xx, yy)
    nh = np.linalg.norm(h)
    if nh == 0:
        raise MetricError("estimate has zero norm")
    corr = np.empty((offs.size, offs.size))
    for a, nr in enumerate(offs):
        rows = G[nr + half::n_r][:P]
        for b, nc in enumerate(offs):
            g = rows[:, nc + half::n_r][:, :P]
            ng = np.linalg.norm(g)
            corr[a, b] = np.sum(h * g) / (nh * ng) if ng > 0 else -np.inf
    return offs, corr, G


def evaluate(ref, h, n_r=50, center=None):
    """Best-offset SNR of the sampled PSF ``h`` against reference ``ref``.

    The offset search first finds the best integer alignment, then scans
    ``(n_r + 1)^2`` sub-pixel offsets within half a pixel of it, moving
    the scan window one pixel whenever the best offset lies on its edge.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1] or h.shape[0] % 2 == 0:
        raise MetricError("estimate must be a square odd-sized kernel")
    if not np.linalg.norm(h) > 0:
        raise MetricError("estimate has zero norm")
    if center is None:
        center = coarse_alignment(ref, h)
    seen = set()
    while True:
        # the integer alignment can pick a neighbour of the true pixel (it
        # compares unshifted samples); re-centre while the optimum sits on
        # the window edge
        seen.add(tuple(center))
        offs, corr, _ = offset_correlations(ref, h, n_r, center)
        a, b = np.unravel_index(np.argmax(corr), corr.shape)
        step = (int(a == offs.size - 1) - int(a == 0), int(b == offs.size - 1) - int(b == 0))
        nxt = (center[0] + step[0], center[1] + step[1])
        if step == (0, 0) or nxt in seen or max(abs(nxt[0]), abs(nxt[1])) > h.shape[0]:
            break
        center = nxt
    best = (int(center[0] * n_r + offs[a]), int(center[1] * n_r + offs[b]))
    g = sample_reference(ref, h.shape[0], (best[0] / n_r, best[1] / n_r))
    snr, scale = snr_db(h, g)
    return MetricResult(snr_db=snr, best_offset=best, scale=scale,
                        correlation=float(corr[a, b]), n_r=n_r)


def aligned_reference(ref, h, result):
    """Reference samples at the metric's best offset, scaled by the fitted ``a``."""
    n_r = result.n_r
    g = sample_reference(ref, np.shape(h)[0], (result.best_offset[0] / n_r, result.best_offset[1] / n_r))
    return result.scale * g
