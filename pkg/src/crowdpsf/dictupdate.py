"""PSF update for fixed coefficient maps: constrained deconvolution by FISTA.

Minimizes over the image-sized, origin-centred kernel ``g``::

    1/2 || b * g - s ||_W^2 + lambda_g/2 (||c0 * g||^2 + ||c1 * g||^2)

subject to ``g`` in ``C``: zero outside a ``P x P`` window, non-negative,
unit l2 norm. ``b`` is the sum of the coefficient maps filtered by their
Lanczos offset filters.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .gridops import as_grid, crop_kernel, embed_kernel, support_mask, diff_filter_spectra
from .sparse import SolverError

log = logging.getLogger(__name__)


def gaussian_kernel(sigma, support):
    """Centred isotropic Gaussian on a ``support x support`` grid, unit l2 norm."""
    if support < 1 or support % 2 == 0:
        raise ValueError("support must be a positive odd integer")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r = np.arange(support) - support // 2
    g1 = np.exp(-0.5 * (r / sigma) ** 2)
    g = np.outer(g1, g1)
    return g / np.linalg.norm(g)


def effective_kernel(coeffs, bank):
    """``b = sum_{m,n} (h_m (x) h_n) * a_{m,n}`` for maps of shape ``(M, M, H, W)``."""
    a = np.asarray(coeffs, dtype=np.float64)
    M = bank.count
    if a.shape[:2] != (M, M):
        raise ValueError(f"expected {M}x{M} coefficient maps, got leading shape {a.shape[:2]}")
    shape = a.shape[-2:]
    hr, hc = bank.spectra(shape)
    Af = sfft.rfft2(a)
    # fold the row offsets first, then the column offsets
    T = np.einsum("mh,mnhw->nhw", hr, Af)
    Bf = np.einsum("nw,nhw->hw", hc, T)
    return sfft.irfft2(Bf, s=shape)


def _masked(x):
    X = sfft.rfft2(x)
    X[..., 0, 0] = 0.0
    return X


def fidelity_gradient(y, b, s):
    """Gradient of ``1/2 ||b * y - s||_W^2`` with respect to ``y``."""
    y = as_grid(y, "y")
    Bf = _masked(as_grid(b, "b"))
    Sf = _masked(as_grid(s, "s"))
    G = np.conj(Bf) * (Bf * sfft.rfft2(y) - Sf)
    return sfft.irfft2(G, s=y.shape)


def smoothness_penalty(y, lambda_g):
    y = np.asarray(y, dtype=np.float64)
    d0 = np.roll(y, -1, axis=0) - y
    d1 = np.roll(y, -1, axis=1) - y
    return 0.5 * lambda_g * float(np.sum(d0 ** 2) + np.sum(d1 ** 2))


def smoothness_gradient(y, lambda_g):
    """Gradient of ``lambda_g/2 (||c0 * y||^2 + ||c1 * y||^2)`` (periodic forward differences)."""
    y = as_grid(y, "y")
    if lambda_g == 0:
        return np.zeros_like(y)
    C0, C1 = diff_filter_spectra(y.shape)
    G = lambda_g * (np.abs(C0) ** 2 + np.abs(C1) ** 2) * sfft.rfft2(y)
    return sfft.irfft2(G, s=y.shape)


def project_full(y, mask, fallback):
    """Projection onto ``C`` on the image-sized grid; returns ``(g, degenerate)``."""
    g = np.where(mask, np.maximum(y, 0.0), 0.0)
    nrm = np.linalg.norm(g)
    if nrm == 0.0 or not np.isfinite(nrm):
        log.warning("PSF projection degenerated to zero; falling back to the initial Gaussian")
        return fallback.copy(), True
    return g / nrm, False


def project_constraint(y, support_size, fallback=None):
    """Crop to the ``P x P`` support, clip negatives and scale to unit norm.

    ``y`` is either an image-sized origin-centred grid or already a
    ``P x P`` centred kernel. Returns the ``P x P`` kernel. If nothing
    survives the clipping, ``fallback`` (default: unit-norm Gaussian of
    width 1 px) is returned.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape == (support_size, support_size):
        k = y
    else:
        if support_size > min(y.shape):
            raise ValueError("support larger than grid")
        k = crop_kernel(y, support_size)
    k = np.maximum(k, 0.0)
    nrm = np.linalg.norm(k)
    if nrm == 0.0:
        log.warning("PSF projection degenerated to zero; falling back to the initial Gaussian")
        return gaussian_kernel(1.0, support_size) if fallback is None else np.array(fallback, dtype=float)
    return k / nrm


@dataclass
class FistaState:
    estimate: np.ndarray        # g iterate, image sized
    momentum_point: np.ndarray  # y iterate
    t: float
    step_scale: float           # 1 / L_g
    iterations: int = 0
    degenerate_steps: int = 0


class DictUpdater:
    """FISTA solver for the PSF sub-problem with warm-startable state.

    The iterate lives on the image grid; the support window is imposed in
    every proximal step.
    """

    def __init__(self, s, init, support, lambda_g, L, backtrack=False, fallback=None):
        self.s = as_grid(s, "s")
        shape = self.s.shape
        if L <= 0:
            raise ValueError("L_g must be positive")
        if lambda_g < 0:
            raise ValueError("lambda_g must be non-negative")
        self.support = int(support)
        self.mask = support_mask(shape, self.support)
        self.lambda_g = float(lambda_g)
        self.backtrack = backtrack
        self.Sf = _masked(self.s)
        C0, C1 = diff_filter_spectra(shape)
        self.Cf = self.lambda_g * (np.abs(C0) ** 2 + np.abs(C1) ** 2)
        init = np.asarray(init, dtype=np.float64)
        g0 = embed_kernel(init, shape) if init.shape != shape else init.copy()
        if fallback is None:
            fallback = g0
        self.fallback = embed_kernel(fallback, shape) if np.shape(fallback) != shape else np.array(fallback)
        self.state = FistaState(g0, g0.copy(), 1.0, 1.0 / float(L))
        self.Bf = np.zeros_like(self.Sf)

    def set_coefficients(self, b=None, spectrum=None):
        if spectrum is None:
            spectrum = _masked(as_grid(b, "b"))
        else:
            spectrum = np.array(spectrum, dtype=np.complex128)
            spectrum[0, 0] = 0.0
        self.Bf = spectrum

    def reset_momentum(self):
        st = self.state
        st.momentum_point = st.estimate.copy()
        st.t = 1.0

    def _f_and_grad(self, y, want_f=True):
        Yf = sfft.rfft2(y)
        R = self.Bf * Yf - self.Sf
        G = np.conj(self.Bf) * R + self.Cf * Yf
        grad = sfft.irfft2(G, s=y.shape)
        if not want_f:
            return None, grad
        return self._f_from_spectra(R, Yf), grad

    def _f_from_spectra(self, R, Yf):
        # Parseval for rfft2: double all bins except those with no mirror
        w = np.full(R.shape[-1], 2.0)
        w[0] = 1.0
        if self.s.shape[1] % 2 == 0:
            w[-1] = 1.0
        n = self.s.size
        fid = 0.5 * np.sum(w * np.abs(R) ** 2) / n
        reg = 0.5 * np.sum(w * self.Cf * np.abs(Yf) ** 2) / n
        return float(fid + reg)

    def smooth_objective(self, g):
        Yf = sfft.rfft2(g)
        return self._f_from_spectra(self.Bf * Yf - self.Sf, Yf)

    def lipschitz_bound(self):
        return float(np.max(np.abs(self.Bf) ** 2 + self.Cf))

    def step(self):
        st = self.state
        y = st.momentum_point
        if self.backtrack:
            fy, grad = self._f_and_grad(y)
            L = 1.0 / st.step_scale
            while True:
                g_new, degen = project_full(y - grad / L, self.mask, self.fallback)
                d = g_new - y
                if self.smooth_objective(g_new) <= fy + np.sum(grad * d) + 0.5 * L * np.sum(d * d) + 1e-12 * abs(fy):
                    break
                L *= 2.0
            st.step_scale = 1.0 / L
        else:
            _, grad = self._f_and_grad(y, want_f=False)
            g_new, degen = project_full(y - st.step_scale * grad, self.mask, self.fallback)
        st.degenerate_steps += int(degen)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * st.t ** 2))
        st.momentum_point = g_new + ((st.t - 1.0) / t_new) * (g_new - st.estimate)
        st.estimate = g_new
        st.t = t_new
        st.iterations += 1
        return st

    def solve(self, iters):
        for _ in range(iters):
            self.step()
        obj = self.smooth_objective(self.state.estimate)
        if not np.isfinite(obj):
            raise SolverError(f"dictionary update objective is not finite after {self.state.iterations} iterations")
        return self.state.estimate

    def kernel(self):
        return crop_kernel(self.state.estimate, self.support)


def dict_update(b, s, params, init, iters):
    """Run ``iters`` FISTA steps from ``init`` and return the ``P x P`` kernel.

    ``params`` supplies ``lambda_g``, ``L_g`` and ``support`` (a
    :class:`~crowdpsf.cdl.CdlParams` or any object with those attributes).
    """
    init = np.asarray(init, dtype=np.float64)
    if iters == 0:
        return init.copy()
    support = init.shape[0] if init.shape[0] == init.shape[1] and init.shape != np.shape(s) else params.support
    up = DictUpdater(s, init, support, params.lambda_g, params.L_g,
                     backtrack=getattr(params, "backtrack", False))
    up.set_coefficients(b)
    up.solve(iters)
    return up.kernel()
