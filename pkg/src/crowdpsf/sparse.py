"""Convolutional sparse coding with an l1 - l2 penalty, solved by ADMM.

Solves, for a fixed dictionary ``{d_k}`` and image ``s``::

    min_a  1/2 || sum_k d_k * a_k - s ||_W^2 + lambda_a sum_k (|a_k|_1 - |a_k|_2)

where ``W`` discards the DC component. The linear step is solved per
frequency bin with the Sherman-Morrison formula (the single-image system
matrix is a rank-one update of ``rho * I``).
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from . import kernels
from .gridops import as_grid, GridError

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when an iterative solver produces a non-finite objective."""


def prox_l1_minus_l2(v, t):
    """Proximal operator of ``t * (||x||_1 - ||x||_2)`` at ``v``.

    Closed form of Lou and Yan (2018) with ``alpha = 1``. When
    ``max|v| <= t`` the minimizer is 1-sparse and keeps the largest
    entry unchanged; ties pick the first such coordinate.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    v = np.asarray(v, dtype=np.float64)
    flat = v.ravel()
    av = np.abs(flat)
    if flat.size == 0:
        return v.copy()
    vmax = av.max()
    if vmax > t:
        z = np.sign(flat) * np.maximum(av - t, 0.0)
        nz = np.linalg.norm(z)
        out = z * ((nz + t) / nz)
    else:
        out = np.zeros_like(flat)
        if vmax > 0:
            i = int(np.argmax(av))
            out[i] = flat[i]
    return out.reshape(v.shape)


def prox_maps(x, t, nonneg=False, l1_only=False):
    """Apply the l1 - l2 prox independently to each map along the leading axes.

    ``x`` has shape ``(..., H, W)``; the l2 norm is taken over each
    ``H x W`` map. ``nonneg`` adds the indicator of the non-negative
    orthant (the prox of the sum is the prox of the clipped input).
    """
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    a = x.reshape(-1, shape[-2] * shape[-1])
    if nonneg:
        a = np.maximum(a, 0.0)
    mag = np.abs(a)
    shrunk = np.maximum(mag - t, 0.0)
    out = np.sign(a) * shrunk
    if l1_only:
        return out.reshape(shape)
    vmax = mag.max(axis=1)
    norms = np.sqrt(np.einsum("ij,ij->i", shrunk, shrunk))
    big = vmax > t
    scale = np.ones_like(norms)
    scale[big] = (norms[big] + t) / norms[big]
    out *= scale[:, None]
    small = np.flatnonzero(~big & (vmax > 0))
    if small.size:
        idx = np.argmax(mag[small], axis=1)
        out[small, idx] = a[small, idx]
    return out.reshape(shape)


def l1_minus_l2(x):
    """Sum over maps of ``||x_k||_1 - ||x_k||_2``."""
    x = np.asarray(x)
    a = x.reshape(-1, x.shape[-2] * x.shape[-1])
    return float(np.sum(np.abs(a)) - np.sum(np.linalg.norm(a, axis=1)))


def solve_xstep(Df, Sf, rho, Zf):
    """Per-bin solution of ``(D^H D + rho I) x = D^H s + rho z``.

    ``Df`` has shape ``(Nk, ...)`` (one spectrum per filter), ``Sf`` the
    spectrum of ``s`` and ``Zf`` the spectra of ``u - v``. Any DC masking
    must already be applied to ``Df`` and ``Sf``.
    """
    if not rho > 0:
        raise ValueError("ADMM penalty rho must be positive")
    b = np.conj(Df) * Sf[None] + rho * Zf
    c = np.sum(Df * b, axis=0) / (rho + np.sum(np.abs(Df) ** 2, axis=0))
    return (b - np.conj(Df) * c[None]) / rho


@dataclass
class AdmmState:
    primary: np.ndarray      # a
    auxiliary: np.ndarray    # u
    dual: np.ndarray         # v (scaled dual)
    rho: float
    primal_residual: float = np.inf
    dual_residual: float = np.inf
    iterations: int = 0

    @classmethod
    def zeros(cls, shape, rho):
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape), float(rho))


def csc_x_step(state, dict_spectra, s_spectrum):
    """Exact minimizer of the ADMM quadratic sub-problem, returned as spatial maps.

    ``dict_spectra`` and ``s_spectrum`` are rfft2 spectra with the DC bin
    already zeroed; the maps have the leading shape of ``dict_spectra``.
    """
    hw = state.auxiliary.shape[-2:]
    lead = state.auxiliary.shape[:-2]
    z = (state.auxiliary - state.dual).reshape((-1,) + hw)
    Df = np.asarray(dict_spectra).reshape((z.shape[0],) + s_spectrum.shape)
    Xf = solve_xstep(Df, s_spectrum, state.rho, sfft.rfft2(z))
    return sfft.irfft2(Xf, s=hw).reshape(lead + hw)


def masked_spectrum(x):
    X = sfft.rfft2(x)
    X[..., 0, 0] = 0.0
    return X


class ConvSparseCoder:
    """Stateful ADMM solver; keeps ``(u, v)`` between calls for warm starts.

    Parameters
    ----------
    s : array (H, W)
        Observed image.
    dict_filters : array (..., H, W)
        Image-sized dictionary filters, origin-centred.
    lambda_a, rho : float
        Penalty weight and ADMM penalty parameter.
    nonneg : bool
        Constrain the coefficients to be non-negative.
    l1_only : bool
        Debug switch replacing the l1 - l2 penalty by plain l1.
    """

    def __init__(self, s, dict_filters, lambda_a, rho, nonneg=False, l1_only=False):
        self.s = as_grid(s, "s")
        if lambda_a <= 0:
            raise ValueError("lambda_a must be positive")
        if rho <= 0:
            raise ValueError("ADMM penalty rho must be positive")
        self.lambda_a = float(lambda_a)
        self.nonneg = nonneg
        self.l1_only = l1_only
        self.Sf = masked_spectrum(self.s)
        d = np.asarray(dict_filters, dtype=np.float64)
        self.lead = d.shape[:-2]
        self.set_dictionary(d)
        self.state = AdmmState.zeros(self.lead + self.s.shape, rho)
        self.reset()

    @property
    def shape(self):
        return self.state.auxiliary.shape

    def set_dictionary(self, dict_filters=None, spectra=None):
        """Replace the dictionary, keeping the ADMM state."""
        if spectra is None:
            d = np.asarray(dict_filters, dtype=np.float64)
            if d.shape[-2:] != self.s.shape:
                raise GridError(f"dictionary filters {d.shape[-2:]} do not match image {self.s.shape}")
            spectra = masked_spectrum(d.reshape((-1,) + self.s.shape))
        else:
            spectra = np.array(spectra, dtype=np.complex128).reshape((-1,) + self.Sf.shape)
            spectra[:, 0, 0] = 0.0
        self.Df = spectra

    def reset(self):
        self.state = AdmmState.zeros(self.shape, self.state.rho)
        self.Uf = np.zeros((self.Df.shape[0],) + self.Sf.shape, dtype=np.complex128)
        self.Vf = np.zeros_like(self.Uf)

    def step(self):
        """One ADMM iteration: linear solve, prox, dual update."""
        st = self.state
        hw = self.s.shape
        nk = self.Df.shape[0]
        Xf = kernels.admm_xstep(self.Df, self.Sf, st.rho, self.Uf, self.Vf)
        x = sfft.irfft2(Xf, s=hw).reshape(nk, -1)
        u, v, sq = kernels.admm_prox_dual(x, st.dual.reshape(nk, -1), st.auxiliary.reshape(nk, -1),
                                          self.lambda_a / st.rho, self.nonneg, self.l1_only)
        Uf = sfft.rfft2(u.reshape((nk,) + hw))
        self.Vf += Xf - Uf
        self.Uf = Uf
        st.primary = x.reshape(self.shape)
        st.auxiliary = u.reshape(self.shape)
        st.dual = v.reshape(self.shape)
        st.iterations += 1
        if not np.all(np.isfinite(sq)):
            raise SolverError(f"sparse coding diverged at iteration {st.iterations}")
        nx, nu, rp, du, nv = np.sqrt(sq)
        st.primal_residual = rp / max(nx, nu, 1e-300)
        st.dual_residual = du / max(nv, 1e-300)
        return st

    @property
    def coefficient_spectra(self):
        """rfft2 spectra of the current auxiliary maps, shape ``(Nk, H, W//2+1)``."""
        return self.Uf

    def reconstruct(self, maps=None):
        a = self.state.auxiliary if maps is None else maps
        Af = sfft.rfft2(np.asarray(a).reshape((-1,) + self.s.shape))
        return sfft.irfft2(np.sum(self.Df * Af, axis=0), s=self.s.shape)

    def objective(self, maps=None):
        a = self.state.auxiliary if maps is None else maps
        r = self.reconstruct(a) - self.s
        fid = 0.5 * float(np.sum((r - r.mean()) ** 2))
        return fid + self.lambda_a * l1_minus_l2(a)

    def solve(self, max_iter, tol=0.0, check_objective=True):
        for _ in range(max_iter):
            st = self.step()
            if st.primal_residual <= tol and st.dual_residual <= tol:
                break
        if check_objective and not np.isfinite(self.objective()):
            raise SolverError(f"sparse coding objective is not finite after {self.state.iterations} iterations")
        return self.state.auxiliary


def csc_solve(s, dict_filters, lambda_a, rho_a, max_iter, tol=1e-4, nonneg=False, l1_only=False):
    """Cold-start convolutional sparse coding; returns the auxiliary (u) maps."""
    coder = ConvSparseCoder(s, dict_filters, lambda_a, rho_a, nonneg=nonneg, l1_only=l1_only)
    return coder.solve(max_iter, tol)
