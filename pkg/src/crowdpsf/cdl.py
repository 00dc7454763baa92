"""Alternating minimization driver and the per-density parameter rules."""

import logging
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import scipy.fft as sfft

from .dictupdate import DictUpdater, gaussian_kernel
from .gridops import as_grid, embed_kernel, crop_kernel, GridError
from .lanczos import build_filter_bank
from .sparse import ConvSparseCoder, SolverError, l1_minus_l2

log = logging.getLogger(__name__)

# columns of the per-density parameter table; image_scale is our own
# addition (the intensity normalization is otherwise unspecified)
_DENSITY_TABLE = {
    1: dict(lambda_a=0.01, lambda_g=0.01, rho_a=1.0, L_g=50.0, image_scale=50.0),
    10: dict(lambda_a=0.01, lambda_g=0.1, rho_a=1.0, L_g=100.0, image_scale=60.0),
    25: dict(lambda_a=0.01, lambda_g=0.1, rho_a=1.0, L_g=100.0, image_scale=50.0),
    50: dict(lambda_a=0.01, lambda_g=0.1, rho_a=1.0, L_g=500.0, image_scale=40.0),
    100: dict(lambda_a=0.1, lambda_g=0.1, rho_a=10.0, L_g=1000.0, image_scale=25.0),
}
_SHAPE_TABLE = {
    "narrow": dict(K=5, sigma0=0.5),
    "wide": dict(K=10, sigma0=1.0),
    "elong": dict(K=10, sigma0=0.5),
    "complex": dict(K=5, sigma0=1.0),
}


@dataclass
class CdlParams:
    """Model and optimization parameters.

    ``csc_inner`` and ``dict_inner`` are the ADMM / FISTA iterations run
    per outer iteration. ``image_scale`` fixes the intensity
    normalization: the mean-subtracted image is divided by
    ``image_scale * rms`` where ``rms`` is its root-mean-square value.
    """
    M: int = 5
    K: int = 5
    lambda_a: float = 0.01
    lambda_g: float = 0.1
    rho_a: float = 1.0
    L_g: float = 100.0
    sigma0: float = 0.5
    n_iter0: int = 10
    n_iter: int = 100
    support: int = 11
    coeff_nonneg: bool = False
    csc_inner: int = 1
    dict_inner: int = 1
    cold_start: bool = False
    backtrack: bool = False
    l1_only: bool = False
    image_scale: float = 50.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        ints = dict(M=self.M, K=self.K, n_iter=self.n_iter, support=self.support,
                    csc_inner=self.csc_inner, dict_inner=self.dict_inner)
        for name, v in ints.items():
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if int(self.n_iter0) != self.n_iter0 or self.n_iter0 < 0:
            raise ValueError(f"n_iter0 must be a non-negative integer, got {self.n_iter0!r}")
        if self.support % 2 == 0:
            raise ValueError("support must be odd")
        for name in ("lambda_a", "rho_a", "L_g", "sigma0", "image_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.lambda_g >= 0:
            raise ValueError("lambda_g must be non-negative")

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)


def nearest_density(density):
    if not density > 0:
        raise ValueError(f"density must be positive, got {density!r}")
    return min(_DENSITY_TABLE, key=lambda d: (abs(d - density), d))


def params_for(shape, density, **overrides):
    """Parameter rule: ``K`` and ``sigma0`` by PSF shape, the rest by star density.

    Densities between the tabulated values use the nearest column.
    """
    if shape not in _SHAPE_TABLE:
        raise ValueError(f"unknown PSF shape {shape!r}; expected one of {tuple(_SHAPE_TABLE)}")
    p = dict(M=5, n_iter0=10, n_iter=100)
    p.update(_SHAPE_TABLE[shape])
    p.update(_DENSITY_TABLE[nearest_density(density)])
    p.update(overrides)
    return CdlParams(**p)


def init_psf(sigma0, support):
    if support < 3:
        raise ValueError("support must be >= 3")
    return gaussian_kernel(sigma0, support)


def normalize_image(s, image_scale=1.0):
    """Remove the mean and divide by ``image_scale`` times the remaining rms.

    Both steps commute with the DC-masked fidelity, so adding a constant
    to ``s`` leaves the normalized image unchanged.
    """
    s = as_grid(s, "s")
    z = s - s.mean()
    rms = float(np.sqrt(np.mean(z * z)))
    if rms == 0.0:
        return z, 1.0
    scale = image_scale * rms
    return z / scale, scale


@dataclass
class EstimationResult:
    psf: np.ndarray
    coeffs: np.ndarray
    objective_trace: list
    timings: dict
    params: CdlParams
    constraint_ok: bool = True
    info: dict = field(default_factory=dict)


def dictionary_filters(g, bank, shape):
    """Image-sized shifted copies of the kernel ``g``: array ``(M, M, H, W)``.

    Each copy is formed by small-support separable convolution and then
    embedded, origin-centred, in the image grid.
    """
    P = g.shape[0]
    K = bank.order
    M = bank.count
    if P + 2 * K > min(shape):
        raise GridError(f"image {shape} too small for support {P} with Lanczos order {K}")
    # convolution matrices T[m] of shape (P + 2K, P)
    T = np.zeros((M, P + 2 * K, P))
    for j in range(P):
        T[:, j:j + 2 * K + 1, j] = bank.taps
    out = np.empty((M, M) + tuple(shape))
    for m in range(M):
        rows = T[m] @ g
        for n in range(M):
            out[m, n] = embed_kernel(rows @ T[n].T, shape)
    return out


def dictionary_spectra(g, spectra, shape):
    """rfft2 spectra of :func:`dictionary_filters` computed as ``H_m H_n G``.

    ``spectra`` is the ``(hr, hc)`` pair from
    :meth:`~crowdpsf.lanczos.OffsetFilterBank.spectra`. Identical to
    transforming the spatial filters whenever the grown support fits in
    the image, at the cost of one FFT instead of ``M**2``.
    """
    hr, hc = spectra
    G = sfft.rfft2(embed_kernel(g, shape))
    return hr[:, None, :, None] * hc[None, :, None, :] * G


def effective_spectrum(coeff_spectra, spectra):
    """Spectrum of ``b`` from the rfft2 spectra of the coefficient maps."""
    hr, hc = spectra
    M = hr.shape[0]
    A = coeff_spectra.reshape((M, M) + coeff_spectra.shape[-2:])
    T = np.einsum("mh,mnhw->nhw", hr, A)
    return np.einsum("nw,nhw->hw", hc, T)


def run_cdl(s, params, progress=None):
    """Estimate the PSF of image ``s``.

    Three phases: ``n_iter0`` sparse-coding iterations with the initial
    Gaussian dictionary, ``n_iter0`` PSF-update iterations with the
    resulting coefficients, then ``n_iter`` alternating iterations. The
    objective is recorded after every outer iteration of the last phase.
    """
    params.validate()
    s = as_grid(s, "s")
    if min(s.shape) <= params.support:
        raise GridError(f"image {s.shape} must be larger than the PSF support {params.support}")
    timings = {"setup": 0.0, "warmup_csc": 0.0, "warmup_dict": 0.0, "main": 0.0}
    t0 = time.perf_counter()
    sn, scale = normalize_image(s, params.image_scale)
    shape = sn.shape
    bank = build_filter_bank(params.M, params.K)
    if params.support + 2 * params.K > min(shape):
        raise GridError(f"image {shape} too small for support {params.support} with Lanczos order {params.K}")
    hspec = bank.spectra(shape)
    g0 = init_psf(params.sigma0, params.support)
    g = g0

    coder = ConvSparseCoder(sn, dictionary_filters(g, bank, shape), params.lambda_a,
                            params.rho_a, nonneg=params.coeff_nonneg, l1_only=params.l1_only)
    coder.set_dictionary(spectra=dictionary_spectra(g, hspec, shape))
    updater = DictUpdater(sn, g0, params.support, params.lambda_g, params.L_g,
                          backtrack=params.backtrack, fallback=g0)
    timings["setup"] = time.perf_counter() - t0

    def objective(u, g_full):
        Yf = sfft.rfft2(g_full)
        R = updater.Bf * Yf - updater.Sf
        smooth = updater._f_from_spectra(R, Yf)
        pen = l1_minus_l2(u) if not params.l1_only else float(np.abs(u).sum())
        return smooth + params.lambda_a * pen

    t0 = time.perf_counter()
    for _ in range(params.n_iter0):
        coder.solve(params.csc_inner, check_objective=False)
    timings["warmup_csc"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    updater.set_coefficients(spectrum=effective_spectrum(coder.coefficient_spectra, hspec))
    for _ in range(params.n_iter0):
        updater.solve(params.dict_inner)
    g = updater.kernel()
    timings["warmup_dict"] = time.perf_counter() - t0

    trace = []
    t0 = time.perf_counter()
    for it in range(params.n_iter):
        coder.set_dictionary(spectra=dictionary_spectra(g, hspec, shape))
        if params.cold_start:
            coder.reset()
        u = coder.solve(params.csc_inner, check_objective=False)
        updater.set_coefficients(spectrum=effective_spectrum(coder.coefficient_spectra, hspec))
        if params.cold_start:
            updater.reset_momentum()
        updater.solve(params.dict_inner)
        g = updater.kernel()
        obj = objective(u, updater.state.estimate)
        if not np.isfinite(obj):
            raise SolverError(f"CDL objective is not finite at outer iteration {it}")
        trace.append(obj)
        if progress is not None:
            progress(it, obj)
    timings["main"] = time.perf_counter() - t0

    ok = bool(np.all(g >= 0) and abs(np.linalg.norm(g) - 1.0) < 1e-10)
    info = dict(image_scale=scale, degenerate_steps=updater.state.degenerate_steps,
                primal_residual=coder.state.primal_residual,
                dual_residual=coder.state.dual_residual)
    return EstimationResult(psf=g, coeffs=coder.state.auxiliary, objective_trace=trace,
                            timings=timings, params=params, constraint_ok=ok, info=info)
