"""Synthetic crowded star fields with analytic pseudo-Gaussian PSFs.

Stars are dropped uniformly at random sub-pixel positions, each rendered
by averaging the analytic profile over an oversampled lattice inside
every pixel, on top of a flat sky background, followed by Poisson
counting noise and clipping to the 16-bit range.

Coordinates: ``x`` is the column and ``y`` the row; pixel ``(i, j)`` is
centred at ``(x, y) = (j, i)``.
"""

import math
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from . import kernels

SHAPES = ("narrow", "wide", "elong", "complex")
DENSITIES = (1, 10, 25, 50, 100)
ADC_MAX = 65535.0


def pseudo_gaussian(z):
    """DoPHOT-style profile ``1 / (1 + z + z^2/2 + z^3/6)``; ``z = r^2 / (2 sigma^2)``."""
    return kernels.pseudo_gaussian_np(z)


@lru_cache(maxsize=None)
def pseudo_gaussian_level(level):
    """The ``z`` at which the pseudo-Gaussian falls to ``level`` of its peak."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    return brentq(lambda z: pseudo_gaussian(z) - level, 0.0, 10.0 / level ** (1 / 3) + 10.0,
                  xtol=1e-15, rtol=4 * np.finfo(float).eps)


def sigma_from_fwhm(fwhm):
    """Width parameter giving the requested FWHM for the pseudo-Gaussian."""
    return 0.5 * fwhm / math.sqrt(2.0 * pseudo_gaussian_level(0.5))


@dataclass(frozen=True)
class Component:
    amplitude: float
    center_offset: tuple
    sigma_major: float
    sigma_minor: float
    angle: float = 0.0

    def quadratic_form(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        a = 0.5 / self.sigma_major ** 2
        b = 0.5 / self.sigma_minor ** 2
        return a * c * c + b * s * s, 2.0 * c * s * (a - b), a * s * s + b * c * c


@dataclass(frozen=True)
class ReferencePsf:
    """Continuous ground-truth PSF built from pseudo-Gaussian components.

    :meth:`evaluate` is the optical profile; :meth:`effective` the same
    profile integrated over a unit pixel, which is what a simulated tile
    contains and therefore what the estimator recovers.
    """
    shape: str
    components: tuple
    oversample: int = 8

    @property
    def comps(self):
        rows = []
        for c in self.components:
            rows.append((c.amplitude, c.center_offset[0], c.center_offset[1]) + c.quadratic_form())
        return np.array(rows, dtype=np.float64)

    def evaluate(self, x, y):
        return kernels.profile_np(np.asarray(x, dtype=float), np.asarray(y, dtype=float), self.comps)

    def effective(self, x, y, oversample=None):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        vals = kernels.box_profile_points(x.ravel(), y.ravel(), self.comps,
                                          oversample or self.oversample)
        return vals.reshape(x.shape)

    def extent(self, level=1e-4):
        """Radius (px) beyond which every component is below ``level`` of its peak."""
        zr = math.sqrt(2.0 * pseudo_gaussian_level(level))
        return max(zr * c.sigma_major + math.hypot(*c.center_offset) for c in self.components)

    def sampled(self, size, offset=(0.0, 0.0), effective=True):
        """``size x size`` centred samples at lattice points shifted by ``offset = (dx, dy)``."""
        r = np.arange(size) - size // 2
        yy, xx = np.meshgrid(r + offset[1], r + offset[0], indexing="ij")
        return self.effective(xx, yy) if effective else self.evaluate(xx, yy)


def make_reference_psf(shape, oversample=8):
    s2 = sigma_from_fwhm(2.0)
    s4 = sigma_from_fwhm(4.0)
    narrow = Component(1.0, (0.0, 0.0), s2, s2)
    wide = Component(1.0, (0.0, 0.0), s4, s4)
    elong = Component(1.0, (0.0, 0.0), s4, s2, math.pi / 4)
    if shape == "narrow":
        comps = (narrow,)
    elif shape == "wide":
        comps = (wide,)
    elif shape == "elong":
        comps = (elong,)
    elif shape == "complex":
        # stand-in composition; not taken from any published parameter set
        parts = [Component(1.0, (0.0, 0.0), s2, s2),
                 Component(0.5, (0.7, -0.3), s4, s2, math.pi / 4),
                 Component(0.25, (-0.5, 0.5), s4, s4)]
        probe = ReferencePsf(shape, tuple(parts), oversample)
        yy, xx = np.mgrid[-2:2.001:0.01, -2:2.001:0.01]
        peak = float(probe.evaluate(xx, yy).max())
        comps = tuple(Component(p.amplitude / peak, p.center_offset, p.sigma_major,
                                p.sigma_minor, p.angle) for p in parts)
    else:
        raise ValueError(f"unknown PSF shape {shape!r}; expected one of {SHAPES}")
    return ReferencePsf(shape, comps, oversample)


@dataclass
class SceneSpec:
    width: int = 256
    height: int = 256
    density: float = 10
    background: float = 1000.0
    inverse_gain: float = 1.0
    noise_level: float = 1.0
    peak_scale: float = 60000.0
    flux_min: float = 2.0e3
    flux_max: float = 5.0e4
    oversample: int = 8
    truncation: float = 1e-4
    noise: bool = True
    seed: int = 0
    n_stars: int | None = None

    def star_count(self):
        if self.n_stars is not None:
            return int(self.n_stars)
        if self.density <= 0:
            raise ValueError("density must be positive")
        return int(self.width * self.height // self.density)

    def to_dict(self):
        return asdict(self)


@dataclass
class GroundTruth:
    stars: np.ndarray   # (n, 3): x, y, flux (peak counts)
    psf: ReferencePsf
    flux_scale: float = 1.0
    extra: dict = field(default_factory=dict)


def draw_stars(spec):
    rng = np.random.default_rng([int(spec.seed), 0])
    n = spec.star_count()
    x = rng.uniform(-0.5, spec.width - 0.5, n)
    y = rng.uniform(-0.5, spec.height - 0.5, n)
    lo, hi = math.log(spec.flux_min), math.log(spec.flux_max)
    flux = np.exp(rng.uniform(lo, hi, n))
    return np.column_stack([x, y, flux])


def render_noiseless(stars, psf, spec):
    img = np.zeros((spec.height, spec.width))
    if len(stars):
        kernels.render_stars(img, stars[:, 0], stars[:, 1], stars[:, 2], psf.comps,
                             spec.oversample, psf.extent(spec.truncation))
    return img


def add_poisson_noise(x, inverse_gain=1.0, seed=0):
    """Poisson counting noise: ``Poisson(x * inverse_gain) / inverse_gain``."""
    x = np.asarray(x, dtype=np.float64)
    if inverse_gain <= 0:
        raise ValueError("inverse_gain must be positive")
    if np.any(x < 0):
        raise ValueError("Poisson noise requires non-negative pixel values")
    rng = np.random.default_rng([int(seed), 1])
    return rng.poisson(x * inverse_gain).astype(np.float64) / inverse_gain


def render_scene(spec, shape):
    """Simulate one tile; returns ``(image, GroundTruth)``.

    When the brightest noiseless pixel would exceed ``spec.peak_scale``
    all stellar fluxes are scaled down together so the tile stays within
    the 16-bit range; the scale is recorded in the ground truth.
    """
    if spec.noise and not spec.noise_level > 0:
        raise ValueError("noise_level must be positive")
    psf = make_reference_psf(shape, spec.oversample)
    stars = draw_stars(spec)
    light = render_noiseless(stars, psf, spec)
    scale = 1.0
    top = float(light.max()) if light.size else 0.0
    if top + spec.background > spec.peak_scale and top > 0:
        scale = (spec.peak_scale - spec.background) / top
        light *= scale
        stars = stars.copy()
        stars[:, 2] *= scale
    img = light + spec.background
    if spec.noise:
        gain = spec.inverse_gain / spec.noise_level ** 2
        img = add_poisson_noise(img, gain, spec.seed)
    img = np.clip(img, 0.0, ADC_MAX)
    return img, GroundTruth(stars=stars, psf=psf, flux_scale=scale)
