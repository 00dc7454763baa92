"""Hot loops of the simulator and metric, with numba and numpy versions.

A profile is described by a component table ``comps`` of shape
``(n, 6)``: ``amplitude, dx, dy, qa, qb, qc``. Component ``c`` contributes
``amplitude * pg(qa u^2 + qb u v + qc v^2)`` with ``u = x - dx``,
``v = y - dy`` and ``pg`` the pseudo-Gaussian ``1 / (1 + z + z^2/2 + z^3/6)``.

"Box" evaluation averages the profile over an ``oversample x oversample``
lattice of sub-pixel centres covering the unit pixel around each point,
which models photosite integration.

The public functions dispatch to the numba kernels unless numba is
unavailable or disabled via ``CROWDPSF_NO_NUMBA``.
"""

import numpy as np

from ._accel import HAS_NUMBA, njit


@njit(cache=True)
def _pg(z):
    return 1.0 / (1.0 + z * (1.0 + z * (0.5 + z / 6.0)))


@njit(cache=True)
def _profile_at(x, y, comps):
    acc = 0.0
    for c in range(comps.shape[0]):
        u = x - comps[c, 1]
        v = y - comps[c, 2]
        z = comps[c, 3] * u * u + comps[c, 4] * u * v + comps[c, 5] * v * v
        acc += comps[c, 0] * _pg(z)
    return acc


@njit(cache=True)
def _box_profile_points_nb(px, py, comps, oversample):
    n = px.shape[0]
    out = np.empty(n)
    inv = 1.0 / oversample
    for i in range(n):
        acc = 0.0
        for p in range(oversample):
            sy = py[i] - 0.5 + (p + 0.5) * inv
            for q in range(oversample):
                sx = px[i] - 0.5 + (q + 0.5) * inv
                acc += _profile_at(sx, sy, comps)
        out[i] = acc * inv * inv
    return out


@njit(cache=True)
def _render_stars_nb(out, xs, ys, fluxes, comps, oversample, radius):
    H, W = out.shape
    inv = 1.0 / oversample
    for k in range(xs.shape[0]):
        x0 = xs[k]
        y0 = ys[k]
        f = fluxes[k]
        r0 = max(int(np.floor(y0 - radius)), 0)
        r1 = min(int(np.ceil(y0 + radius)), H - 1)
        c0 = max(int(np.floor(x0 - radius)), 0)
        c1 = min(int(np.ceil(x0 + radius)), W - 1)
        for i in range(r0, r1 + 1):
            for j in range(c0, c1 + 1):
                acc = 0.0
                for p in range(oversample):
                    sy = i - y0 - 0.5 + (p + 0.5) * inv
                    for q in range(oversample):
                        sx = j - x0 - 0.5 + (q + 0.5) * inv
                        acc += _profile_at(sx, sy, comps)
                out[i, j] += f * acc * inv * inv


def pseudo_gaussian_np(z):
    z = np.asarray(z, dtype=np.float64)
    return 1.0 / (1.0 + z * (1.0 + z * (0.5 + z / 6.0)))


def profile_np(x, y, comps):
    acc = np.zeros(np.broadcast(x, y).shape)
    for amp, dx, dy, qa, qb, qc in comps:
        u = x - dx
        v = y - dy
        acc += amp * pseudo_gaussian_np(qa * u * u + qb * u * v + qc * v * v)
    return acc


def _subsample_offsets(oversample):
    s = (np.arange(oversample) + 0.5) / oversample - 0.5
    return s


def _box_profile_points_np(px, py, comps, oversample):
    s = _subsample_offsets(oversample)
    out = np.zeros(px.shape[0])
    for dy in s:
        for dx in s:
            out += profile_np(px + dx, py + dy, comps)
    return out / oversample ** 2


def _render_stars_np(out, xs, ys, fluxes, comps, oversample, radius):
    H, W = out.shape
    s = _subsample_offsets(oversample)
    base_r = np.floor(ys - radius).astype(np.int64)
    base_c = np.floor(xs - radius).astype(np.int64)
    span = int(np.ceil(2 * radius)) + 2
    flat = out.reshape(-1)
    for di in range(span):
        rows = base_r + di
        rin = (rows >= 0) & (rows < H) & (rows <= np.ceil(ys + radius))
        for dj in range(span):
            cols = base_c + dj
            ok = rin & (cols >= 0) & (cols < W) & (cols <= np.ceil(xs + radius))
            if not ok.any():
                continue
            u = cols[ok] - xs[ok]
            v = rows[ok] - ys[ok]
            acc = np.zeros(u.shape)
            for sy in s:
                for sx in s:
                    acc += profile_np(u + sx, v + sy, comps)
            acc *= fluxes[ok] / oversample ** 2
            np.add.at(flat, rows[ok] * W + cols[ok], acc)


def box_profile_points(px, py, comps, oversample, use_numba=None):
    """Pixel-integrated profile at the points ``(px, py)`` (flat arrays)."""
    px = np.ascontiguousarray(px, dtype=np.float64).ravel()
    py = np.ascontiguousarray(py, dtype=np.float64).ravel()
    comps = np.ascontiguousarray(comps, dtype=np.float64)
    if HAS_NUMBA if use_numba is None else use_numba:
        return _box_profile_points_nb(px, py, comps, int(oversample))
    return _box_profile_points_np(px, py, comps, int(oversample))


def render_stars(out, xs, ys, fluxes, comps, oversample, radius, use_numba=None):
    """Add pixel-integrated stars to ``out`` in place (non-periodic, clipped to the tile).

    Each star touches the pixels within ``radius`` (pixels, square window)
    of its centre.
    """
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    fluxes = np.ascontiguousarray(fluxes, dtype=np.float64)
    comps = np.ascontiguousarray(comps, dtype=np.float64)
    if HAS_NUMBA if use_numba is None else use_numba:
        _render_stars_nb(out, xs, ys, fluxes, comps, int(oversample), float(radius))
    else:
        _render_stars_np(out, xs, ys, fluxes, comps, int(oversample), float(radius))
    return out


# --- ADMM inner loops -------------------------------------------------------

@njit(cache=True)
def _xstep_nb(Df, Sf, rho, Uf, Vf):
    nk, nr, nc = Df.shape
    Xf = np.empty_like(Uf)
    num = np.zeros((nr, nc), dtype=np.complex128)
    den = np.full((nr, nc), rho)
    for k in range(nk):
        for i in range(nr):
            for j in range(nc):
                d = Df[k, i, j]
                bk = d.conjugate() * Sf[i, j] + rho * (Uf[k, i, j] - Vf[k, i, j])
                Xf[k, i, j] = bk
                num[i, j] += d * bk
                den[i, j] += d.real * d.real + d.imag * d.imag
    for i in range(nr):
        for j in range(nc):
            num[i, j] /= den[i, j]
    inv = 1.0 / rho
    for k in range(nk):
        for i in range(nr):
            for j in range(nc):
                Xf[k, i, j] = (Xf[k, i, j] - Df[k, i, j].conjugate() * num[i, j]) * inv
    return Xf


def _xstep_np(Df, Sf, rho, Uf, Vf):
    b = np.conj(Df) * Sf[None] + rho * (Uf - Vf)
    c = np.sum(Df * b, axis=0) / (rho + np.sum(Df.real ** 2 + Df.imag ** 2, axis=0))
    return (b - np.conj(Df) * c[None]) / rho


@njit(cache=True)
def _prox_dual_nb(x, v, u_prev, t, nonneg, l1_only):
    # x, v, u_prev: (nk, n). Returns u, updated v and squared norms
    # (|x|^2, |u|^2, |x - u|^2, |u - u_prev|^2, |v_new|^2).
    nk, n = x.shape
    u = np.empty_like(x)
    vn = np.empty_like(x)
    acc = np.zeros(5)
    for k in range(nk):
        vmax = 0.0
        imax = 0
        ss = 0.0
        for i in range(n):
            a = x[k, i] + v[k, i]
            if nonneg and a < 0.0:
                a = 0.0
            m = abs(a)
            if m > vmax:
                vmax = m
                imax = i
            if m > t:
                ss += (m - t) * (m - t)
        if l1_only or vmax > t:
            scale = 1.0
            if not l1_only:
                nz = np.sqrt(ss)
                scale = (nz + t) / nz
            for i in range(n):
                a = x[k, i] + v[k, i]
                if nonneg and a < 0.0:
                    a = 0.0
                m = abs(a)
                if m > t:
                    u[k, i] = np.sign(a) * (m - t) * scale
                else:
                    u[k, i] = 0.0
        else:
            for i in range(n):
                u[k, i] = 0.0
            if vmax > 0.0:
                a = x[k, imax] + v[k, imax]
                u[k, imax] = max(a, 0.0) if nonneg else a
        for i in range(n):
            xi = x[k, i]
            ui = u[k, i]
            vi = v[k, i] + xi - ui
            vn[k, i] = vi
            d = ui - u_prev[k, i]
            acc[0] += xi * xi
            acc[1] += ui * ui
            acc[2] += (xi - ui) * (xi - ui)
            acc[3] += d * d
            acc[4] += vi * vi
    return u, vn, acc


def _prox_dual_np(x, v, u_prev, t, nonneg, l1_only):
    from .sparse import prox_maps
    # one map per row
    u = prox_maps((x + v)[..., None], t, nonneg, l1_only)[..., 0]
    vn = v + x - u
    acc = np.array([np.sum(x * x), np.sum(u * u), np.sum((x - u) ** 2),
                    np.sum((u - u_prev) ** 2), np.sum(vn * vn)])
    return u, vn, acc


def admm_xstep(Df, Sf, rho, Uf, Vf, use_numba=None):
    """Sherman-Morrison solve of the ADMM linear step for ``z = u - v``."""
    if HAS_NUMBA if use_numba is None else use_numba:
        return _xstep_nb(Df, Sf, float(rho), Uf, Vf)
    return _xstep_np(Df, Sf, rho, Uf, Vf)


def admm_prox_dual(x, v, u_prev, t, nonneg=False, l1_only=False, use_numba=None):
    """Per-map l1 - l2 prox of ``x + v`` and the scaled dual update.

    Arrays are ``(n_maps, n_pixels)``; returns ``(u, v_new, sq)`` where
    ``sq`` holds the squared norms of ``x``, ``u``, ``x - u``,
    ``u - u_prev`` and ``v_new``.
    """
    if HAS_NUMBA if use_numba is None else use_numba:
        return _prox_dual_nb(x, v, u_prev, float(t), bool(nonneg), bool(l1_only))
    return _prox_dual_np(x, v, u_prev, t, nonneg, l1_only)
