"""Hot loops for the grid operators: 2D convolution and parallel-beam projection.

Each kernel exists twice, a numba ``@njit`` build and a pure-numpy fallback.
The active path is chosen at import time: set ``TASKDIFF_NUMBA=0`` to force
the numpy path (useful on machines without a working numba, and for the
benchmark in ``benchmarks/kernel_bench.py``).
"""

import os

import numpy as np

_env = os.environ.get("TASKDIFF_NUMBA", "1").strip().lower()
_WANT_NUMBA = _env not in ("0", "false", "off", "no")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled via TASKDIFF_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        # Decorator stub so the jitted defs below stay importable.
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


# ---------------------------------------------------------------------------
# Replicate-edge 2D convolution.
#
# Forward: y[i, j] = sum_{a, b} k[a, b] * xpad[i + a, j + b] where xpad is the
# input padded by kr rows / kc cols of edge replication and k is the kernel
# flipped in both axes (so the operation is a convolution, not a correlation).
# The adjoint is the exact transpose: scatter with the same weights, then fold
# the pad bands back onto the edge pixels.
# ---------------------------------------------------------------------------


def _conv2d_replicate_numpy(img, kernel_flipped):
    kh, kw = kernel_flipped.shape
    kr, kc = kh // 2, kw // 2
    xpad = np.pad(img, ((kr, kr), (kc, kc)), mode="edge")
    out = np.zeros_like(img)
    for a in range(kh):
        for b in range(kw):
            w = kernel_flipped[a, b]
            if w != 0.0:
                out += w * xpad[a : a + img.shape[0], b : b + img.shape[1]]
    return out


def _conv2d_replicate_adjoint_numpy(grad, kernel_flipped):
    kh, kw = kernel_flipped.shape
    kr, kc = kh // 2, kw // 2
    rows, cols = grad.shape
    zpad = np.zeros((rows + 2 * kr, cols + 2 * kc))
    for a in range(kh):
        for b in range(kw):
            w = kernel_flipped[a, b]
            if w != 0.0:
                zpad[a : a + rows, b : b + cols] += w * grad
    # Fold the replicate pad: every pad cell maps onto its clamped edge pixel.
    zr = np.zeros((rows, cols + 2 * kc))
    zr[0] = zpad[: kr + 1].sum(axis=0)
    zr[rows - 1] = zpad[rows - 1 + kr :].sum(axis=0)
    if rows > 2:
        zr[1 : rows - 1] = zpad[kr + 1 : rows - 1 + kr]
    out = np.zeros((rows, cols))
    out[:, 0] = zr[:, : kc + 1].sum(axis=1)
    out[:, cols - 1] = zr[:, cols - 1 + kc :].sum(axis=1)
    if cols > 2:
        out[:, 1 : cols - 1] = zr[:, kc + 1 : cols - 1 + kc]
    return out


@njit(cache=True)
def _conv2d_replicate_numba(img, kernel_flipped):  # pragma: no cover - timing path
    rows, cols = img.shape
    kh, kw = kernel_flipped.shape
    kr, kc = kh // 2, kw // 2
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for a in range(kh):
                ii = i + a - kr
                if ii < 0:
                    ii = 0
                elif ii >= rows:
                    ii = rows - 1
                for b in range(kw):
                    jj = j + b - kc
                    if jj < 0:
                        jj = 0
                    elif jj >= cols:
                        jj = cols - 1
                    acc += kernel_flipped[a, b] * img[ii, jj]
            out[i, j] = acc
    return out


@njit(cache=True)
def _conv2d_replicate_adjoint_numba(grad, kernel_flipped):  # pragma: no cover
    rows, cols = grad.shape
    kh, kw = kernel_flipped.shape
    kr, kc = kh // 2, kw // 2
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            g = grad[i, j]
            for a in range(kh):
                ii = i + a - kr
                if ii < 0:
                    ii = 0
                elif ii >= rows:
                    ii = rows - 1
                for b in range(kw):
                    jj = j + b - kc
                    if jj < 0:
                        jj = 0
                    elif jj >= cols:
                        jj = cols - 1
                    out[ii, jj] += kernel_flipped[a, b] * g
    return out


def conv2d_replicate(img, kernel_flipped):
    """Convolve one image with replicate-edge boundary handling."""
    if HAS_NUMBA:
        return _conv2d_replicate_numba(img, kernel_flipped)
    return _conv2d_replicate_numpy(img, kernel_flipped)


def conv2d_replicate_adjoint(grad, kernel_flipped):
    """Exact transpose of :func:`conv2d_replicate`."""
    if HAS_NUMBA:
        return _conv2d_replicate_adjoint_numba(grad, kernel_flipped)
    return _conv2d_replicate_adjoint_numpy(grad, kernel_flipped)


# ---------------------------------------------------------------------------
# Parallel-beam projection on [-1, 1]^2.
#
# A ray for (angle theta, detector offset u) is p(tau) = u * n + tau * d with
# n = (cos theta, sin theta), d = (-sin theta, cos theta).  The line integral
# is a midpoint quadrature of the interpolated image along tau in
# [-sqrt(2), sqrt(2)].  Interpolation is bilinear between pixel centers,
# clamped to the nearest node inside the outer half-pixel band and zero
# outside the image square, so a 1x1 image acts as an indicator of its pixel.
# The back projection scatters the same quadrature weights, which makes it
# the exact adjoint of the discrete forward map.
# ---------------------------------------------------------------------------


def _ray_grid(n_samples):
    span = 2.0 * np.sqrt(2.0)
    h = span / n_samples
    taus = -np.sqrt(2.0) + (np.arange(n_samples) + 0.5) * h
    return taus, h


@njit(cache=True)
def _radon_apply_numba(img, cos_t, sin_t, offsets, taus, h):  # pragma: no cover
    rows, cols = img.shape
    n_angles = cos_t.shape[0]
    n_det = offsets.shape[0]
    dx = 2.0 / cols
    dy = 2.0 / rows
    sino = np.zeros((n_angles, n_det))
    for ia in range(n_angles):
        c = cos_t[ia]
        s = sin_t[ia]
        for idet in range(n_det):
            u = offsets[idet]
            acc = 0.0
            for k in range(taus.shape[0]):
                tau = taus[k]
                px = u * c - tau * s
                py = u * s + tau * c
                if px < -1.0 or px > 1.0 or py < -1.0 or py > 1.0:
                    continue
                fx = (px + 1.0) / dx - 0.5
                fy = (py + 1.0) / dy - 0.5
                if fx < 0.0:
                    fx = 0.0
                elif fx > cols - 1.0:
                    fx = cols - 1.0
                if fy < 0.0:
                    fy = 0.0
                elif fy > rows - 1.0:
                    fy = rows - 1.0
                j0 = int(fx)
                i0 = int(fy)
                j1 = j0 + 1 if j0 + 1 < cols else j0
                i1 = i0 + 1 if i0 + 1 < rows else i0
                wx = fx - j0
                wy = fy - i0
                acc += (
                    (1.0 - wy) * ((1.0 - wx) * img[i0, j0] + wx * img[i0, j1])
                    + wy * ((1.0 - wx) * img[i1, j0] + wx * img[i1, j1])
                )
            sino[ia, idet] = acc * h
    return sino


@njit(cache=True)
def _radon_adjoint_numba(sino, cos_t, sin_t, offsets, taus, h, rows, cols):  # pragma: no cover
    n_angles = cos_t.shape[0]
    n_det = offsets.shape[0]
    dx = 2.0 / cols
    dy = 2.0 / rows
    img = np.zeros((rows, cols))
    for ia in range(n_angles):
        c = cos_t[ia]
        s = sin_t[ia]
        for idet in range(n_det):
            w = sino[ia, idet] * h
            if w == 0.0:
                continue
            u = offsets[idet]
            for k in range(taus.shape[0]):
                tau = taus[k]
                px = u * c - tau * s
                py = u * s + tau * c
                if px < -1.0 or px > 1.0 or py < -1.0 or py > 1.0:
                    continue
                fx = (px + 1.0) / dx - 0.5
                fy = (py + 1.0) / dy - 0.5
                if fx < 0.0:
                    fx = 0.0
                elif fx > cols - 1.0:
                    fx = cols - 1.0
                if fy < 0.0:
                    fy = 0.0
                elif fy > rows - 1.0:
                    fy = rows - 1.0
                j0 = int(fx)
                i0 = int(fy)
                j1 = j0 + 1 if j0 + 1 < cols else j0
                i1 = i0 + 1 if i0 + 1 < rows else i0
                wx = fx - j0
                wy = fy - i0
                img[i0, j0] += w * (1.0 - wy) * (1.0 - wx)
                img[i0, j1] += w * (1.0 - wy) * wx
                img[i1, j0] += w * wy * (1.0 - wx)
                img[i1, j1] += w * wy * wx
    return img


def _radon_sample_coords(cos_t, sin_t, offsets, taus, rows, cols):
    # (n_angles, n_det, n_samples) sample coordinates plus validity mask.
    px = offsets[None, :, None] * cos_t[:, None, None] - taus[None, None, :] * sin_t[:, None, None]
    py = offsets[None, :, None] * sin_t[:, None, None] + taus[None, None, :] * cos_t[:, None, None]
    inside = (np.abs(px) <= 1.0) & (np.abs(py) <= 1.0)
    fx = np.clip((px + 1.0) * (cols / 2.0) - 0.5, 0.0, cols - 1.0)
    fy = np.clip((py + 1.0) * (rows / 2.0) - 0.5, 0.0, rows - 1.0)
    j0 = fx.astype(np.int64)
    i0 = fy.astype(np.int64)
    j1 = np.minimum(j0 + 1, cols - 1)
    i1 = np.minimum(i0 + 1, rows - 1)
    wx = fx - j0
    wy = fy - i0
    return inside, i0, i1, j0, j1, wx, wy


def _radon_apply_numpy(img, cos_t, sin_t, offsets, taus, h):
    rows, cols = img.shape
    inside, i0, i1, j0, j1, wx, wy = _radon_sample_coords(cos_t, sin_t, offsets, taus, rows, cols)
    vals = (
        (1.0 - wy) * ((1.0 - wx) * img[i0, j0] + wx * img[i0, j1])
        + wy * ((1.0 - wx) * img[i1, j0] + wx * img[i1, j1])
    )
    vals = np.where(inside, vals, 0.0)
    return vals.sum(axis=2) * h


def _radon_adjoint_numpy(sino, cos_t, sin_t, offsets, taus, h, rows, cols):
    inside, i0, i1, j0, j1, wx, wy = _radon_sample_coords(cos_t, sin_t, offsets, taus, rows, cols)
    w = np.where(inside, sino[:, :, None] * h, 0.0)
    img = np.zeros((rows, cols))
    np.add.at(img, (i0, j0), w * (1.0 - wy) * (1.0 - wx))
    np.add.at(img, (i0, j1), w * (1.0 - wy) * wx)
    np.add.at(img, (i1, j0), w * wy * (1.0 - wx))
    np.add.at(img, (i1, j1), w * wy * wx)
    return img


def radon_apply(img, cos_t, sin_t, offsets, taus, h):
    """Line-integral sinogram of one image."""
    if HAS_NUMBA:
        return _radon_apply_numba(img, cos_t, sin_t, offsets, taus, h)
    return _radon_apply_numpy(img, cos_t, sin_t, offsets, taus, h)


def radon_adjoint(sino, cos_t, sin_t, offsets, taus, h, rows, cols):
    """Back projection, the exact adjoint of :func:`radon_apply`."""
    if HAS_NUMBA:
        return _radon_adjoint_numba(sino, cos_t, sin_t, offsets, taus, h, rows, cols)
    return _radon_adjoint_numpy(sino, cos_t, sin_t, offsets, taus, h, rows, cols)
