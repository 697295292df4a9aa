"""Covariance operators, Gaussian sampling, and the matrix-free SPD solver.

Covariances are realized diagonally in a fast orthonormal basis wherever
possible (FFT for stationary kernels on the grid torus), so apply, square
root, inverse and trace are all exact and O(n log n).  A dense realization
is provided for desk-scale oracles.
"""

from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

# Reciprocal spectral entries below this fraction of the largest entry are
# zeroed in solves (pseudoinverse semantics for near-degenerate covariances).
PSEUDO_INVERSE_RTOL = 1e-12


@dataclass(frozen=True)
class RngStream:
    """Counter-based splittable RNG handle.

    Same ``(seed, stream_id)`` reproduces bit-identical draws; distinct
    stream ids give statistically independent sequences.  Value-like: a
    fresh generator is created per use, never shared between workers.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> Generator:
        return Generator(Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64)))

    def substream(self, k: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id * 1_000_003 + k + 1)


def _as_generator(rng) -> Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


class CovarianceOp:
    """SPD trace-class operator role: apply / sqrt_apply / isqrt_apply / solve / trace.

    Actions accept ``(n,)`` vectors or ``(batch, n)`` stacks on the last axis.
    ``basis_key`` identifies the diagonalizing basis so that operators sharing
    it can be combined spectrally by callers.
    """

    def __init__(self, dim: int):
        self.dim = int(dim)

    basis_key = None

    def apply(self, v):
        raise NotImplementedError

    def sqrt_apply(self, v):
        raise NotImplementedError

    def isqrt_apply(self, v):
        raise NotImplementedError

    def solve(self, v):
        raise NotImplementedError

    @property
    def trace(self) -> float:
        raise NotImplementedError

    @property
    def scalar_variance(self):
        """The sigma^2 for operators equal to sigma^2 * identity, else None."""
        return None


def _reciprocal(spec):
    out = np.zeros_like(spec)
    floor = PSEUDO_INVERSE_RTOL * spec.max()
    keep = spec > floor
    out[keep] = 1.0 / spec[keep]
    return out


class DiagonalCovariance(CovarianceOp):
    """Covariance diagonal in the coordinate basis."""

    def __init__(self, variances):
        variances = np.asarray(variances, dtype=np.float64)
        if variances.ndim != 1:
            raise ValueError("variances must be a vector")
        if np.any(variances <= 0):
            raise ValueError("covariance requires strictly positive variances")
        super().__init__(variances.size)
        self.variances = variances.copy()
        self.variances.flags.writeable = False
        self._inv = _reciprocal(self.variances)
        self._sqrt = np.sqrt(self.variances)
        self.basis_key = ("coord", self.dim)

    def apply(self, v):
        return np.asarray(v) * self.variances

    def sqrt_apply(self, v):
        return np.asarray(v) * self._sqrt

    def isqrt_apply(self, v):
        return np.asarray(v) * np.sqrt(self._inv)

    def solve(self, v):
        return np.asarray(v) * self._inv

    @property
    def trace(self) -> float:
        return float(self.variances.sum())

    @property
    def scalar_variance(self):
        v0 = self.variances[0]
        if np.allclose(self.variances, v0, rtol=1e-12, atol=0.0):
            return float(v0)
        return None


def scalar_covariance(dim: int, variance: float) -> DiagonalCovariance:
    return DiagonalCovariance(np.full(dim, float(variance)))


class SpectralCovariance(CovarianceOp):
    """Covariance diagonal in the unitary 2D DFT basis of an rows x cols grid.

    The spectrum is given in unnormalized-DFT convention: the operator is the
    circulant with first row ``ifft2(spectrum)``, i.e. apply multiplies the
    ortho-normalized transform coefficients by ``spectrum`` and transforms
    back.  Spectra must be real, positive and conjugate-symmetric (guaranteed
    for even real kernels).
    """

    def __init__(self, grid_shape, spectrum):
        rows, cols = grid_shape
        spectrum = np.asarray(spectrum, dtype=np.float64)
        if spectrum.shape != (rows, cols):
            raise ValueError(f"spectrum shape {spectrum.shape} != grid {(rows, cols)}")
        if np.any(spectrum <= 0):
            raise ValueError("covariance requires strictly positive spectral entries")
        super().__init__(rows * cols)
        self.rows, self.cols = int(rows), int(cols)
        self.spectrum = spectrum.copy()
        self.spectrum.flags.writeable = False
        self._inv = _reciprocal(self.spectrum)
        self._sqrt = np.sqrt(self.spectrum)
        self.basis_key = ("fft2", self.rows, self.cols)
        self._half = self.cols // 2 + 1

    def _filter(self, v, mult):
        # Real-symmetric spectrum: the half-spectrum rfft path suffices.
        v = np.asarray(v, dtype=np.float64)
        grids = v.reshape(v.shape[:-1] + (self.rows, self.cols))
        vhat = np.fft.rfft2(grids)
        vhat *= mult[..., : self._half]
        out = np.fft.irfft2(vhat, s=(self.rows, self.cols))
        return out.reshape(v.shape)

    def apply(self, v):
        return self._filter(v, self.spectrum)

    def sqrt_apply(self, v):
        return self._filter(v, self._sqrt)

    def isqrt_apply(self, v):
        return self._filter(v, np.sqrt(self._inv))

    def solve(self, v):
        return self._filter(v, self._inv)

    def filter_with(self, mult, v):
        """Apply an arbitrary nonnegative spectral multiplier in this basis."""
        return self._filter(v, mult)

    @property
    def trace(self) -> float:
        # Unitary basis: trace equals the sum of spectral entries.
        return float(self.spectrum.sum())

    @property
    def scalar_variance(self):
        v0 = self.spectrum.flat[0]
        if np.allclose(self.spectrum, v0, rtol=1e-12, atol=0.0):
            return float(v0)
        return None


def spectral_covariance(shape, spectrum) -> SpectralCovariance:
    """Covariance with the given per-mode variances on a grid.

    ``shape`` is a GridShape or (rows, cols) pair; ``spectrum`` the per-mode
    variances in the DFT basis.
    """
    rows, cols = (shape.rows, shape.cols) if hasattr(shape, "rows") else shape
    return SpectralCovariance((rows, cols), spectrum)


def sq_exp_covariance(shape, lengthscale: float, amplitude: float = 1.0,
                      jitter: float = 1e-8) -> SpectralCovariance:
    """Squared-exponential covariance on the unit square, realized spectrally.

    The kernel ``amplitude * exp(-d^2 / (2 l^2))`` is wrapped onto the grid
    torus (nearest periodic images summed), which makes the operator an exact
    SPD circulant at the cost of an O(exp(-(L/2)^2 / 2 l^2)) kernel error at
    large distances.  Spectral entries are clipped below at
    ``jitter * amplitude`` to absorb tiny negative embedding coefficients.
    """
    if lengthscale <= 0 or amplitude <= 0:
        raise ValueError("lengthscale and amplitude must be positive")
    rows, cols = (shape.rows, shape.cols) if hasattr(shape, "rows") else shape
    dy = (np.arange(rows) / rows)[:, None]
    dx = (np.arange(cols) / cols)[None, :]
    row0 = np.zeros((rows, cols))
    for jy in (-1.0, 0.0, 1.0):
        for jx in (-1.0, 0.0, 1.0):
            d2 = (dy + jy) ** 2 + (dx + jx) ** 2
            row0 += np.exp(-d2 / (2.0 * lengthscale**2))
    row0 *= amplitude
    spectrum = np.fft.fft2(row0).real
    spectrum = np.maximum(spectrum, jitter * amplitude)
    return SpectralCovariance((rows, cols), spectrum)


class DenseCovariance(CovarianceOp):
    """Dense SPD covariance for desk-scale problems and test oracles."""

    MAX_DIM = 4096

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("covariance matrix must be square")
        if matrix.shape[0] > self.MAX_DIM:
            raise ValueError(f"dense covariance guard: dim {matrix.shape[0]} > {self.MAX_DIM}")
        if not np.allclose(matrix, matrix.T, atol=1e-12 * max(1.0, np.abs(matrix).max())):
            raise ValueError("covariance matrix must be symmetric")
        super().__init__(matrix.shape[0])
        self.matrix = 0.5 * (matrix + matrix.T)
        evals, evecs = np.linalg.eigh(self.matrix)
        if evals.min() <= 0:
            raise ValueError(f"covariance matrix must be positive definite (min eig {evals.min():g})")
        self._evals = evals
        self._evecs = evecs
        self.basis_key = None

    def _mul(self, v, diag):
        v = np.asarray(v, dtype=np.float64)
        return ((v @ self._evecs) * diag) @ self._evecs.T

    def apply(self, v):
        return self._mul(v, self._evals)

    def sqrt_apply(self, v):
        return self._mul(v, np.sqrt(self._evals))

    def isqrt_apply(self, v):
        return self._mul(v, 1.0 / np.sqrt(self._evals))

    def solve(self, v):
        return self._mul(v, _reciprocal(self._evals))

    @property
    def trace(self) -> float:
        return float(self._evals.sum())


def dense_covariance(matrix) -> DenseCovariance:
    return DenseCovariance(matrix)


def sample_gaussian(cov: CovarianceOp, rng, mean=None):
    """One draw from N(mean, cov) via the square-root factor."""
    g = _as_generator(rng)
    x = cov.sqrt_apply(g.standard_normal(cov.dim))
    if mean is not None:
        x = x + mean
    return x


class GaussianPrior:
    """Gaussian prior N(mean, cov); ``mean=None`` means centered."""

    def __init__(self, cov: CovarianceOp, mean=None):
        self.cov = cov
        if mean is not None:
            mean = np.asarray(mean, dtype=np.float64)
            if mean.shape != (cov.dim,):
                raise ValueError(f"mean shape {mean.shape} != ({cov.dim},)")
            if not mean.any():
                mean = None
        self.mean = mean

    @property
    def dim(self) -> int:
        return self.cov.dim

    def sample(self, rng):
        return sample_gaussian(self.cov, rng, mean=self.mean)

    def mean_vector(self) -> np.ndarray:
        return np.zeros(self.dim) if self.mean is None else self.mean


class CGBreakdownError(RuntimeError):
    """NaN/Inf encountered inside the conjugate-gradient iteration."""


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def cg_solve(spd_action, b, tol: float = 1e-8, max_iter: int | None = None,
             preconditioner=None, x0=None) -> CGResult:
    """Conjugate gradients for an SPD action, optionally preconditioned.

    Stops when ``||action(x) - b|| <= tol * ||b||``; returns the best iterate
    with ``converged=False`` if ``max_iter`` is reached first.  The caller is
    responsible for ``spd_action`` being self-adjoint positive definite.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ValueError("cg_solve expects a single right-hand side; see cg_solve_batch")
    n = b.shape[0]
    if max_iter is None:
        max_iter = max(50, int(10 * np.sqrt(n)))
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(np.zeros_like(b), 0, 0.0, True)
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.asarray(x0, dtype=np.float64).copy()
        r = b - spd_action(x)
    z = preconditioner(r) if preconditioner is not None else r
    p = z.copy()
    rz = float(np.dot(r, z))
    for k in range(1, max_iter + 1):
        ap = spd_action(p)
        pap = float(np.dot(p, ap))
        if not np.isfinite(pap) or pap <= 0.0:
            if not np.isfinite(pap):
                raise CGBreakdownError(f"non-finite curvature at iteration {k}")
            raise CGBreakdownError(f"non-positive curvature {pap:g}: action is not SPD")
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        res = float(np.linalg.norm(r))
        if not np.isfinite(res):
            raise CGBreakdownError(f"non-finite residual at iteration {k}")
        if res <= tol * bnorm:
            return CGResult(x, k, res / bnorm, True)
        z = preconditioner(r) if preconditioner is not None else r
        rz_new = float(np.dot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return CGResult(x, max_iter, float(np.linalg.norm(r)) / bnorm, False)


def cg_solve_batch(spd_action, B, tol: float = 1e-8, max_iter: int | None = None,
                   preconditioner=None, x0=None) -> np.ndarray:
    """CG on a stack of right-hand sides of shape (batch, n).

    Per-row step sizes; rows that converge (or go non-finite) are frozen, so
    each row's iterate sequence is independent of the other rows in the
    batch.  Non-finite rows are returned as-is for the caller to handle.
    """
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2:
        raise ValueError("cg_solve_batch expects shape (batch, n)")
    nb, n = B.shape
    if max_iter is None:
        max_iter = max(50, int(10 * np.sqrt(n)))
    if x0 is None:
        X = np.zeros_like(B)
        R = B.copy()
    else:
        X = np.array(x0, dtype=np.float64, copy=True)
        R = B - spd_action(X)
    Z = preconditioner(R) if preconditioner is not None else R.copy()
    P = Z.copy()
    bnorm = np.linalg.norm(B, axis=1)
    rz = np.einsum("ij,ij->i", R, Z)
    active = (bnorm > 0.0) & np.isfinite(rz) & (np.linalg.norm(R, axis=1) > tol * bnorm)
    for _ in range(max_iter):
        if not active.any():
            break
        AP = spd_action(P)
        pap = np.einsum("ij,ij->i", P, AP)
        live = active & np.isfinite(pap) & (pap > 0)
        alpha = np.where(live, rz / np.where(live, pap, 1.0), 0.0)
        X += alpha[:, None] * P
        R -= alpha[:, None] * AP
        res = np.linalg.norm(R, axis=1)
        active = live & np.isfinite(res) & (res > tol * np.maximum(bnorm, np.finfo(float).tiny))
        Z = preconditioner(R) if preconditioner is not None else R
        rz_new = np.einsum("ij,ij->i", R, Z)
        beta = np.where(rz > 0, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        P = Z + np.where(active, beta, 0.0)[:, None] * P
        rz = rz_new
    return X
