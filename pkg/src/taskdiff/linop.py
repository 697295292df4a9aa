"""Matrix-free linear operators and the forward maps used in the experiments.

Every operator exposes only ``apply`` and ``adjoint_apply`` actions; dense
matrices are never formed here (test oracles materialize them separately).
Actions accept a single vector of shape ``(n,)`` or a stack of shape
``(batch, n)`` and operate on the last axis.  Operators are immutable after
construction and safe to share across workers.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class GridShape:
    """Pixel grid dimensions; the flattened problem dimension is ``rows * cols``."""

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid dimensions must be >= 1, got {self.rows}x{self.cols}")

    @property
    def n(self) -> int:
        return self.rows * self.cols


def _as_batch(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise ValueError(f"{what}: expected last axis {dim}, got shape {x.shape}")
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"{what}: expected 1- or 2-d input, got shape {x.shape}")


class LinearMap:
    """A linear map given by its forward and adjoint actions.

    Subclasses implement ``_apply`` and ``_adjoint`` on ``(batch, dim)``
    arrays.  ``apply``/``adjoint_apply`` handle the single-vector case.
    """

    def __init__(self, domain_dim: int, codomain_dim: int):
        self.domain_dim = int(domain_dim)
        self.codomain_dim = int(codomain_dim)

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, w):
        raise NotImplementedError

    def apply(self, x):
        xb, single = _as_batch(x, self.domain_dim, type(self).__name__ + ".apply")
        out = self._apply(xb)
        return out[0] if single else out

    def adjoint_apply(self, w):
        wb, single = _as_batch(w, self.codomain_dim, type(self).__name__ + ".adjoint_apply")
        out = self._adjoint(wb)
        return out[0] if single else out


class ZeroMap(LinearMap):
    def _apply(self, x):
        return np.zeros((x.shape[0], self.codomain_dim))

    def _adjoint(self, w):
        return np.zeros((w.shape[0], self.domain_dim))


class IdentityMap(LinearMap):
    def __init__(self, n):
        super().__init__(n, n)

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, w):
        return w.copy()


def identity(n: int) -> LinearMap:
    return IdentityMap(n)


def zero_map(domain_dim: int, codomain_dim: int) -> LinearMap:
    return ZeroMap(domain_dim, codomain_dim)


class MaskOperator(LinearMap):
    """Pointwise multiplication by a 0/1 mask; self-adjoint, n = m."""

    def __init__(self, shape: GridShape, mask):
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (shape.rows, shape.cols):
            raise ValueError(
                f"mask shape {mask.shape} does not match grid {shape.rows}x{shape.cols}"
            )
        super().__init__(shape.n, shape.n)
        self.shape = shape
        self.mask_flat = (mask != 0).astype(np.float64).ravel()
        self.mask_flat.flags.writeable = False

    def _apply(self, x):
        return x * self.mask_flat

    _adjoint = _apply


def mask_operator(shape: GridShape, mask) -> MaskOperator:
    return MaskOperator(shape, mask)


class BlurOperator(LinearMap):
    """2D convolution with replicate-edge boundary; n = m.

    Replicate edges keep constant images fixed under normalized kernels,
    which pins down easy oracle checks.
    """

    def __init__(self, shape: GridShape, kernel):
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ValueError(f"kernel must be 2-d with odd sides, got shape {kernel.shape}")
        if not np.all(np.isfinite(kernel)):
            raise ValueError("kernel entries must be finite")
        super().__init__(shape.n, shape.n)
        self.shape = shape
        self.kernel = kernel.copy()
        # Convolution = correlation with the doubly flipped kernel.
        self._kflip = kernel[::-1, ::-1].copy()

    def _apply(self, x):
        r, c = self.shape.rows, self.shape.cols
        out = np.empty_like(x)
        for b in range(x.shape[0]):
            out[b] = _kernels.conv2d_replicate(x[b].reshape(r, c), self._kflip).ravel()
        return out

    def _adjoint(self, w):
        r, c = self.shape.rows, self.shape.cols
        out = np.empty_like(w)
        for b in range(w.shape[0]):
            out[b] = _kernels.conv2d_replicate_adjoint(w[b].reshape(r, c), self._kflip).ravel()
        return out


def blur_operator(shape: GridShape, kernel) -> BlurOperator:
    return BlurOperator(shape, kernel)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2D Gaussian stencil with odd side length."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


class RadonOperator(LinearMap):
    """Parallel-beam line integrals at desk scale; m = n_angles * n_detectors.

    Angles are equispaced over ``angular_span_degrees`` starting at 0 and the
    detector offsets span [-1, 1] over the image square [-1, 1]^2.  The
    adjoint is the exact transpose of the discrete forward map (plain back
    projection, not filtered).
    """

    def __init__(self, shape: GridShape, n_angles: int, n_detectors: int,
                 angular_span_degrees: float = 180.0, samples_per_pixel: int = 2):
        if n_angles < 1 or n_detectors < 1:
            raise ValueError("need at least one angle and one detector")
        if not 0.0 < angular_span_degrees <= 180.0:
            raise ValueError("angular span must be in (0, 180] degrees")
        super().__init__(shape.n, n_angles * n_detectors)
        self.shape = shape
        self.n_angles = int(n_angles)
        self.n_detectors = int(n_detectors)
        self.angular_span_degrees = float(angular_span_degrees)

        angles = np.deg2rad(angular_span_degrees) * np.arange(n_angles) / n_angles
        self._cos = np.cos(angles)
        self._sin = np.sin(angles)
        if n_detectors == 1:
            self._offsets = np.array([0.0])
        else:
            self._offsets = np.linspace(-1.0, 1.0, n_detectors)
        n_samples = samples_per_pixel * max(shape.rows, shape.cols, 16)
        # Quadrature nodes along the ray, covering the diagonal of the square.
        self._taus, self._h = _kernels._ray_grid(n_samples)

    def _apply(self, x):
        r, c = self.shape.rows, self.shape.cols
        out = np.empty((x.shape[0], self.codomain_dim))
        for b in range(x.shape[0]):
            out[b] = _kernels.radon_apply(
                x[b].reshape(r, c), self._cos, self._sin, self._offsets, self._taus, self._h
            ).ravel()
        return out

    def _adjoint(self, w):
        r, c = self.shape.rows, self.shape.cols
        out = np.empty((w.shape[0], self.domain_dim))
        for b in range(w.shape[0]):
            out[b] = _kernels.radon_adjoint(
                w[b].reshape(self.n_angles, self.n_detectors),
                self._cos, self._sin, self._offsets, self._taus, self._h, r, c,
            ).ravel()
        return out


def radon_operator(shape: GridShape, n_angles: int, n_detectors: int,
                   angular_span_degrees: float = 180.0) -> RadonOperator:
    return RadonOperator(shape, n_angles, n_detectors, angular_span_degrees)


class ComposedMap(LinearMap):
    def __init__(self, outer: LinearMap, inner: LinearMap):
        if outer.domain_dim != inner.codomain_dim:
            raise ValueError(
                f"cannot compose: outer domain {outer.domain_dim} != inner codomain {inner.codomain_dim}"
            )
        super().__init__(inner.domain_dim, outer.codomain_dim)
        self.outer = outer
        self.inner = inner

    def _apply(self, x):
        return self.outer.apply(self.inner.apply(x))

    def _adjoint(self, w):
        return self.inner.adjoint_apply(self.outer.adjoint_apply(w))


class ScaledMap(LinearMap):
    def __init__(self, a: float, op: LinearMap):
        super().__init__(op.domain_dim, op.codomain_dim)
        self.a = float(a)
        self.op = op

    def _apply(self, x):
        return self.a * self.op.apply(x)

    def _adjoint(self, w):
        return self.a * self.op.adjoint_apply(w)


def compose(outer: LinearMap, inner: LinearMap) -> LinearMap:
    return ComposedMap(outer, inner)


def scale(a: float, op: LinearMap) -> LinearMap:
    return ScaledMap(a, op)


class OpCounter:
    """Mutable forward/adjoint call tally for audit instrumentation."""

    __slots__ = ("forward_calls", "adjoint_calls")

    def __init__(self):
        self.forward_calls = 0
        self.adjoint_calls = 0

    def reset(self):
        self.forward_calls = 0
        self.adjoint_calls = 0

    def snapshot(self):
        return {"forward_calls": self.forward_calls, "adjoint_calls": self.adjoint_calls}


class CountingLinearMap(LinearMap):
    """Wrapper that counts every applied action of the wrapped operator.

    One call on a batch of k vectors counts as k applications.
    """

    def __init__(self, op: LinearMap, counter: OpCounter | None = None):
        super().__init__(op.domain_dim, op.codomain_dim)
        self.op = op
        self.counter = counter if counter is not None else OpCounter()

    def _apply(self, x):
        self.counter.forward_calls += x.shape[0]
        return self.op.apply(x)

    def _adjoint(self, w):
        self.counter.adjoint_calls += w.shape[0]
        return self.op.adjoint_apply(w)


class WrongAdjointMap(LinearMap):
    """Negative-control operator whose adjoint deliberately omits the transpose."""

    def __init__(self, op: LinearMap):
        if op.domain_dim != op.codomain_dim:
            raise ValueError("wrong-adjoint control needs a square operator")
        super().__init__(op.domain_dim, op.codomain_dim)
        self.op = op

    def _apply(self, x):
        return self.op.apply(x)

    def _adjoint(self, w):
        return self.op.apply(w)


@dataclass
class AdjointReport:
    max_defect: float
    trials: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_defect < self.tol


def validate_adjoint(op: LinearMap, trials: int = 100, tol: float = 1e-10,
                     rng=None) -> AdjointReport:
    """Randomized adjoint-consistency check.

    Reports ``max |<Au, w> - <u, A*w>| / (|Au||w| + eps)`` over probe pairs;
    passes iff the maximum relative defect is below ``tol``.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(op.domain_dim)
        w = rng.standard_normal(op.codomain_dim)
        au = op.apply(u)
        atw = op.adjoint_apply(w)
        defect = abs(np.dot(au, w) - np.dot(u, atw))
        scale_ = np.linalg.norm(au) * np.linalg.norm(w) + np.finfo(float).eps
        worst = max(worst, defect / scale_)
    return AdjointReport(max_defect=worst, trials=trials, tol=tol)
