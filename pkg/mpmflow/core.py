"""
Batched dual numbers and small dense 3x3 linear algebra.

A ``Dual`` carries a float64 value array together with one tangent array
per identified material parameter (stacked on a leading axis). Every
operation propagates tangents by the chain rule, so one forward pass of the
simulator yields both the result and its sensitivities.

Vectors and matrices are just Duals whose trailing axes are ``(3,)`` or
``(3, 3)``; a leading batch axis indexes particles or grid nodes.

Usage:
    from mpmflow.core import Dual, svd3, polar_rotation

    E = Dual.seed(1e5, slot=0, n_tangents=1)
    F = Dual.constant(np.eye(3) * 1.1, n_tangents=1)
    R = polar_rotation(F)
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[float, int, np.ndarray, Sequence[float]]

# Singular-value gaps below this are clamped in tangent denominators.
SVD_GAP_FLOOR = 1e-9

_EYE3 = np.eye(3)
_OFFDIAG = ~np.eye(3, dtype=bool)


class NonFiniteError(ValueError):
    """Raised when a decomposition receives NaN or infinite input."""
    pass


class InvertedElementError(ValueError):
    """Raised when a deformation gradient has non-positive determinant."""
    pass


def _lift(tan: np.ndarray, ndim: int) -> np.ndarray:
    """Insert unit axes after the tangent axis so trailing axes broadcast."""
    missing = ndim - (tan.ndim - 1)
    if missing <= 0:
        return tan
    return tan.reshape((tan.shape[0],) + (1,) * missing + tan.shape[1:])


class Dual:
    """
    Value array plus forward-mode tangents.

    ``val`` has shape ``S``; ``tan`` has shape ``(k,) + S`` where ``k`` is the
    number of tangent slots (0 in plain simulation mode).
    """

    __slots__ = ("val", "tan")
    __array_priority__ = 1000.0
    # ndarray and numpy-scalar operators defer to the reflected Dual methods.
    __array_ufunc__ = None

    def __init__(self, val: ArrayLike, tan: np.ndarray = None):
        self.val = np.asarray(val, dtype=np.float64)
        if tan is None:
            tan = np.zeros((0,) + self.val.shape)
        tan = np.asarray(tan, dtype=np.float64)
        if tan.shape[1:] != self.val.shape:
            tan = np.broadcast_to(tan, (tan.shape[0],) + self.val.shape).copy()
        self.tan = tan

    # -- construction ------------------------------------------------------

    @classmethod
    def constant(cls, val: ArrayLike, n_tangents: int = 0) -> "Dual":
        """A value with all-zero tangents."""
        val = np.asarray(val, dtype=np.float64)
        return cls(val, np.zeros((n_tangents,) + val.shape))

    @classmethod
    def seed(cls, val: float, slot: int, n_tangents: int) -> "Dual":
        """A scalar whose tangent is the unit vector at ``slot``."""
        tan = np.zeros(n_tangents)
        tan[slot] = 1.0
        return cls(np.float64(val), tan)

    @property
    def n_tangents(self) -> int:
        return self.tan.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.val.shape

    @property
    def ndim(self) -> int:
        return self.val.ndim

    def with_tangents(self, n_tangents: int) -> "Dual":
        """Return a copy padded with zero tangents up to ``n_tangents`` slots."""
        if self.n_tangents == n_tangents:
            return self
        if self.n_tangents != 0:
            raise ValueError(
                f"Tangent count mismatch: {self.n_tangents} vs {n_tangents}"
            )
        return Dual(self.val, np.zeros((n_tangents,) + self.val.shape))

    def detach(self) -> "Dual":
        """Drop tangents, keeping the value."""
        return Dual(self.val)

    def copy(self) -> "Dual":
        return Dual(self.val.copy(), self.tan.copy())

    def __float__(self) -> float:
        return float(self.val)

    def __repr__(self) -> str:
        return f"Dual(shape={self.shape}, n_tangents={self.n_tangents})"

    # -- arithmetic --------------------------------------------------------

    def __neg__(self) -> "Dual":
        return Dual(-self.val, -self.tan)

    def __add__(self, other) -> "Dual":
        a, b = _pair(self, other)
        val = a.val + b.val
        return Dual(val, _lift(a.tan, val.ndim) + _lift(b.tan, val.ndim))

    __radd__ = __add__

    def __sub__(self, other) -> "Dual":
        a, b = _pair(self, other)
        val = a.val - b.val
        return Dual(val, _lift(a.tan, val.ndim) - _lift(b.tan, val.ndim))

    def __rsub__(self, other) -> "Dual":
        return as_dual(other, self.n_tangents) - self

    def __mul__(self, other) -> "Dual":
        a, b = _pair(self, other)
        val = a.val * b.val
        tan = _lift(a.tan, val.ndim) * b.val + a.val * _lift(b.tan, val.ndim)
        return Dual(val, tan)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Dual":
        a, b = _pair(self, other)
        val = a.val / b.val
        tan = (_lift(a.tan, val.ndim) - val * _lift(b.tan, val.ndim)) / b.val
        return Dual(val, tan)

    def __rtruediv__(self, other) -> "Dual":
        return as_dual(other, self.n_tangents) / self

    def __pow__(self, exponent: float) -> "Dual":
        exponent = float(exponent)
        if exponent == 2.0:
            return Dual(self.val * self.val, 2.0 * self.val * self.tan)
        val = self.val ** exponent
        return Dual(val, exponent * self.val ** (exponent - 1.0) * self.tan)

    def __matmul__(self, other) -> "Dual":
        a, b = _pair(self, other)
        val = a.val @ b.val
        tan = _lift(a.tan, val.ndim) @ b.val + a.val @ _lift(b.tan, val.ndim)
        return Dual(val, tan)

    def __rmatmul__(self, other) -> "Dual":
        return as_dual(other, self.n_tangents) @ self

    # -- shape manipulation ------------------------------------------------

    def __getitem__(self, index) -> "Dual":
        if not isinstance(index, tuple):
            index = (index,)
        return Dual(self.val[index], self.tan[(slice(None),) + index])

    @property
    def T(self) -> "Dual":
        """Swap the last two axes (batched matrix transpose)."""
        return Dual(np.swapaxes(self.val, -1, -2), np.swapaxes(self.tan, -1, -2))

    def reshape(self, *shape) -> "Dual":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        val = self.val.reshape(shape)
        return Dual(val, self.tan.reshape((self.n_tangents,) + val.shape))

    def sum(self, axis=None, keepdims: bool = False) -> "Dual":
        if axis is None:
            flat = self.tan.reshape(self.n_tangents, self.val.size)
            return Dual(self.val.sum(), flat.sum(axis=1))
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax - self.ndim if ax >= 0 else ax for ax in axes)
        return Dual(
            self.val.sum(axis=axes, keepdims=keepdims),
            self.tan.sum(axis=axes, keepdims=keepdims),
        )


def as_dual(x, n_tangents: int = 0) -> Dual:
    """Coerce a float, array or Dual into a Dual."""
    if isinstance(x, Dual):
        return x
    return Dual.constant(x, n_tangents)


def _pair(a, b) -> Tuple[Dual, Dual]:
    a = as_dual(a)
    b = as_dual(b, a.n_tangents)
    if a.n_tangents != b.n_tangents:
        if a.n_tangents == 0:
            a = a.with_tangents(b.n_tangents)
        elif b.n_tangents == 0:
            b = b.with_tangents(a.n_tangents)
        else:
            raise ValueError(
                f"Tangent count mismatch: {a.n_tangents} vs {b.n_tangents}"
            )
    return a, b


# -- elementwise functions -------------------------------------------------


def exp(x) -> Dual:
    x = as_dual(x)
    val = np.exp(x.val)
    return Dual(val, val * x.tan)


def log(x) -> Dual:
    x = as_dual(x)
    return Dual(np.log(x.val), x.tan / x.val)


def sqrt(x) -> Dual:
    x = as_dual(x)
    val = np.sqrt(x.val)
    return Dual(val, x.tan / (2.0 * val))


def cbrt(x) -> Dual:
    x = as_dual(x)
    val = np.cbrt(x.val)
    return Dual(val, x.tan / (3.0 * val * val))


def sin(x) -> Dual:
    x = as_dual(x)
    return Dual(np.sin(x.val), np.cos(x.val) * x.tan)


def cos(x) -> Dual:
    x = as_dual(x)
    return Dual(np.cos(x.val), -np.sin(x.val) * x.tan)


def where(cond: np.ndarray, a, b) -> Dual:
    """Select elementwise; tangents follow the selected branch."""
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    val = np.where(cond, a.val, b.val)
    tan = np.where(cond, _lift(a.tan, val.ndim), _lift(b.tan, val.ndim))
    return Dual(val, np.broadcast_to(tan, (tan.shape[0],) + val.shape).copy())


def clip(x, lo: float, hi: float) -> Dual:
    x = as_dual(x)
    inside = (x.val >= lo) & (x.val <= hi)
    return where(inside, x, Dual.constant(np.clip(x.val, lo, hi), x.n_tangents))


def stack(items: Sequence, axis: int = 0) -> Dual:
    items = list(items)
    k = max(as_dual(item).n_tangents for item in items)
    items = [as_dual(item).with_tangents(k) for item in items]
    val = np.stack([item.val for item in items], axis=axis)
    tan_axis = axis + 1 if axis >= 0 else axis
    return Dual(val, np.stack([item.tan for item in items], axis=tan_axis))


def concatenate(items: Sequence[Dual], axis: int = 0) -> Dual:
    items = list(items)
    k = max(item.n_tangents for item in items)
    items = [item.with_tangents(k) for item in items]
    val = np.concatenate([item.val for item in items], axis=axis)
    tan_axis = axis + 1 if axis >= 0 else axis
    return Dual(val, np.concatenate([item.tan for item in items], axis=tan_axis))


def assemble(parts: Iterable[Tuple[np.ndarray, Dual]], n: int, tail: Tuple[int, ...],
             n_tangents: int) -> Dual:
    """Scatter per-group results back into one batch of length ``n``."""
    val = np.zeros((n,) + tail)
    tan = np.zeros((n_tangents, n) + tail)
    for index, part in parts:
        part = part.with_tangents(n_tangents)
        val[index] = part.val
        tan[:, index] = part.tan
    return Dual(val, tan)


def scatter_add(index: np.ndarray, values: Dual, size: int) -> Dual:
    """
    Sum ``values[i]`` into slot ``index[i]`` of a length-``size`` output.

    Accumulation runs in input order (``np.bincount``), so results are
    bit-reproducible for a fixed input order.
    """
    index = np.asarray(index, dtype=np.int64).ravel()
    tail = values.shape[1:]
    cols = int(np.prod(tail)) if tail else 1
    flat_val = values.val.reshape(len(index), cols)
    val = np.stack(
        [np.bincount(index, weights=flat_val[:, c], minlength=size) for c in range(cols)],
        axis=-1,
    ).reshape((size,) + tail)
    k = values.n_tangents
    flat_tan = values.tan.reshape(k, len(index), cols)
    tan = np.zeros((k, size, cols))
    for s in range(k):
        for c in range(cols):
            tan[s, :, c] = np.bincount(index, weights=flat_tan[s, :, c], minlength=size)
    return Dual(val, tan.reshape((k, size) + tail))


# -- vector / matrix helpers -----------------------------------------------


def identity(batch_shape: Tuple[int, ...] = (), n_tangents: int = 0) -> Dual:
    return Dual.constant(np.broadcast_to(_EYE3, batch_shape + (3, 3)).copy(), n_tangents)


def matvec(m, x) -> Dual:
    """Batched matrix-vector product."""
    return (as_dual(m) @ as_dual(x)[..., None])[..., 0]


def outer(a, b) -> Dual:
    return as_dual(a)[..., :, None] * as_dual(b)[..., None, :]


def dot(a, b) -> Dual:
    return (as_dual(a) * b).sum(axis=-1)


def trace(m) -> Dual:
    m = as_dual(m)
    return m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]


def diag_embed(v) -> Dual:
    """Turn a batch of 3-vectors into diagonal 3x3 matrices."""
    v = as_dual(v)
    return Dual(v.val[..., :, None] * _EYE3, v.tan[..., :, None] * _EYE3)


def diagonal(m) -> Dual:
    m = as_dual(m)
    return Dual(
        np.diagonal(m.val, axis1=-2, axis2=-1).copy(),
        np.diagonal(m.tan, axis1=-2, axis2=-1).copy(),
    )


def det3(m) -> Dual:
    m = as_dual(m)
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def safe_norm(v, axis: int = -1) -> Dual:
    """Euclidean norm with a zero tangent where the norm vanishes."""
    v = as_dual(v)
    sq = (v * v).sum(axis=axis)
    positive = sq.val > 0.0
    root = sqrt(where(positive, sq, 1.0))
    return where(positive, root, 0.0)


def deviatoric(m) -> Dual:
    m = as_dual(m)
    return m - (trace(m) / 3.0)[..., None, None] * _EYE3


def symmetric(m) -> Dual:
    m = as_dual(m)
    return 0.5 * (m + m.T)


# -- decompositions --------------------------------------------------------


def _clamp_gap(gap: np.ndarray) -> np.ndarray:
    return np.where(
        np.abs(gap) < SVD_GAP_FLOOR, np.where(gap < 0.0, -SVD_GAP_FLOOR, SVD_GAP_FLOOR), gap
    )


@dataclass
class Svd3:
    """
    Sign-fixed SVD of a batch of 3x3 matrices: ``m = U diag(sigma) V^T``.

    ``det(U) = det(V) = +1`` and ``sigma`` is descending; the last singular
    value carries the sign of ``det(m)``.
    """
    U: Dual
    sigma: Dual
    V: Dual
    projected_tangent: np.ndarray = field(repr=False, default=None)

    def reconstruct(self, sigma_new) -> Dual:
        """
        Build ``U diag(sigma_new) V^T`` where ``sigma_new`` is an isotropic
        function of ``sigma``.

        The off-diagonal tangent splits into a symmetric divided-difference
        part and an antisymmetric part; the latter never divides by a gap.
        """
        sigma_new = as_dual(sigma_new)
        dp = self.projected_tangent
        if dp.shape[0] == 0 and sigma_new.n_tangents > 0:
            dp = np.zeros((sigma_new.n_tangents,) + dp.shape[1:])
        sigma_new = sigma_new.with_tangents(dp.shape[0])
        u, v = self.U.val, self.V.val
        vt = np.swapaxes(v, -1, -2)
        s = self.sigma.val
        sn = np.broadcast_to(sigma_new.val, s.shape)

        val = u @ (sn[..., :, None] * vt)

        dpt = np.swapaxes(dp, -1, -2)
        si, sj = s[..., :, None], s[..., None, :]
        sni, snj = sn[..., :, None], sn[..., None, :]
        sym_coef = (snj - sni) / _clamp_gap(sj - si)
        skew_coef = (sni + snj) / _clamp_gap(si + sj)
        inner = 0.5 * sym_coef * (dp + dpt) + 0.5 * skew_coef * (dp - dpt)
        inner = np.where(_OFFDIAG, inner, 0.0)
        dsn = np.broadcast_to(sigma_new.tan, dp.shape[:-1])
        inner = inner + dsn[..., :, None] * _EYE3
        tan = u @ inner @ vt
        return Dual(val, tan)


def svd3(m) -> Svd3:
    """
    Batched sign-fixed SVD with tangents propagated through U, sigma and V.

    Raises NonFiniteError on NaN/inf input.
    """
    m = as_dual(m)
    if not np.all(np.isfinite(m.val)):
        raise NonFiniteError("svd3 received non-finite matrix entries")
    batch = m.shape[:-2]
    k = m.n_tangents
    a = m.val.reshape(-1, 3, 3)

    u, s, vh = np.linalg.svd(a)
    v = np.swapaxes(vh, -1, -2).copy()
    flip_u = np.linalg.det(u) < 0.0
    u[flip_u, :, 2] *= -1.0
    s[flip_u, 2] *= -1.0
    flip_v = np.linalg.det(v) < 0.0
    v[flip_v, :, 2] *= -1.0
    s[flip_v, 2] *= -1.0

    da = m.tan.reshape(k, a.shape[0], 3, 3)
    ut = np.swapaxes(u, -1, -2)
    dp = ut @ da @ v
    dpt = np.swapaxes(dp, -1, -2)
    dsigma = np.diagonal(dp, axis1=-2, axis2=-1).copy()

    si, sj = s[:, :, None], s[:, None, :]
    denom = _clamp_gap(sj - si) * _clamp_gap(sj + si)
    omega_u = np.where(_OFFDIAG, (sj * dp + si * dpt) / denom, 0.0)
    omega_v = np.where(_OFFDIAG, (si * dp + sj * dpt) / denom, 0.0)
    du = u @ omega_u
    dv = v @ omega_v

    return Svd3(
        U=Dual(u.reshape(batch + (3, 3)), du.reshape((k,) + batch + (3, 3))),
        sigma=Dual(s.reshape(batch + (3,)), dsigma.reshape((k,) + batch + (3,))),
        V=Dual(v.reshape(batch + (3, 3)), dv.reshape((k,) + batch + (3, 3))),
        projected_tangent=dp.reshape((k,) + batch + (3, 3)),
    )


def polar_rotation(m) -> Dual:
    """Rotation factor ``R = U V^T`` of the polar decomposition."""
    m = as_dual(m)
    dets = np.linalg.det(m.val) if np.all(np.isfinite(m.val)) else None
    if dets is None:
        raise NonFiniteError("polar_rotation received non-finite matrix entries")
    if np.any(dets <= 0.0):
        raise InvertedElementError(
            f"polar_rotation requires det > 0, got min det {float(np.min(dets)):.3e}"
        )
    decomposition = svd3(m)
    return decomposition.reconstruct(np.ones(m.shape[:-1]))


def finite_difference(fn, theta: float, step: float = None) -> float:
    """Central difference of a scalar function; step defaults to 1e-5*max(1,|theta|)."""
    h = step if step is not None else 1e-5 * max(1.0, abs(theta))
    return (fn(theta + h) - fn(theta - h)) / (2.0 * h)


__all__: List[str] = [
    "Dual",
    "Svd3",
    "NonFiniteError",
    "InvertedElementError",
    "SVD_GAP_FLOOR",
    "as_dual",
    "exp",
    "log",
    "sqrt",
    "cbrt",
    "sin",
    "cos",
    "where",
    "clip",
    "stack",
    "concatenate",
    "assemble",
    "scatter_add",
    "identity",
    "matvec",
    "outer",
    "dot",
    "trace",
    "diag_embed",
    "diagonal",
    "det3",
    "safe_norm",
    "deviatoric",
    "symmetric",
    "svd3",
    "polar_rotation",
    "finite_difference",
]
