"""Forward-mode scalars carrying a value, a local gradient, and an optional
local Hessian through overloaded arithmetic.

An ActiveScalar tracks derivatives with respect to a small, fixed set of K
local variables. `grad` has trailing shape (K,), `hess` trailing shape (K, K).
Every field may carry extra leading batch axes; arithmetic broadcasts over
them, so one expression evaluates a whole batch of independent elements at
once. Inside this module three internal encodings matter:

* grad is None          -> passive value (a constant; nothing is tracked)
* hess is None          -> first-order mode (no curvature tracked)
* hess is the float 0.0 -> second-order mode with an exactly-zero Hessian,
                           kept scalar until a product rule materializes it

Out-of-domain inputs (log of a negative, division by zero, ...) produce
non-finite values that propagate silently; callers reject them at the line
search rather than via exceptions.

Hessians are bitwise symmetric by construction: every second-order update is
either a symmetric rescale or a sum of products x_i*y_j arranged so the (i, j)
and (j, i) entries add identical terms in identical order.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ActiveScalar",
    "ActiveVec",
    "SmallMatrix",
    "abs_",
    "cos",
    "exp",
    "lift",
    "log",
    "positive_guard",
    "project_psd",
    "sin",
    "sqrt",
]


def _col(s):
    """Shape a per-lane factor for multiplying a gradient: (...,) -> (..., 1)."""
    return s if np.ndim(s) == 0 else s[..., None]


def _col2(s):
    """Shape a per-lane factor for multiplying a Hessian: (...,) -> (..., 1, 1)."""
    return s if np.ndim(s) == 0 else s[..., None, None]


def _h_scale(h, s):
    if isinstance(h, np.ndarray):
        return h * _col2(s)
    return h  # None stays None, scalar zero stays zero


def _h_neg(h):
    return -h if isinstance(h, np.ndarray) else h


def _h_add(a, b):
    a_arr = isinstance(a, np.ndarray)
    b_arr = isinstance(b, np.ndarray)
    if a_arr and b_arr:
        return a + b
    if a_arr:
        return a
    if b_arr:
        return b
    if a is None and b is None:
        return None
    return 0.0


def _h_sub(a, b):
    a_arr = isinstance(a, np.ndarray)
    b_arr = isinstance(b, np.ndarray)
    if a_arr and b_arr:
        return a - b
    if a_arr:
        return a
    if b_arr:
        return -b
    if a is None and b is None:
        return None
    return 0.0


def _outer(g):
    return g[..., :, None] * g[..., None, :]


def _outer_sym(x, y):
    """x y^T + y x^T; entries (i, j) and (j, i) add the same two products in
    the same order, so the result is bitwise symmetric."""
    return x[..., :, None] * y[..., None, :] + y[..., :, None] * x[..., None, :]


class ActiveScalar:
    __slots__ = ("value", "grad", "hess")

    # Refuse numpy's elementwise dispatch so `ndarray <op> ActiveScalar`
    # falls back to our reflected operators instead of building object arrays.
    __array_ufunc__ = None

    def __init__(self, value, grad=None, hess=None):
        self.value = value
        self.grad = grad
        self.hess = hess

    @property
    def passive(self) -> bool:
        return self.grad is None

    def __repr__(self) -> str:
        mode = "passive" if self.grad is None else ("grad" if self.hess is None else "grad+hess")
        return f"ActiveScalar({self.value!r}, {mode})"

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, ActiveScalar):
            v = self.value + other.value
            if self.grad is None:
                return ActiveScalar(v, other.grad, other.hess)
            if other.grad is None:
                return ActiveScalar(v, self.grad, self.hess)
            return ActiveScalar(v, self.grad + other.grad, _h_add(self.hess, other.hess))
        return ActiveScalar(self.value + other, self.grad, self.hess)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, ActiveScalar):
            v = self.value - other.value
            if other.grad is None:
                return ActiveScalar(v, self.grad, self.hess)
            if self.grad is None:
                return ActiveScalar(v, -other.grad, _h_neg(other.hess))
            return ActiveScalar(v, self.grad - other.grad, _h_sub(self.hess, other.hess))
        return ActiveScalar(self.value - other, self.grad, self.hess)

    def __rsub__(self, other):
        if self.grad is None:
            return ActiveScalar(other - self.value)
        return ActiveScalar(other - self.value, -self.grad, _h_neg(self.hess))

    def __neg__(self):
        if self.grad is None:
            return ActiveScalar(-self.value)
        return ActiveScalar(-self.value, -self.grad, _h_neg(self.hess))

    def __mul__(self, other):
        if isinstance(other, ActiveScalar):
            av, bv = self.value, other.value
            v = av * bv
            if other.grad is None:
                if self.grad is None:
                    return ActiveScalar(v)
                return ActiveScalar(v, self.grad * _col(bv), _h_scale(self.hess, bv))
            if self.grad is None:
                return ActiveScalar(v, other.grad * _col(av), _h_scale(other.hess, av))
            g = self.grad * _col(bv) + other.grad * _col(av)
            if self.hess is None and other.hess is None:
                return ActiveScalar(v, g)
            h = _h_add(
                _h_add(_h_scale(self.hess, bv), _h_scale(other.hess, av)),
                _outer_sym(self.grad, other.grad),
            )
            return ActiveScalar(v, g, h)
        if self.grad is None:
            return ActiveScalar(self.value * other)
        return ActiveScalar(self.value * other, self.grad * _col(other), _h_scale(self.hess, other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, ActiveScalar):
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                u = np.divide(1.0, other.value)
                v = self.value * u
                if other.grad is None:
                    if self.grad is None:
                        return ActiveScalar(v)
                    return ActiveScalar(v, self.grad * _col(u), _h_scale(self.hess, u))
                if self.grad is None:
                    g = other.grad * _col(-v * u)
                    if other.hess is None:
                        return ActiveScalar(v, g)
                    h = _h_add(_h_scale(other.hess, -v * u), _outer(other.grad) * _col2(2.0 * v * u * u))
                    return ActiveScalar(v, g, h)
                g = (self.grad - _col(v) * other.grad) * _col(u)
                if self.hess is None and other.hess is None:
                    return ActiveScalar(v, g)
                h = _h_add(
                    _h_add(_h_scale(self.hess, u), _h_scale(other.hess, -v * u)),
                    _h_add(
                        _outer_sym(self.grad, other.grad) * _col2(-u * u),
                        _outer(other.grad) * _col2(2.0 * v * u * u),
                    ),
                )
                return ActiveScalar(v, g, h)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.divide(1.0, other)
        if self.grad is None:
            return ActiveScalar(self.value * u)
        return ActiveScalar(self.value * u, self.grad * _col(u), _h_scale(self.hess, u))

    def __rtruediv__(self, other):
        # other / self with passive numerator
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            u = np.divide(1.0, self.value)
            v = other * u
            if self.grad is None:
                return ActiveScalar(v)
            g = self.grad * _col(-v * u)
            if self.hess is None:
                return ActiveScalar(v, g)
            h = _h_add(_h_scale(self.hess, -v * u), _outer(self.grad) * _col2(2.0 * v * u * u))
            return ActiveScalar(v, g, h)

    def __pow__(self, p):
        if not isinstance(p, (int, np.integer)):
            raise TypeError("only integer exponents are supported")
        if p == 0:
            return ActiveScalar(np.ones_like(np.asarray(self.value, dtype=float)))
        if p == 1:
            return self
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            v = self.value
            f0 = v ** p
            if self.grad is None:
                return ActiveScalar(f0)
            f1 = p * v ** (p - 1)
            g = self.grad * _col(f1)
            if self.hess is None:
                return ActiveScalar(f0, g)
            f2 = p * (p - 1) * v ** (p - 2)
            h = _h_add(_h_scale(self.hess, f1), _outer(self.grad) * _col2(f2))
        return ActiveScalar(f0, g, h)

    def __abs__(self):
        s = np.sign(self.value)  # sign(0) = 0: derivative at the kink is taken as 0
        if self.grad is None:
            return ActiveScalar(np.abs(self.value))
        return ActiveScalar(np.abs(self.value), self.grad * _col(s), _h_scale(self.hess, s))


def _chain(a: ActiveScalar, f0, f1, f2) -> ActiveScalar:
    """Apply the chain rule for a scalar function with derivatives f1, f2 at a.value."""
    g = a.grad * _col(f1)
    if a.hess is None:
        return ActiveScalar(f0, g)
    h = _h_add(_h_scale(a.hess, f1), _outer(a.grad) * _col2(f2))
    return ActiveScalar(f0, g, h)


def sqrt(a):
    if not isinstance(a, ActiveScalar):
        return np.sqrt(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        f0 = np.sqrt(a.value)
        if a.grad is None:
            return ActiveScalar(f0)
        f1 = 0.5 / f0
        f2 = None if a.hess is None else -0.5 * f1 / a.value
        return _chain(a, f0, f1, f2)


def log(a):
    if not isinstance(a, ActiveScalar):
        return np.log(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        f0 = np.log(a.value)
        if a.grad is None:
            return ActiveScalar(f0)
        f1 = 1.0 / a.value
        f2 = None if a.hess is None else -f1 * f1
        return _chain(a, f0, f1, f2)


def exp(a):
    if not isinstance(a, ActiveScalar):
        return np.exp(a)
    with np.errstate(over="ignore"):
        f0 = np.exp(a.value)
        if a.grad is None:
            return ActiveScalar(f0)
        return _chain(a, f0, f0, f0)


def sin(a):
    if not isinstance(a, ActiveScalar):
        return np.sin(a)
    f0 = np.sin(a.value)
    if a.grad is None:
        return ActiveScalar(f0)
    return _chain(a, f0, np.cos(a.value), -f0)


def cos(a):
    if not isinstance(a, ActiveScalar):
        return np.cos(a)
    f0 = np.cos(a.value)
    if a.grad is None:
        return ActiveScalar(f0)
    return _chain(a, f0, -np.sin(a.value), -f0)


def abs_(a):
    if not isinstance(a, ActiveScalar):
        return np.abs(a)
    return abs(a)


def positive_guard(a: ActiveScalar) -> ActiveScalar:
    """NaN out lanes whose value is not strictly positive.

    Used by energies whose formula stays finite on infeasible states (for
    example a flipped element with negative determinant): the poisoned value
    makes the trial energy non-finite so the line search rejects the step.
    """
    v = np.where(np.asarray(a.value) > 0.0, a.value, np.nan)
    return ActiveScalar(v, a.grad, a.hess)


def lift(values, with_hessian: bool = True) -> list[ActiveScalar]:
    """Seed K independent variables: entry i gets value values[i], gradient
    e_i, and a zero Hessian (tracked only when `with_hessian`)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 1:
        raise ValueError("lift expects a 1-D sequence of at least one value")
    k = values.size
    out = []
    for i in range(k):
        g = np.zeros(k)
        g[i] = 1.0
        out.append(ActiveScalar(values[i], g, 0.0 if with_hessian else None))
    return out


class ActiveVec:
    """Fixed-length vector of ActiveScalar components (typically 2 or 3)."""

    __slots__ = ("comps",)
    __array_ufunc__ = None

    def __init__(self, comps):
        self.comps = tuple(comps)

    def __len__(self) -> int:
        return len(self.comps)

    def __iter__(self):
        return iter(self.comps)

    def __getitem__(self, i) -> ActiveScalar:
        return self.comps[i]

    def _other_comp(self, other, i):
        if isinstance(other, ActiveVec):
            return other.comps[i]
        arr = np.asarray(other)
        return arr[..., i]

    def __add__(self, other):
        return ActiveVec(c + self._other_comp(other, i) for i, c in enumerate(self.comps))

    __radd__ = __add__

    def __sub__(self, other):
        return ActiveVec(c - self._other_comp(other, i) for i, c in enumerate(self.comps))

    def __rsub__(self, other):
        return ActiveVec(self._other_comp(other, i) - c for i, c in enumerate(self.comps))

    def __neg__(self):
        return ActiveVec(-c for c in self.comps)

    def __mul__(self, s):
        return ActiveVec(c * s for c in self.comps)

    __rmul__ = __mul__

    def __truediv__(self, s):
        return ActiveVec(c / s for c in self.comps)

    def dot(self, other):
        total = self.comps[0] * self._other_comp(other, 0)
        for i in range(1, len(self.comps)):
            total = total + self.comps[i] * self._other_comp(other, i)
        return total

    def norm2(self):
        total = self.comps[0] * self.comps[0]
        for c in self.comps[1:]:
            total = total + c * c
        return total

    def norm(self):
        return sqrt(self.norm2())

    def normalized(self):
        return self / self.norm()

    def cross(self, other):
        if len(self.comps) != 3:
            raise ValueError("cross product needs 3-D vectors")
        a0, a1, a2 = self.comps
        b0 = self._other_comp(other, 0)
        b1 = self._other_comp(other, 1)
        b2 = self._other_comp(other, 2)
        return ActiveVec([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])


class SmallMatrix:
    """Dense 2x2 or 3x3 matrix whose entries are ActiveScalar or plain values."""

    __slots__ = ("rows",)
    __array_ufunc__ = None

    def __init__(self, rows):
        rows = [list(r) for r in rows]
        n = len(rows)
        if n not in (2, 3) or any(len(r) != n for r in rows):
            raise ValueError("SmallMatrix must be 2x2 or 3x3")
        self.rows = rows

    @classmethod
    def from_columns(cls, *cols):
        n = len(cols)
        return cls([[cols[j][i] for j in range(n)] for i in range(n)])

    @property
    def dim(self) -> int:
        return len(self.rows)

    def __getitem__(self, ij):
        i, j = ij
        return self.rows[i][j]

    def det(self):
        r = self.rows
        if self.dim == 2:
            return r[0][0] * r[1][1] - r[0][1] * r[1][0]
        return (
            r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
        )

    def inverse(self):
        if self.dim != 2:
            raise ValueError("inverse is implemented for 2x2 matrices only")
        d = self.det()
        r = self.rows
        return SmallMatrix([[r[1][1] / d, -r[0][1] / d], [-r[1][0] / d, r[0][0] / d]])

    def frobenius2(self):
        total = 0.0
        for row in self.rows:
            for e in row:
                total = e * e + total
        return total

    def __matmul__(self, other):
        n = self.dim
        if isinstance(other, SmallMatrix):
            if other.dim != n:
                raise ValueError("dimension mismatch")
            get = lambda i, j: other.rows[i][j]
        else:
            arr = np.asarray(other)
            get = lambda i, j: arr[..., i, j]
        out = []
        for i in range(n):
            row = []
            for j in range(n):
                acc = self.rows[i][0] * get(0, j)
                for k in range(1, n):
                    acc = acc + self.rows[i][k] * get(k, j)
                row.append(acc)
            out.append(row)
        return SmallMatrix(out)


def project_psd(h, floor: float) -> np.ndarray:
    """Project a symmetric matrix (or batch of them) onto the cone of matrices
    whose eigenvalues are all at least `floor`.

    Eigendecompose, clamp the spectrum from below, recompose, and average with
    the transpose so the output is bitwise symmetric.
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    h = np.asarray(h, dtype=np.float64)
    w, q = np.linalg.eigh(h)
    w = np.maximum(w, floor)
    out = np.einsum("...ij,...j,...kj->...ik", q, w, q)
    # IEEE addition commutes, so averaging with the transpose is bitwise symmetric
    return 0.5 * (out + np.swapaxes(out, -1, -2))
