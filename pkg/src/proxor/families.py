"""Parametric families for the treatment bridge q(A, Z, X) and the outcome
bridge h(A, W, X).

Every family exposes the same small surface:

``features(a, v, x)``
    the linear design of the family (n x dim).  It doubles as the default
    moment weight, with the opposite proxy plugged in for ``v``.
``value(a, v, x, theta)``
    the bridge evaluated row-wise.
``gradient(a, v, x, theta)``
    d value / d theta, row-wise (n x dim).

Treatment arrays ``a`` hold integer level codes (0/1 in the binary case).
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, InvalidSpec


def _mat(v, n):
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = np.full((n, 1), float(arr))
    elif arr.ndim == 1:
        arr = arr.reshape(n, -1) if n else arr.reshape(0, -1)
    return arr


def _prep(a, v, x):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    n = a.shape[0]
    v = _mat(v, n)
    x = np.zeros((n, 0)) if x is None else _mat(x, n)
    if v.shape[0] != n or x.shape[0] != n:
        raise DimensionMismatch("a, proxy and x must have the same number of rows")
    return a, v, x


def _dummies(a, n_levels):
    return np.column_stack([(a == j).astype(float) for j in range(1, n_levels)]) if n_levels > 1 \
        else np.zeros((a.shape[0], 0))


class BridgeSpec:
    family = "abstract"
    dim = 0

    def features(self, a, v, x):
        raise NotImplementedError

    def value(self, a, v, x, theta):
        raise NotImplementedError

    def gradient(self, a, v, x, theta):
        raise NotImplementedError

    def is_linear(self) -> bool:
        return False

    def restart_params(self, a, ref, v, x):
        """Data-driven starting point tried when Newton stalls from zero."""
        return None

    def describe(self) -> dict:
        return {"family": self.family, "dim": self.dim}

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.dim:
            raise DimensionMismatch(f"{self.family} expects {self.dim} parameters, got {theta.shape[0]}")
        return theta


class ZeroBridge(BridgeSpec):
    """The constant-zero bridge; stands in for an absent nuisance model."""

    family = "Zero"
    dim = 0

    def features(self, a, v, x):
        a, _, _ = _prep(a, v, x)
        return np.zeros((a.shape[0], 0))

    def value(self, a, v, x, theta=()):
        a, _, _ = _prep(a, v, x)
        return np.zeros(a.shape[0])

    def gradient(self, a, v, x, theta=()):
        return self.features(a, v, x)

    def is_linear(self):
        return True

    def __repr__(self):
        return "ZeroBridge()"


class LinearBasis(BridgeSpec):
    """Bridge linear in its parameters: value = basis(a, v, x) @ theta."""

    family = "LinearBasis"

    def __init__(self, basis, dim, name="custom"):
        self.basis = basis
        self.dim = int(dim)
        self.name = name

    def features(self, a, v, x):
        a, v, x = _prep(a, v, x)
        f = np.asarray(self.basis(a, v, x), dtype=float)
        if f.shape != (a.shape[0], self.dim):
            raise DimensionMismatch(f"basis returned shape {f.shape}, expected {(a.shape[0], self.dim)}")
        return f

    def value(self, a, v, x, theta):
        return self.features(a, v, x) @ self._check_theta(theta)

    def gradient(self, a, v, x, theta=None):
        return self.features(a, v, x)

    def is_linear(self):
        return True

    def describe(self):
        return {"family": self.family, "dim": self.dim, "name": self.name}

    def __repr__(self):
        return f"LinearBasis(name={self.name!r}, dim={self.dim})"


class SaturatedBinary(LinearBasis):
    """Saturated model for a binary proxy and categorical X.

    Within each X level the design is (1, A, V, A*V); for a treatment with
    more than two levels A is replaced by its level dummies.
    """

    family = "SaturatedBinary"

    def __init__(self, levels=None, n_a_levels=2):
        levels = np.zeros((1, 0)) if levels is None else np.asarray(levels, dtype=float)
        if levels.ndim == 1:
            levels = levels.reshape(-1, 1)
        self.levels = levels
        self.n_a_levels = int(n_a_levels)
        self.block = 2 * self.n_a_levels
        self.dim = self.block * levels.shape[0]
        self.name = "saturated"

    @classmethod
    def for_sample(cls, sample, n_a_levels=2):
        if sample.d == 0:
            return cls(None, n_a_levels)
        return cls(np.unique(sample.x, axis=0), n_a_levels)

    def _level_index(self, x):
        if self.levels.shape[1] != x.shape[1]:
            raise DimensionMismatch(f"x has {x.shape[1]} columns, levels have {self.levels.shape[1]}")
        if x.shape[1] == 0:
            return np.zeros(x.shape[0], dtype=int)
        hit = np.all(x[:, None, :] == self.levels[None, :, :], axis=2)
        found = hit.any(axis=1)
        if not found.all():
            bad = np.flatnonzero(~found)[0]
            raise InvalidSpec(f"row {bad}: covariate value {x[bad].tolist()} is not a known level")
        return hit.argmax(axis=1)

    def features(self, a, v, x):
        a, v, x = _prep(a, v, x)
        if v.shape[1] != 1:
            raise DimensionMismatch("saturated bridge needs a single binary proxy column")
        vv = v[:, 0]
        if not np.isin(vv, (0.0, 1.0)).all():
            raise InvalidSpec("saturated bridge needs a binary proxy")
        d = _dummies(a, self.n_a_levels)
        local = np.column_stack([np.ones_like(vv), d, vv, d * vv[:, None]])
        idx = self._level_index(x)
        out = np.zeros((a.shape[0], self.dim))
        for lev in range(self.levels.shape[0]):
            rows = idx == lev
            out[rows, lev * self.block:(lev + 1) * self.block] = local[rows]
        return out

    def describe(self):
        return {"family": self.family, "dim": self.dim, "levels": self.levels.tolist(),
                "n_a_levels": self.n_a_levels}

    def __repr__(self):
        return f"SaturatedBinary(levels={self.levels.shape[0]}, n_a_levels={self.n_a_levels})"


class _IndexFamily(BridgeSpec):
    def __init__(self, proxy_dim, x_dim=0, use_x=True, n_a_levels=2):
        self.proxy_dim = int(proxy_dim)
        self.x_dim = int(x_dim)
        self.use_x = bool(use_x)
        self.n_a_levels = int(n_a_levels)
        self.dim = 1 + (self.n_a_levels - 1) + self.proxy_dim + (self.x_dim if self.use_x else 0)

    def features(self, a, v, x):
        a, v, x = _prep(a, v, x)
        if v.shape[1] != self.proxy_dim:
            raise DimensionMismatch(f"proxy has {v.shape[1]} columns, expected {self.proxy_dim}")
        cols = [np.ones((a.shape[0], 1)), _dummies(a, self.n_a_levels), v]
        if self.use_x:
            if x.shape[1] != self.x_dim:
                raise DimensionMismatch(f"x has {x.shape[1]} columns, expected {self.x_dim}")
            cols.append(x)
        return np.hstack(cols)

    def describe(self):
        return {"family": self.family, "dim": self.dim, "proxy_dim": self.proxy_dim,
                "x_dim": self.x_dim, "use_x": self.use_x}

    def __repr__(self):
        return (f"{type(self).__name__}(proxy_dim={self.proxy_dim}, x_dim={self.x_dim}, "
                f"use_x={self.use_x})")


class InverseLogisticTreatment(_IndexFamily):
    """q(a, z, x) = 1 + exp{(1 - 2a)(tau0 + tauA a + tauZ'z + tauX'x)}; always > 1."""

    family = "InverseLogisticTreatment"

    def __init__(self, proxy_dim, x_dim=0, use_x=True):
        super().__init__(proxy_dim, x_dim, use_x, n_a_levels=2)

    @classmethod
    def for_sample(cls, sample, use_x=True):
        return cls(sample.p, sample.d, use_x)

    def restart_params(self, a, ref, v, x):
        # logistic fit of A on the non-A columns among reference rows gives
        # q(a) = 1 / P(A=a | Z, X, Y=0) inside the family (tauA = 0)
        f = self.features(a, v, x)
        keep = ref > 0
        cols = [j for j in range(self.dim) if j != 1]
        b = logistic_irls(f[keep][:, cols], a[keep])
        if b is None:
            return None
        out = np.zeros(self.dim)
        out[cols] = b
        return out

    def value(self, a, v, x, theta):
        f = self.features(a, v, x)
        sign = 1.0 - 2.0 * np.atleast_1d(np.asarray(a, dtype=float))
        return 1.0 + np.exp(sign * (f @ self._check_theta(theta)))

    def gradient(self, a, v, x, theta):
        f = self.features(a, v, x)
        sign = 1.0 - 2.0 * np.atleast_1d(np.asarray(a, dtype=float))
        e = np.exp(sign * (f @ self._check_theta(theta)))
        return (sign * e)[:, None] * f


class LogLinearOutcome(_IndexFamily):
    """h(a, w, x) = exp(psi0 + psiA a + psiW'w + psiX'x); always > 0."""

    family = "LogLinearOutcome"

    @classmethod
    def for_sample(cls, sample, use_x=True, n_a_levels=2):
        return cls(sample.r, sample.d, use_x, n_a_levels)

    def value(self, a, v, x, theta):
        return np.exp(self.features(a, v, x) @ self._check_theta(theta))

    def gradient(self, a, v, x, theta):
        f = self.features(a, v, x)
        return np.exp(f @ self._check_theta(theta))[:, None] * f


def logistic_irls(design, target, max_iter=50, tol=1e-10):
    """Maximum-likelihood logistic coefficients by IRLS (None on failure)."""
    beta = np.zeros(design.shape[1])
    for _ in range(max_iter):
        eta = np.clip(design @ beta, -30, 30)
        p = 1.0 / (1.0 + np.exp(-eta))
        wgt = p * (1 - p)
        hess = design.T @ (design * wgt[:, None])
        try:
            step = np.linalg.solve(hess, design.T @ (target - p))
        except np.linalg.LinAlgError:
            return None
        beta += step
        if np.max(np.abs(step)) < tol:
            break
    return beta if np.all(np.isfinite(beta)) else None
