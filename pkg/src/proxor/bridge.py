"""Estimation of the confounding bridges by solving their empirical moment
equations.

Treatment bridge q solves, over outcome-free rows (reference outcome),

    mean_i 1(Y_i = y0) { k1(A_i, W_i, X_i) q(A_i, Z_i, X_i) - sum_j k1(a_j, W_i, X_i) } = 0

and each outcome bridge h solves

    mean_i k2(A_i, Z_i, X_i) { 1(Y_i = y0) h(A_i, W_i, X_i) - 1(Y_i = y_k) } = 0.

Binary data is the case a in {0, 1}, y0 = 0, y_k = 1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from .data import MomentWeights, SelectedSample, SolverOptions
from .errors import DegenerateStratum, DimensionMismatch, NoConvergence, SingularJacobian
from .families import BridgeSpec, ZeroBridge

log = logging.getLogger(__name__)


@dataclass
class BridgeFit:
    spec: BridgeSpec
    params: np.ndarray
    role: str  # "q" or "h"
    residual_norm: float = 0.0
    jacobian_condition: float = 1.0
    converged: bool = True
    iterations: int = 0
    method: str = "newton"
    # moment weight used to fit the bridge; None for fixed bridges
    kappa: Optional[object] = None
    info: dict = field(default_factory=dict)

    @classmethod
    def zero(cls, role: str) -> "BridgeFit":
        return cls(ZeroBridge(), np.zeros(0), role, method="fixed")

    @classmethod
    def fixed(cls, spec, params, role) -> "BridgeFit":
        """Wrap known parameters (e.g. population values) as a fit."""
        return cls(spec, np.asarray(params, dtype=float), role, method="fixed")

    @property
    def is_zero(self) -> bool:
        return isinstance(self.spec, ZeroBridge)

    def __call__(self, a, v, x=None):
        return self.spec.value(a, v, x, self.params)

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "spec": self.spec.describe(),
            "params": [float(t) for t in self.params],
            "residual_norm": float(self.residual_norm),
            "jacobian_condition": float(self.jacobian_condition),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "method": self.method,
        }


def _scalar_or_array(out, a):
    return float(out[0]) if np.ndim(a) == 0 else out


def eval_q(fit: BridgeFit, a, z, x=None):
    """q(a, z, x; tau) at one point (scalars) or row-wise (arrays)."""
    if fit.role != "q":
        raise DimensionMismatch("eval_q needs a treatment-bridge fit")
    return _scalar_or_array(fit.spec.value(np.atleast_1d(a), z, x, fit.params), a)


def eval_h(fit: BridgeFit, a, w, x=None):
    """h(a, w, x; psi) at one point (scalars) or row-wise (arrays)."""
    if fit.role != "h":
        raise DimensionMismatch("eval_h needs an outcome-bridge fit")
    return _scalar_or_array(fit.spec.value(np.atleast_1d(a), w, x, fit.params), a)


# ---------------------------------------------------------------------------
# moment equations


class QMoment:
    """Empirical treatment-bridge moment and its analytic Jacobian."""

    def __init__(self, a, ref, z, w, x, spec, kappa1, a_levels=(0, 1)):
        self.a, self.ref, self.z, self.w, self.x = a, ref, z, w, x
        self.v = z
        self.spec = spec
        self.n = a.shape[0]
        self.k = np.asarray(kappa1(a, w, x), dtype=float)
        if self.k.shape != (self.n, spec.dim):
            raise DimensionMismatch(
                f"kappa1 has shape {self.k.shape}, expected {(self.n, spec.dim)}"
            )
        base = np.zeros_like(self.k)
        for lev in a_levels:
            base += kappa1(np.full(self.n, float(lev)), w, x)
        self.base = base

    def rows(self, tau):
        q = self.spec.value(self.a, self.z, self.x, tau)
        return self.ref[:, None] * (self.k * q[:, None] - self.base)

    def __call__(self, tau):
        q = self.spec.value(self.a, self.z, self.x, tau)
        return (self.k.T @ (self.ref * q) - self.base.T @ self.ref) / self.n

    def jacobian(self, tau):
        dq = self.spec.gradient(self.a, self.z, self.x, tau)
        return (self.k * self.ref[:, None]).T @ dq / self.n


class HMoment:
    """Empirical outcome-bridge moment and its analytic Jacobian."""

    def __init__(self, a, ref, target, z, w, x, spec, kappa2):
        self.a, self.ref, self.target, self.z, self.w, self.x = a, ref, target, z, w, x
        self.v = w
        self.spec = spec
        self.n = a.shape[0]
        self.k = np.asarray(kappa2(a, z, x), dtype=float)
        if self.k.shape != (self.n, spec.dim):
            raise DimensionMismatch(
                f"kappa2 has shape {self.k.shape}, expected {(self.n, spec.dim)}"
            )

    def rows(self, psi):
        h = self.spec.value(self.a, self.w, self.x, psi)
        return self.k * (self.ref * h - self.target)[:, None]

    def __call__(self, psi):
        h = self.spec.value(self.a, self.w, self.x, psi)
        return self.k.T @ (self.ref * h - self.target) / self.n

    def jacobian(self, psi):
        dh = self.spec.gradient(self.a, self.w, self.x, psi)
        return (self.k * self.ref[:, None]).T @ dh / self.n


# ---------------------------------------------------------------------------
# root finding


def _cond(j):
    if j.size == 0:
        return 1.0
    with np.errstate(all="ignore"):
        c = np.linalg.cond(j)
    return float(c) if np.isfinite(c) else float("inf")


def newton_solve(fun, jac, x0, options: SolverOptions):
    """Damped Newton iteration on a square system.

    Returns ``(x, iterations, residual_norm, converged)``.  A backtracking
    line search halves the step until the residual norm decreases.
    """
    x = np.asarray(x0, dtype=float).copy()
    m = fun(x)
    norm = float(np.linalg.norm(m))
    it = 0
    while norm > options.tolerance and it < options.max_iter:
        it += 1
        j = jac(x)
        try:
            step = np.linalg.solve(j, -m)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(j, -m, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            return x, it, norm, False
        t = 1.0
        while True:
            with np.errstate(over="ignore", invalid="ignore"):
                cand = x + t * step
                m_new = fun(cand)
                new_norm = float(np.linalg.norm(m_new))
            if np.isfinite(new_norm) and new_norm < (1 - 1e-4 * t) * norm:
                break
            t *= 0.5
            if t < 1e-12:
                return x, it, norm, False
        x, m, norm = cand, m_new, new_norm
    return x, it, norm, norm <= options.tolerance


def _solve(moment, x0, options: SolverOptions, role, spec):
    if spec.dim == 0:
        return BridgeFit(spec, np.zeros(0), role, method="fixed")
    start = np.zeros(spec.dim) if x0 is None else np.asarray(x0, dtype=float)
    j0 = moment.jacobian(start)
    cond0 = _cond(j0)
    if cond0 > options.max_condition:
        raise SingularJacobian(
            f"{role}-bridge moment Jacobian is singular (condition number {cond0:.3g}); "
            "the proxies do not separate the bridge parameters"
        )
    method = "newton"
    if x0 is None and spec.is_linear():
        # linear in the parameters: one exact solve
        start = np.linalg.solve(j0, -moment(np.zeros(spec.dim)))
        method = "linear"
    x, it, norm, ok = newton_solve(moment, moment.jacobian, start, options)
    if not ok and x0 is None:
        alt = spec.restart_params(moment.a, moment.ref, moment.v, moment.x)
        if alt is not None:
            log.debug("%s-bridge Newton stalled at |m|=%.3g; restarting from data-driven start",
                      role, norm)
            x2, it2, norm2, ok2 = newton_solve(moment, moment.jacobian, alt, options)
            it += it2
            if ok2 or norm2 < norm:
                x, norm, ok = x2, norm2, ok2
                method = "newton-restart"
    if not ok and options.fallback:
        log.debug("%s-bridge Newton stalled at |m|=%.3g; trying hybrid fallback", role, norm)
        sol = optimize.root(moment, x, method="hybr", options={"xtol": 1e-14, "maxfev": 200 * (spec.dim + 1)})
        fb_norm = float(np.linalg.norm(moment(sol.x)))
        if np.isfinite(fb_norm) and fb_norm < norm:
            x, norm, method = sol.x, fb_norm, "hybr"
            it += int(sol.nfev)
            ok = norm <= options.tolerance
    if not ok:
        raise NoConvergence(
            f"{role}-bridge solver stopped at residual norm {norm:.3g} after {it} iterations"
        )
    cond = _cond(moment.jacobian(x))
    if cond > options.max_condition:
        raise SingularJacobian(f"{role}-bridge Jacobian singular at the solution (cond {cond:.3g})")
    return BridgeFit(spec, x, role, residual_norm=norm, jacobian_condition=cond,
                     converged=True, iterations=it, method=method)


def solve_q_arrays(a, ref, z, w, x, spec, kappa1, a_levels=(0, 1), options=None, x0=None):
    options = options or SolverOptions()
    if spec.dim == 0:
        return BridgeFit.zero("q")
    used = a[ref > 0]
    if used.size == 0 or np.unique(used).size < len(a_levels):
        raise DegenerateStratum(
            "every reference-outcome row has the same treatment level; the treatment bridge "
            "moment cannot separate its parameters"
        )
    moment = QMoment(a, ref, z, w, x, spec, kappa1, a_levels)
    fit = _solve(moment, x0, options, "q", spec)
    fit.kappa = kappa1
    return fit


def solve_h_arrays(a, ref, target, z, w, x, spec, kappa2, options=None, x0=None):
    options = options or SolverOptions()
    if spec.dim == 0:
        return BridgeFit.zero("h")
    if not np.any(ref > 0) or not np.any(target > 0):
        raise DegenerateStratum("outcome bridge needs both reference and target outcome rows")
    moment = HMoment(a, ref, target, z, w, x, spec, kappa2)
    fit = _solve(moment, x0, options, "h", spec)
    fit.kappa = kappa2
    return fit


def solve_q(sample: SelectedSample, spec: BridgeSpec, weights: Optional[MomentWeights] = None,
            options: Optional[SolverOptions] = None, x0=None) -> BridgeFit:
    """Fit the treatment bridge q(A, Z, X; tau) on a validated sample."""
    weights = weights or MomentWeights.default(spec, None)
    weights.check(sample, q_spec=spec)
    return solve_q_arrays(sample.a, 1.0 - sample.y, sample.z, sample.w, sample.x, spec,
                          weights.kappa1, (0, 1), options, x0)


def solve_h(sample: SelectedSample, spec: BridgeSpec, weights: Optional[MomentWeights] = None,
            options: Optional[SolverOptions] = None, x0=None) -> BridgeFit:
    """Fit the outcome bridge h(A, W, X; psi) on a validated sample."""
    weights = weights or MomentWeights.default(None, spec)
    weights.check(sample, h_spec=spec)
    return solve_h_arrays(sample.a, 1.0 - sample.y, sample.y, sample.z, sample.w, sample.x,
                          spec, weights.kappa2, options, x0)


def q_moment(sample, fit_or_spec, params=None, weights=None):
    """Empirical treatment-bridge moment vector at the given parameters."""
    spec = getattr(fit_or_spec, "spec", fit_or_spec)
    params = fit_or_spec.params if params is None else params
    weights = weights or MomentWeights.default(spec, None)
    return QMoment(sample.a, 1.0 - sample.y, sample.z, sample.w, sample.x, spec,
                   weights.kappa1)(params)


def h_moment(sample, fit_or_spec, params=None, weights=None):
    """Empirical outcome-bridge moment vector at the given parameters."""
    spec = getattr(fit_or_spec, "spec", fit_or_spec)
    params = fit_or_spec.params if params is None else params
    weights = weights or MomentWeights.default(None, spec)
    return HMoment(sample.a, 1.0 - sample.y, sample.y, sample.z, sample.w, sample.x, spec,
                   weights.kappa2)(params)
