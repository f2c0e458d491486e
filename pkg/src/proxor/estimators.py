"""PIPW, POR and PDR estimators of the conditional log odds ratio.

All three share one stacked estimating function.  For parameters
theta = (tau, psi, alpha) and beta_i = B(X_i) @ alpha it stacks

* the treatment-bridge moment rows (when q is estimated),
* the outcome-bridge moment rows (when h is estimated),
* c(X_i) * s_i with

      s_i = (2A_i - 1) q_i exp(-beta_i A_i) {Y_i - (1 - Y_i) h_i}
            + (1 - Y_i) {h(1, W_i, X_i) exp(-beta_i) - h(0, W_i, X_i)}.

PIPW is the case h = 0, POR the case q = 0.  The homogeneous model is
B(X) = 1 with scalar c(X); effect modification uses a basis B(X) and a
vector c(X) of the same width.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .bridge import (
    BridgeFit,
    HMoment,
    QMoment,
    newton_solve,
    solve_h,
    solve_h_arrays,
    solve_q,
    solve_q_arrays,
)
from .data import EstimateResult, MomentWeights, SelectedSample, SolverOptions, Z975
from .errors import (
    BothBridgesMissing,
    DegenerateStratum,
    DimensionMismatch,
    EmptyCell,
    NoConvergence,
    SingularJacobian,
)
from .families import SaturatedBinary

METHODS = ("PIPW", "POR", "PDR")


@dataclass(frozen=True)
class ThetaComponents:
    theta1: float
    theta0: float

    @property
    def beta(self) -> float:
        return float(np.log(self.theta1 / self.theta0))


def _bridge_arrays(a, z, w, x, q_fit, h_fit):
    n = a.shape[0]
    q_obs = q_fit.spec.value(a, z, x, q_fit.params)
    h_obs = h_fit.spec.value(a, w, x, h_fit.params)
    h1 = h_fit.spec.value(np.ones(n), w, x, h_fit.params)
    h0 = h_fit.spec.value(np.zeros(n), w, x, h_fit.params)
    return q_obs, h_obs, h1, h0


def theta_terms(a, y, q_obs, h_obs, h1, h0):
    """Per-row contributions whose means are theta_1c / c and theta_0c / c.

    With h = 0 these are the PIPW terms 1(A=a) q Y; with q = 0 they are the
    POR terms (1 - Y) h(a, W, X).
    """
    resid = y - (1.0 - y) * h_obs
    t1 = (a == 1) * q_obs * resid + (1.0 - y) * h1
    t0 = (a == 0) * q_obs * resid + (1.0 - y) * h0
    return t1, t0


def plugin_theta(sample: SelectedSample, q_fit: BridgeFit, h_fit: BridgeFit, c) -> ThetaComponents:
    q_obs, h_obs, h1, h0 = _bridge_arrays(sample.a, sample.z, sample.w, sample.x, q_fit, h_fit)
    t1, t0 = theta_terms(sample.a, sample.y, q_obs, h_obs, h1, h0)
    cv = np.asarray(c(sample.x), dtype=float)
    th1 = float(np.sum(cv * t1)) / sample.n
    th0 = float(np.sum(cv * t0)) / sample.n
    if not th1 > 0 or not th0 > 0:
        raise EmptyCell(
            f"plug-in ratio has a non-positive component (theta1={th1:.4g}, theta0={th0:.4g})"
        )
    return ThetaComponents(th1, th0)


class StackedEquations:
    """Stacked estimating function for (tau, psi, alpha) with analytic Jacobian."""

    def __init__(self, sample: SelectedSample, q_fit: BridgeFit, h_fit: BridgeFit,
                 c_vec: np.ndarray, basis: np.ndarray):
        self.s = sample
        self.q_spec, self.h_spec = q_fit.spec, h_fit.spec
        self.q_fixed, self.h_fixed = q_fit.params, h_fit.params
        n = sample.n
        self.c_vec = np.asarray(c_vec, dtype=float).reshape(n, -1)
        self.basis = np.asarray(basis, dtype=float).reshape(n, -1)
        if self.c_vec.shape[1] != self.basis.shape[1]:
            raise DimensionMismatch("c(X) and the log odds ratio basis must have equal width")
        a, y, z, w, x = sample.a, sample.y, sample.z, sample.w, sample.x
        self.qm = None
        if q_fit.kappa is not None and q_fit.spec.dim > 0:
            self.qm = QMoment(a, 1.0 - y, z, w, x, q_fit.spec, q_fit.kappa)
        self.hm = None
        if h_fit.kappa is not None and h_fit.spec.dim > 0:
            self.hm = HMoment(a, 1.0 - y, y, z, w, x, h_fit.spec, h_fit.kappa)
        self.nt = q_fit.spec.dim if self.qm else 0
        self.np_ = h_fit.spec.dim if self.hm else 0
        self.na = self.basis.shape[1]
        self.dim = self.nt + self.np_ + self.na
        self._ones, self._zeros = np.ones(n), np.zeros(n)

    def pack(self, tau, psi, alpha):
        parts = []
        if self.qm:
            parts.append(np.asarray(tau, dtype=float))
        if self.hm:
            parts.append(np.asarray(psi, dtype=float))
        parts.append(np.atleast_1d(np.asarray(alpha, dtype=float)))
        return np.concatenate(parts)

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        tau = theta[:self.nt] if self.qm else self.q_fixed
        psi = theta[self.nt:self.nt + self.np_] if self.hm else self.h_fixed
        alpha = theta[self.nt + self.np_:]
        return tau, psi, alpha

    def _parts(self, theta):
        s = self.s
        tau, psi, alpha = self.split(theta)
        q = self.q_spec.value(s.a, s.z, s.x, tau)
        h = self.h_spec.value(s.a, s.w, s.x, psi)
        h1 = self.h_spec.value(self._ones, s.w, s.x, psi)
        h0 = self.h_spec.value(self._zeros, s.w, s.x, psi)
        beta = self.basis @ alpha
        return tau, psi, alpha, q, h, h1, h0, beta

    def score(self, theta):
        """Scalar bracket s_i of the log odds ratio equation."""
        _, _, _, q, h, h1, h0, beta = self._parts(theta)
        a, y = self.s.a, self.s.y
        sgn = 2.0 * a - 1.0
        return sgn * q * np.exp(-beta * a) * (y - (1.0 - y) * h) + (1.0 - y) * (h1 * np.exp(-beta) - h0)

    def rows(self, theta):
        tau, psi, _, _, _, _, _, _ = self._parts(theta)
        blocks = []
        if self.qm:
            blocks.append(self.qm.rows(tau))
        if self.hm:
            blocks.append(self.hm.rows(psi))
        blocks.append(self.c_vec * self.score(theta)[:, None])
        return np.hstack(blocks)

    def __call__(self, theta):
        return self.rows(theta).mean(axis=0)

    def beta_equations(self, theta):
        return (self.c_vec * self.score(theta)[:, None]).mean(axis=0)

    def jacobian(self, theta):
        """Mean of d G_i / d theta (dim x dim)."""
        s = self.s
        n = s.n
        tau, psi, alpha, q, h, h1, h0, beta = self._parts(theta)
        a, y = s.a, s.y
        sgn = 2.0 * a - 1.0
        eba = np.exp(-beta * a)
        eb = np.exp(-beta)
        resid = y - (1.0 - y) * h
        jac = np.zeros((self.dim, self.dim))
        r0 = 0
        if self.qm:
            jac[:self.nt, :self.nt] = self.qm.jacobian(tau)
            r0 = self.nt
        if self.hm:
            jac[r0:r0 + self.np_, r0:r0 + self.np_] = self.hm.jacobian(psi)
        top = self.nt + self.np_
        cols = []
        if self.qm:
            ds_dq = sgn * eba * resid
            cols.append(ds_dq[:, None] * self.q_spec.gradient(s.a, s.z, s.x, tau))
        if self.hm:
            gh = self.h_spec.gradient(s.a, s.w, s.x, psi)
            gh1 = self.h_spec.gradient(self._ones, s.w, s.x, psi)
            gh0 = self.h_spec.gradient(self._zeros, s.w, s.x, psi)
            ds_dpsi = ((-sgn * q * eba * (1.0 - y))[:, None] * gh
                       + ((1.0 - y) * eb)[:, None] * gh1 - (1.0 - y)[:, None] * gh0)
            cols.append(ds_dpsi)
        ds_dbeta = -a * q * eba * resid - (1.0 - y) * h1 * eb
        cols.append(ds_dbeta[:, None] * self.basis)
        ds = np.hstack(cols)
        jac[top:, :] = self.c_vec.T @ ds / n
        return jac


def sandwich(eq: StackedEquations, theta):
    """Return (vcov, bread, meat) with vcov = A^-1 B A^-T / n."""
    g = eq.rows(theta)
    n = g.shape[0]
    bread = eq.jacobian(theta)
    meat = g.T @ g / n
    try:
        inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobian("stacked Jacobian is singular") from exc
    vcov = inv @ meat @ inv.T / n
    vcov = 0.5 * (vcov + vcov.T)
    return vcov, bread, meat


@dataclass
class StackedFit:
    method: str
    beta_hat: float
    tau_hat: np.ndarray
    psi_hat: np.ndarray
    vcov: np.ndarray
    bread: np.ndarray
    meat: np.ndarray
    result: EstimateResult
    q_fit: Optional[BridgeFit] = None
    h_fit: Optional[BridgeFit] = None
    plugin_beta: float = float("nan")

    @property
    def std_err(self) -> float:
        return self.result.std_err


def _resolve_fits(method, q_fit, h_fit):
    if method == "PIPW":
        if q_fit is None:
            raise BothBridgesMissing("PIPW needs a treatment-bridge fit")
        return q_fit, BridgeFit.zero("h")
    if method == "POR":
        if h_fit is None:
            raise BothBridgesMissing("POR needs an outcome-bridge fit")
        return BridgeFit.zero("q"), h_fit
    if method == "PDR":
        if q_fit is None and h_fit is None:
            raise BothBridgesMissing("PDR needs at least one bridge fit")
        return q_fit or BridgeFit.zero("q"), h_fit or BridgeFit.zero("h")
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _homogeneous(sample, method, q_fit, h_fit, weights, options, polish=True):
    weights = weights or MomentWeights()
    options = options or SolverOptions()
    q_fit, h_fit = _resolve_fits(method, q_fit, h_fit)
    th = plugin_theta(sample, q_fit, h_fit, weights.c)
    beta = th.beta
    cv = np.asarray(weights.c(sample.x), dtype=float)
    eq = StackedEquations(sample, q_fit, h_fit, cv[:, None], np.ones((sample.n, 1)))
    theta = eq.pack(q_fit.params, h_fit.params, [beta])
    resid = float(np.linalg.norm(eq(theta)))
    iters = q_fit.iterations + h_fit.iterations
    if polish and resid > options.tolerance:
        theta2, it, resid2, ok = newton_solve(eq, eq.jacobian, theta, options)
        iters += it
        if ok:
            theta, resid = theta2, resid2
    vcov, bread, meat = sandwich(eq, theta)
    tau, psi, alpha = eq.split(theta)
    beta_root = float(alpha[0])
    se = float(np.sqrt(max(vcov[-1, -1], 0.0)))
    converged = bool(q_fit.converged and h_fit.converged and np.isfinite(se))
    result = EstimateResult.wald(
        method, beta, se, converged=converged, iterations=iters,
        moment_residual_norm=resid, theta1=th.theta1, theta0=th.theta0,
        extra={"stacked_beta": beta_root},
    )
    return StackedFit(method, beta, np.asarray(q_fit.params), np.asarray(h_fit.params), vcov,
                      bread, meat, result, q_fit, h_fit, plugin_beta=beta)


def estimate_pipw(sample, q_fit, weights=None, options=None) -> EstimateResult:
    """Proximal IPW estimate from a fitted treatment bridge."""
    return _homogeneous(sample, "PIPW", q_fit, None, weights, options, polish=False).result


def estimate_por(sample, h_fit, weights=None, options=None) -> EstimateResult:
    """Proximal outcome-regression estimate from a fitted outcome bridge."""
    return _homogeneous(sample, "POR", None, h_fit, weights, options, polish=False).result


def estimate_pdr(sample, q_fit=None, h_fit=None, weights=None, options=None) -> EstimateResult:
    """Proximal doubly robust estimate; a missing bridge is taken as zero."""
    return _homogeneous(sample, "PDR", q_fit, h_fit, weights, options, polish=False).result


def fit_bridges(sample, method, q_spec=None, h_spec=None, weights=None, options=None):
    """Fit the bridges a method needs; returns (q_fit or None, h_fit or None)."""
    weights = weights or MomentWeights.default(q_spec, h_spec)
    q_fit = h_fit = None
    if method in ("PIPW", "PDR") and q_spec is not None:
        weights.check(sample, q_spec=q_spec)
        q_fit = solve_q(sample, q_spec, weights, options)
    if method in ("POR", "PDR") and h_spec is not None:
        weights.check(sample, h_spec=h_spec)
        h_fit = solve_h(sample, h_spec, weights, options)
    return q_fit, h_fit


def joint_fit(sample, method, q_spec=None, h_spec=None, weights=None, options=None,
              q_fit=None, h_fit=None) -> StackedFit:
    """Solve the stacked estimating equations for (tau, psi, beta).

    Bridges are fitted first (the system is block triangular), beta starts
    at the plug-in closed form and a Newton polish runs on the full system
    if the stacked residual is above tolerance.  Pre-computed fits may be
    passed to skip refitting.
    """
    method = method.upper()
    weights = weights or MomentWeights.default(q_spec, h_spec)
    if q_fit is None and h_fit is None:
        q_fit, h_fit = fit_bridges(sample, method, q_spec, h_spec, weights, options)
    return _homogeneous(sample, method, q_fit, h_fit, weights, options, polish=True)


# ---------------------------------------------------------------------------
# effect modification


def polynomial_basis(degree=1):
    """Basis (1, x_j, x_j^2, ..., x_j^degree) over every covariate column."""

    def basis(x):
        x = np.asarray(x, dtype=float)
        cols = [np.ones(x.shape[0])]
        for p in range(1, degree + 1):
            cols.extend(x[:, j] ** p for j in range(x.shape[1]))
        return np.column_stack(cols)

    basis.degree = degree
    return basis


def constant_basis(x):
    return np.ones((np.shape(x)[0], 1))


@dataclass
class EffectModSpec:
    """beta0(X; alpha) = basis(X) @ alpha with moment weights c_vec(X)."""

    basis: Callable = field(default_factory=lambda: polynomial_basis(1))
    c_vec: Optional[Callable] = None

    def weights(self, x):
        return (self.c_vec or self.basis)(x)


@dataclass
class EffectModFit:
    method: str
    alpha: np.ndarray
    vcov: np.ndarray
    spec: EffectModSpec
    iterations: int
    residual_norm: float

    @property
    def std_err(self):
        return np.sqrt(np.clip(np.diag(self.vcov), 0, None))

    def beta(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.spec.basis(x) @ self.alpha


def effect_mod_fit(sample, method, spec: EffectModSpec, q_fit=None, h_fit=None, options=None,
                   c=None) -> EffectModFit:
    """Solve the effect-modification estimating equation for alpha.

    ``c`` optionally rescales the vector weight row-wise (defaults to 1).
    """
    method = method.upper()
    options = options or SolverOptions()
    q_fit, h_fit = _resolve_fits(method, q_fit, h_fit)
    basis = np.asarray(spec.basis(sample.x), dtype=float)
    cv = np.asarray(spec.weights(sample.x), dtype=float)
    if cv.shape[1] != basis.shape[1]:
        raise DimensionMismatch("only exactly identified effect-modification models are supported")
    if c is not None:
        cv = cv * np.asarray(c(sample.x), dtype=float)[:, None]
    eq = StackedEquations(sample, q_fit, h_fit, cv, basis)
    nuis = eq.pack(q_fit.params, h_fit.params, np.zeros(basis.shape[1]))[:-basis.shape[1]]

    def fun(alpha):
        return eq.beta_equations(np.concatenate([nuis, alpha]))

    def jac(alpha):
        return eq.jacobian(np.concatenate([nuis, alpha]))[-len(alpha):, -len(alpha):]

    alpha0 = np.zeros(basis.shape[1])
    j0 = jac(alpha0)
    if np.linalg.cond(j0) > options.max_condition:
        raise SingularJacobian("effect-modification Jacobian is singular")
    alpha, it, resid, ok = newton_solve(fun, jac, alpha0, options)
    if not ok:
        raise NoConvergence(f"effect-modification solver stopped at residual {resid:.3g}")
    theta = np.concatenate([nuis, alpha])
    vcov, _, _ = sandwich(eq, theta)
    k = basis.shape[1]
    return EffectModFit(method, alpha, vcov[-k:, -k:], spec, it, resid)


# ---------------------------------------------------------------------------
# polytomous treatment and outcome


def _levels(values, ref):
    """Reference level first (first encountered unless given), others sorted."""
    seen = list(dict.fromkeys(np.asarray(values).tolist()))
    if ref is None:
        ref = seen[0]
    elif ref not in seen:
        raise DimensionMismatch(f"reference level {ref!r} does not occur")
    return [ref] + sorted(v for v in seen if v != ref)


@dataclass(frozen=True)
class PolytomousSample:
    """Categorical treatment/outcome sample; codes 0 are the reference levels."""

    a: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x: np.ndarray
    a_levels: tuple
    y_levels: tuple

    @classmethod
    def from_arrays(cls, a, y, z, w, x=None, a_ref=None, y_ref=None):
        a_lv = _levels(a, a_ref)
        y_lv = _levels(y, y_ref)
        a_code = np.array([a_lv.index(v) for v in np.asarray(a).tolist()], dtype=float)
        y_code = np.array([y_lv.index(v) for v in np.asarray(y).tolist()], dtype=float)
        sample = SelectedSample(np.zeros_like(a_code), np.zeros_like(y_code), z, w, x)
        return cls(a_code, y_code, sample.z, sample.w, sample.x, tuple(a_lv), tuple(y_lv))

    @property
    def n(self):
        return int(self.a.shape[0])

    @property
    def J(self):
        return len(self.a_levels) - 1

    @property
    def K(self):
        return len(self.y_levels) - 1


@dataclass
class PolytomousResult:
    method: str
    betas: np.ndarray      # J x K
    std_errs: np.ndarray   # J x K
    thetas: np.ndarray     # (J+1) x K
    a_levels: tuple
    y_levels: tuple
    q_fit: Optional[BridgeFit] = None
    h_fits: list = field(default_factory=list)
    vcov_theta: Optional[np.ndarray] = None


def polytomous_terms(a, y, j, k, q_j, h_kj, c):
    """theta_jc^k contributions for one (treatment level j, outcome level k).

    ``q_j`` is q(a_j, Z, X) and ``h_kj`` is h_k(a_j, W, X) per row.
    """
    ref = (y == 0)
    return c * (ref * h_kj - (a == j) * q_j * (ref * h_kj - (y == k)))


def polytomous_fit(ps: PolytomousSample, method="PDR", q_spec=None, h_spec=None, weights=None,
                   options=None) -> PolytomousResult:
    """Per-level log odds ratios beta_j^k = log(theta_jc^k / theta_0c^k).

    ``h_spec`` may be one spec shared by every outcome level or a list of K.
    Standard errors come from a stacked sandwich over (tau, psi_1..psi_K,
    theta) with a finite-difference Jacobian for the nuisance blocks.
    """
    method = method.upper()
    options = options or SolverOptions()
    J, K, n = ps.J, ps.K, ps.n
    if J < 1 or K < 1:
        raise DimensionMismatch("need at least two treatment and two outcome levels")
    if q_spec is None and method in ("PIPW", "PDR"):
        q_spec = SaturatedBinary(None if ps.x.shape[1] == 0 else np.unique(ps.x, axis=0), J + 1)
    if h_spec is None and method in ("POR", "PDR"):
        h_spec = SaturatedBinary(None if ps.x.shape[1] == 0 else np.unique(ps.x, axis=0), J + 1)
    h_specs = list(h_spec) if isinstance(h_spec, (list, tuple)) else [h_spec] * K
    weights = weights or MomentWeights.default(q_spec, h_specs[0])
    a, y, z, w, x = ps.a, ps.y, ps.z, ps.w, ps.x
    ref = (y == 0).astype(float)
    levels = tuple(range(J + 1))

    q_fit = BridgeFit.zero("q")
    if method in ("PIPW", "PDR"):
        q_fit = solve_q_arrays(a, ref, z, w, x, q_spec, weights.kappa1, levels, options)
    h_fits = [BridgeFit.zero("h")] * K
    if method in ("POR", "PDR"):
        h_fits = []
        for k in range(1, K + 1):
            kap = weights.kappa2 if len(set(map(id, h_specs))) == 1 else MomentWeights.default(
                None, h_specs[k - 1]).kappa2
            h_fits.append(solve_h_arrays(a, ref, (y == k).astype(float), z, w, x, h_specs[k - 1],
                                         kap, options))
    cv = np.asarray(weights.c(x), dtype=float)

    qms = QMoment(a, ref, z, w, x, q_fit.spec, q_fit.kappa, levels) if q_fit.kappa else None
    hms = [HMoment(a, ref, (y == k + 1).astype(float), z, w, x, hf.spec, hf.kappa)
           if hf.kappa else None for k, hf in enumerate(h_fits)]
    sizes = [q_fit.spec.dim if qms else 0] + [hf.spec.dim if hm else 0 for hf, hm in zip(h_fits, hms)]

    def unpack(par):
        out, i = [], 0
        for s in sizes:
            out.append(par[i:i + s])
            i += s
        tau = out[0] if qms else q_fit.params
        psis = [out[k + 1] if hms[k] else h_fits[k].params for k in range(K)]
        return tau, psis, par[i:]

    def terms(tau, psis):
        t = np.empty((n, J + 1, K))
        for j in range(J + 1):
            aj = np.full(n, float(j))
            q_j = q_fit.spec.value(aj, z, x, tau)
            for k in range(K):
                h_kj = h_fits[k].spec.value(aj, w, x, psis[k])
                t[:, j, k] = polytomous_terms(a, y, j, k + 1, q_j, h_kj, cv)
        return t

    def rows(par):
        tau, psis, theta = unpack(par)
        blocks = []
        if qms:
            blocks.append(qms.rows(tau))
        for hm, psi in zip(hms, psis):
            if hm:
                blocks.append(hm.rows(psi))
        blocks.append(terms(tau, psis).reshape(n, -1) - theta[None, :])
        return np.hstack(blocks)

    t = terms(q_fit.params, [hf.params for hf in h_fits])
    thetas = t.sum(axis=0) / n
    if np.any(thetas <= 0):
        j, k = np.argwhere(thetas <= 0)[0]
        raise EmptyCell(f"theta for treatment level {j}, outcome level {k + 1} is not positive")
    betas = np.log(thetas[1:, :] / thetas[0:1, :])

    par = np.concatenate([q_fit.params if qms else np.zeros(0)]
                         + [hf.params for hf, hm in zip(h_fits, hms) if hm]
                         + [thetas.reshape(-1)])
    g = rows(par)
    bread = _numeric_jacobian(lambda p: rows(p).mean(axis=0), par)
    inv = np.linalg.inv(bread)
    vcov = inv @ (g.T @ g / n) @ inv.T / n
    nth = (J + 1) * K
    vt = vcov[-nth:, -nth:]
    se = np.zeros((J, K))
    for j in range(1, J + 1):
        for k in range(K):
            grad = np.zeros(nth)
            grad[j * K + k] = 1.0 / thetas[j, k]
            grad[k] = -1.0 / thetas[0, k]
            se[j - 1, k] = np.sqrt(max(grad @ vt @ grad, 0.0))
    return PolytomousResult(method, betas, se, thetas, ps.a_levels, ps.y_levels, q_fit, h_fits,
                            vt)


def _numeric_jacobian(fun, x, rel_step=1e-6):
    x = np.asarray(x, dtype=float)
    f0 = fun(x)
    jac = np.empty((f0.shape[0], x.shape[0]))
    for i in range(x.shape[0]):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (fun(xp) - fun(xm)) / (2 * h)
    return jac
