"""Data-generating designs, exact finite-law oracles and the Monte Carlo
harness.

Scenario I is an all-binary design without measured covariates.  Scenarios
II-V share one continuous generator (U, X uniform; Gaussian proxies;
logistic outcome; log-linear selection) and differ only in which analyst
models drop X.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from .bridge import solve_h, solve_q
from .data import MomentWeights, SelectedSample, SolverOptions
from .errors import IncompleteProxies, InvalidSpec, ProxorError
from .estimators import joint_fit
from .families import InverseLogisticTreatment, LogLinearOutcome, SaturatedBinary

log = logging.getLogger(__name__)

SCENARIOS = ("I", "II", "III", "IV", "V", "CustomDiscrete", "CustomContinuous")
BETA0_DEFAULT = math.log(0.2)


# ---------------------------------------------------------------------------
# coefficient sets


@dataclass(frozen=True)
class BinaryCoefs:
    """Scenario I style binary design.

    U ~ Bern(p_u); A | U ~ Bern(expit(a0 + a_u U));
    Z | A, U ~ Bern(z0 + z_a A + z_u U + z_au A U); W | U ~ Bern(w0 + w_u U);
    Y | A, U ~ Bern(expit(y0 + beta0 A + y_u U));
    S | A, Y, U ~ Bern(exp(s0 + s_a A + s_y Y + s_u U)).
    """

    p_u: float = 0.5
    a0: float = 0.2
    a_u: float = 0.4
    z0: float = 0.2
    z_a: float = 0.1
    z_u: float = 0.4
    z_au: float = 0.2
    w0: float = 0.2
    w_u: float = 0.4
    y0: float = -0.405
    y_u: float = -0.7
    s0: float = -1.7
    s_a: float = 0.2
    s_y: float = 0.4
    s_u: float = 0.7


@dataclass(frozen=True)
class ContinuousCoefs:
    """Scenario II style design with scalar U and X.

    A | U, X ~ Bern(expit(mu0A + muUA U + muXA X));
    Z | A, U, X ~ N(mu0Z + muAZ A + muUZ U + muXZ X, sdZ^2);
    W | Y, U, X ~ N(mu0W + muYW Y + muUW U + muXW X, sdW^2);
    Y | A, U, X ~ Bern(expit(mu0Y + beta0 A + muUY U + muXY X));
    S | A, Y, U, X ~ Bern(exp(mu0S + muAS A + muYS Y + muUS U + muXS X)).
    """

    mu0A: float = -1.0
    muUA: float = 1.0
    muXA: float = 1.0
    mu0Z: float = 0.0
    muAZ: float = 0.25
    muUZ: float = 4.0
    muXZ: float = 0.25
    sdZ: float = 0.25
    mu0W: float = 0.0
    muYW: float = 0.25
    muUW: float = 4.0
    muXW: float = 0.25
    sdW: float = 0.25
    mu0Y: float = -3.89
    muUY: float = -2.0
    muXY: float = -1.0
    mu0S: float = -5.0
    muAS: float = 0.4
    muYS: float = 4.0
    muUS: float = 0.3
    muXS: float = 0.2


_DROPS = {"II": (False, False), "III": (True, False), "IV": (False, True), "V": (True, True)}


@dataclass(frozen=True)
class DgpSpec:
    """Full generating specification, latent parts included."""

    scenario: str = "II"
    beta0: float = BETA0_DEFAULT
    N: int = 200_000
    binary: BinaryCoefs = field(default_factory=BinaryCoefs)
    continuous: ContinuousCoefs = field(default_factory=ContinuousCoefs)
    drop_x_from_q: bool = False
    drop_x_from_h: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidSpec(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.N < 1:
            raise InvalidSpec("population size N must be positive")
        check_selection(self)

    @classmethod
    def scenario_spec(cls, name: str, N: Optional[int] = None, beta0: float = BETA0_DEFAULT,
                      **kw) -> "DgpSpec":
        """Built-in scenario with its misspecification flags."""
        name = name.upper() if name.upper() in ("I", "II", "III", "IV", "V") else name
        if name == "I":
            return cls("I", beta0, N or 5000, **kw)
        if name in _DROPS:
            dq, dh = _DROPS[name]
            return cls(name, beta0, N or 200_000, drop_x_from_q=dq, drop_x_from_h=dh, **kw)
        raise InvalidSpec(f"unknown built-in scenario {name!r}")

    @property
    def is_binary(self) -> bool:
        return self.scenario in ("I", "CustomDiscrete")

    def model_specs(self, sample: SelectedSample):
        """Analyst-side (q_spec, h_spec); the drop flags act only here."""
        if self.is_binary:
            return SaturatedBinary.for_sample(sample), SaturatedBinary.for_sample(sample)
        q = InverseLogisticTreatment.for_sample(sample, use_x=not self.drop_x_from_q)
        h = LogLinearOutcome.for_sample(sample, use_x=not self.drop_x_from_h)
        return q, h

    def to_dict(self):
        return asdict(self)


def check_selection(spec: DgpSpec) -> None:
    """Raise InvalidSpec if some attainable P(S=1 | ...) exceeds 1."""
    if spec.is_binary:
        b = spec.binary
        worst = b.s0 + max(b.s_a, 0) + max(b.s_y, 0) + max(b.s_u, 0)
        probs = [b.z0 + b.z_a * a + b.z_u * u + b.z_au * a * u for a in (0, 1) for u in (0, 1)]
        probs += [b.w0 + b.w_u * u for u in (0, 1)] + [b.p_u]
        if min(probs) < 0 or max(probs) > 1:
            raise InvalidSpec("a Bernoulli probability of the binary design is outside [0, 1]")
    else:
        c = spec.continuous
        # U and X range over [0, 1]
        worst = c.mu0S + max(c.muAS, 0) + max(c.muYS, 0) + max(c.muUS, 0) + max(c.muXS, 0)
    if worst > 0:
        raise InvalidSpec(f"selection probability reaches exp({worst:.3g}) > 1")


# ---------------------------------------------------------------------------
# generation


@dataclass
class SimulatedData:
    sample: SelectedSample
    population: Dict[str, np.ndarray]
    spec: DgpSpec

    @property
    def selected_fraction(self):
        return self.sample.n / self.spec.N


def _bern(rng, p):
    return (rng.random(np.shape(p)) < p).astype(float)


def generate(spec: DgpSpec, seed=None) -> SimulatedData:
    """Draw a target population of size N and keep the S=1 rows."""
    rng = np.random.default_rng(seed)
    N = spec.N
    if spec.is_binary:
        b = spec.binary
        u = _bern(rng, np.full(N, b.p_u))
        a = _bern(rng, expit(b.a0 + b.a_u * u))
        z = _bern(rng, b.z0 + b.z_a * a + b.z_u * u + b.z_au * a * u)
        w = _bern(rng, b.w0 + b.w_u * u)
        y = _bern(rng, expit(b.y0 + spec.beta0 * a + b.y_u * u))
        s = _bern(rng, np.exp(b.s0 + b.s_a * a + b.s_y * y + b.s_u * u))
        x = np.zeros((N, 0))
    else:
        c = spec.continuous
        u = rng.random(N)
        xv = rng.random(N)
        a = _bern(rng, expit(c.mu0A + c.muUA * u + c.muXA * xv))
        z = c.mu0Z + c.muAZ * a + c.muUZ * u + c.muXZ * xv + c.sdZ * rng.standard_normal(N)
        y = _bern(rng, expit(c.mu0Y + spec.beta0 * a + c.muUY * u + c.muXY * xv))
        w = c.mu0W + c.muYW * y + c.muUW * u + c.muXW * xv + c.sdW * rng.standard_normal(N)
        s = _bern(rng, np.exp(c.mu0S + c.muAS * a + c.muYS * y + c.muUS * u + c.muXS * xv))
        x = xv[:, None]
    keep = s == 1
    sample = SelectedSample(a[keep], y[keep], z[keep], w[keep], x[keep])
    pop = {"u": u, "a": a, "y": y, "z": z, "w": w, "x": x, "s": s}
    return SimulatedData(sample, pop, spec)


def expected_selected_fraction_binary(spec: DgpSpec) -> float:
    """E[P(S=1 | A, Y, U)] under the binary design, by enumeration."""
    b = spec.binary
    tot = 0.0
    for u, a, y in itertools.product((0, 1), repeat=3):
        pu = b.p_u if u else 1 - b.p_u
        pa = expit(b.a0 + b.a_u * u)
        pa = pa if a else 1 - pa
        py = expit(b.y0 + spec.beta0 * a + b.y_u * u)
        py = py if y else 1 - py
        tot += pu * pa * py * math.exp(b.s0 + b.s_a * a + b.s_y * y + b.s_u * u)
    return tot


# ---------------------------------------------------------------------------
# closed-form bridge parameters for the continuous design


@dataclass(frozen=True)
class TrueBridgeParams:
    tau: np.ndarray   # (tau0, tauA, tauZ, tauX)
    psi: np.ndarray   # (psi0, psiA, psiW, psiX)

    def q_fit(self, use_x=True):
        from .bridge import BridgeFit
        spec = InverseLogisticTreatment(1, 1, use_x)
        return BridgeFit.fixed(spec, self.tau if use_x else self.tau[:3], "q")

    def h_fit(self, use_x=True):
        from .bridge import BridgeFit
        spec = LogLinearOutcome(1, 1, use_x)
        return BridgeFit.fixed(spec, self.psi if use_x else self.psi[:3], "h")


def true_bridge_params_continuous(spec) -> TrueBridgeParams:
    """Population (tau, psi) of the continuous design.

    psi is exact.  tau is exact up to the rare-outcome approximation the
    q-bridge derivation relies on.  The A coefficient keeps the proxy mean
    shift term: tauA = tauZ^2 sdZ^2 - tauZ muAZ.
    """
    if isinstance(spec, DgpSpec):
        if spec.is_binary:
            raise InvalidSpec("closed-form bridge parameters need a continuous design")
        c, beta0 = spec.continuous, spec.beta0
    else:
        c, beta0 = spec, BETA0_DEFAULT
    if c.muUW == 0 or c.muUZ == 0:
        raise InvalidSpec("the latent loading on W and on Z must be non-zero")
    psi_w = c.muUY / c.muUW
    psi_x = c.muXY - psi_w * c.muXW
    psi_0 = c.mu0Y + c.muYS - psi_w * c.mu0W - 0.5 * psi_w ** 2 * c.sdW ** 2
    tau_z = c.muUA / c.muUZ
    tau_x = c.muXA - tau_z * c.muXZ
    tau_0 = c.mu0A + c.muAS - tau_z * c.mu0Z - 0.5 * tau_z ** 2 * c.sdZ ** 2
    tau_a = tau_z ** 2 * c.sdZ ** 2 - tau_z * c.muAZ
    return TrueBridgeParams(np.array([tau_0, tau_a, tau_z, tau_x]),
                            np.array([psi_0, beta0, psi_w, psi_x]))


# ---------------------------------------------------------------------------
# exact finite laws

AXES = ("u", "x", "a", "y", "z", "w", "s")


@dataclass(frozen=True)
class DiscreteLaw:
    """Joint probability table p[u, x, a, y, z, w, s] over integer codes.

    S is binary; every other variable has the cardinality of its axis.
    Treatment and outcome code 0 are the reference levels.
    """

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 7 or p.shape[6] != 2:
            raise InvalidSpec("law table must have axes (u, x, a, y, z, w, s) with binary s")
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-12):
            raise InvalidSpec("law table must be non-negative and sum to one")
        object.__setattr__(self, "p", p)

    @property
    def shape(self):
        return dict(zip(AXES, self.p.shape))

    def selected(self):
        """p[u, x, a, y, z, w] given S=1."""
        ps = self.p[..., 1]
        return ps / ps.sum()

    def sample(self, n, seed=None) -> SelectedSample:
        """Draw n rows from the selected law (codes as floats)."""
        ps = self.selected()
        rng = np.random.default_rng(seed)
        flat = rng.choice(ps.size, size=n, p=ps.reshape(-1))
        u, x, a, y, z, w = np.unravel_index(flat, ps.shape)
        xm = None if ps.shape[1] == 1 else x.astype(float)
        return SelectedSample(a, y, z, w, xm)


def _norm(t, axis):
    s = t.sum(axis=axis, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, t / s, 0.0)


def binary_law(spec: DgpSpec = None) -> DiscreteLaw:
    """The Scenario I generating law as an exact table."""
    spec = spec or DgpSpec.scenario_spec("I")
    b = spec.binary
    p = np.zeros((2, 1, 2, 2, 2, 2, 2))
    for u, a, y, z, w in itertools.product((0, 1), repeat=5):
        pu = b.p_u if u else 1 - b.p_u
        pa = expit(b.a0 + b.a_u * u)
        pz = b.z0 + b.z_a * a + b.z_u * u + b.z_au * a * u
        pw = b.w0 + b.w_u * u
        py = expit(b.y0 + spec.beta0 * a + b.y_u * u)
        ps = math.exp(b.s0 + b.s_a * a + b.s_y * y + b.s_u * u)
        base = (pu * (pa if a else 1 - pa) * (pz if z else 1 - pz) * (pw if w else 1 - pw)
                * (py if y else 1 - py))
        p[u, 0, a, y, z, w, 1] = base * ps
        p[u, 0, a, y, z, w, 0] = base * (1 - ps)
    return DiscreteLaw(p)


def structural_law(p_u, p_x, p_a, p_y, p_z, p_w, p_s) -> DiscreteLaw:
    """Assemble a law from conditional tables.

    Shapes: p_u[u], p_x[u, x], p_a[u, x, a], p_y[u, x, a, y],
    p_z[u, x, a, z], p_w[u, x, y, w], p_s[u, x, a, y] = P(S=1 | ...).
    The factorization builds in the proxy independences (Z depends on
    (A, U, X), W on (Y, U, X), S not on the proxies).
    """
    p1 = np.einsum("u,ux,uxa,uxay,uxaz,uxyw,uxay->uxayzw", p_u, p_x, p_a, p_y, p_z, p_w, p_s)
    p0 = np.einsum("u,ux,uxa,uxay,uxaz,uxyw,uxay->uxayzw", p_u, p_x, p_a, p_y, p_z, p_w, 1 - p_s)
    return DiscreteLaw(np.stack([p0, p1], axis=-1))


def random_law(seed=None, n_x=1, n_a=2, n_y=2, beta=None, breach=0.0, min_prob=0.05,
               max_condition=1e4, max_tries=200) -> DiscreteLaw:
    """Random solvable law with binary U, Z, W and Model-1 outcome odds.

    ``beta[x][j, k]`` (or a scalar for binary A, Y) fixes the designed log
    odds ratios; by default they are random.  ``breach`` adds an A*Y term to
    the log selection probability, which violates the selection assumption.
    Draws whose proxy matrices are ill conditioned are rejected.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        pu = rng.uniform(0.2, 0.8)
        p_u = np.array([1 - pu, pu])
        p_x = rng.dirichlet(np.full(n_x, 5.0), size=2)
        p_a = rng.dirichlet(np.full(n_a, 3.0), size=(2, n_x))
        bet = np.zeros((n_x, n_a, n_y))
        if beta is None:
            bet[:, 1:, 1:] = rng.uniform(-1.5, 1.5, size=(n_x, n_a - 1, n_y - 1))
        else:
            bet[:, 1:, 1:] = np.broadcast_to(np.asarray(beta, dtype=float), (n_x, n_a - 1, n_y - 1))
        eta = rng.uniform(-2.5, 0.0, size=(2, n_x, n_y))
        eta[:, :, 0] = 0.0
        lin = eta[:, :, None, :] + bet[None, :, :, :]
        p_y = np.exp(lin) / np.exp(lin).sum(axis=-1, keepdims=True)
        zz = rng.uniform(0.1, 0.9, size=(2, n_x, n_a))
        p_z = np.stack([1 - zz, zz], axis=-1)
        ww = rng.uniform(0.1, 0.9, size=(2, n_x, n_y))
        p_w = np.stack([1 - ww, ww], axis=-1)
        s_u = rng.uniform(-1.0, 0.0, size=(2, n_x))
        s_a = rng.uniform(-0.5, 0.0, size=n_a)
        s_y = rng.uniform(-0.5, 0.0, size=(2, n_x, n_y))
        log_s = (s_u[:, :, None, None] + s_a[None, None, :, None] + s_y[:, :, None, :]
                 - 0.5 + breach * (np.arange(n_a)[:, None] * np.arange(n_y)[None, :] > 0))
        p_s = np.exp(np.minimum(log_s, 0.0))
        law = structural_law(p_u, p_x, p_a, p_y, p_z, p_w, p_s)
        if _law_ok(law, min_prob, max_condition):
            return law
    raise IncompleteProxies("could not draw a well-conditioned law")


def _law_ok(law, min_prob, max_condition):
    ps = law.selected()
    # every (x, a, y) cell needs mass for the closed forms
    if ps.sum(axis=(0, 4, 5)).min() < min_prob * 0.1 / ps.shape[1]:
        return False
    try:
        orc = _bridges(law)
    except IncompleteProxies:
        return False
    return orc["condition"] < max_condition


def _bridges(law: DiscreteLaw):
    """Exact q[x, a, z] and h[k, x, a, w] from the latent-level equations."""
    ps = law.selected()                       # u x a y z w
    nu, nx, na, ny, nz, nw = ps.shape
    puxay = ps.sum(axis=(4, 5))
    # P(Z | A, U, X) and P(W | Y, U, X) within S=1 (no dependence on the rest)
    pz_uxa = _norm(ps.sum(axis=(3, 5)), 3)    # u x a z
    pw_uxy = _norm(ps.sum(axis=(2, 4)), 3)    # u x y w
    pa_uxy = _norm(puxay, 2)                  # u x a y
    py_uxa = _norm(puxay, 3)                  # u x a y
    q = np.zeros((nx, na, nz))
    h = np.zeros((ny - 1, nx, na, nw))
    cond = 1.0
    for x in range(nx):
        for a in range(na):
            mat = pz_uxa[:, x, a, :]
            rhs = 1.0 / pa_uxy[:, x, a, 0]
            q[x, a], c1 = _exact_solve(mat, rhs, "treatment")
            mat_w = pw_uxy[:, x, 0, :]
            cond = max(cond, c1)
            for k in range(1, ny):
                rhs_h = py_uxa[:, x, a, k] / py_uxa[:, x, a, 0]
                h[k - 1, x, a], c2 = _exact_solve(mat_w, rhs_h, "outcome")
                cond = max(cond, c2)
    return {"q": q, "h": h, "condition": cond}


def _exact_solve(mat, rhs, role):
    if not np.all(np.isfinite(rhs)):
        raise IncompleteProxies(f"{role} bridge equation has an empty conditioning cell")
    rank = np.linalg.matrix_rank(mat, tol=1e-12)
    if rank < mat.shape[1]:
        raise IncompleteProxies(f"{role} proxy law is rank deficient; the bridge is not unique")
    sol, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    if np.max(np.abs(mat @ sol - rhs)) > 1e-10 * max(1.0, np.max(np.abs(rhs))):
        raise IncompleteProxies(f"{role} bridge equation has no solution")
    return sol, float(np.linalg.cond(mat))


def population_theta(law: DiscreteLaw, q, h, c=None):
    """Population PDR ratios theta[a, k] for given bridge tables.

    ``q[x, a, z]`` and ``h[k-1, x, a, w]``; a zero table gives the PIPW or
    POR forms.  Returns an (n_a, n_y - 1) array of
    E[c(1(Y=0) h_k(a) - 1(A=a) q(a) {1(Y=0) h_k(A) - 1(Y=k)}) | S=1].
    """
    ps = law.selected()
    nu, nx, na, ny, nz, nw = ps.shape
    cx = np.ones(nx) if c is None else np.asarray(c, dtype=float)
    pxayzw = ps.sum(axis=0)
    out = np.zeros((na, ny - 1))
    for j in range(na):
        for k in range(1, ny):
            tot = 0.0
            for x, a, y, z, w in itertools.product(range(nx), range(na), range(ny), range(nz),
                                                   range(nw)):
                pr = pxayzw[x, a, y, z, w]
                if pr == 0:
                    continue
                ref = 1.0 if y == 0 else 0.0
                term = ref * h[k - 1, x, j, w] - (a == j) * q[x, j, z] * (
                    ref * h[k - 1, x, a, w] - (y == k))
                tot += cx[x] * pr * term
            out[j, k - 1] = tot
    return out


def lemma_theta(law: DiscreteLaw, c=None):
    """theta[a, k] built from the latent U (the estimand characterization)."""
    ps = law.selected()
    nu, nx, na, ny = ps.shape[:4]
    cx = np.ones(nx) if c is None else np.asarray(c, dtype=float)
    puxay = ps.sum(axis=(4, 5))
    pux = puxay.sum(axis=(2, 3))
    pa_uxy = _norm(puxay, 2)
    py_ux = _norm(puxay.sum(axis=2), 2)
    out = np.zeros((na, ny - 1))
    for j in range(na):
        for k in range(1, ny):
            with np.errstate(divide="ignore", invalid="ignore"):
                r = pa_uxy[:, :, j, k] / pa_uxy[:, :, j, 0] * py_ux[:, :, k]
            out[j, k - 1] = float(np.sum(np.where(pux > 0, cx[None, :] * pux * r, 0.0)))
    return out


def designed_log_or(law: DiscreteLaw):
    """Conditional log odds ratios log OR(Y=k vs 0; A=j vs 0 | U, X) in the
    target population, per (u, x).  Shape (u, x, n_a - 1, n_y - 1)."""
    p = law.p.sum(axis=(4, 5, 6))            # u x a y
    with np.errstate(divide="ignore", invalid="ignore"):
        lo = np.log(p[:, :, :, 1:] / p[:, :, :, :1])
    return lo[:, :, 1:, :] - lo[:, :, :1, :]


def selection_assumption_holds(law: DiscreteLaw, tol=1e-10) -> bool:
    """True if P(S=1|Y=k,A,U,X)/P(S=1|Y=0,A,U,X) is free of A."""
    p = law.p.sum(axis=(4, 5))               # u x a y s
    with np.errstate(divide="ignore", invalid="ignore"):
        ps = p[..., 1] / p.sum(axis=-1)
        ratio = ps[:, :, :, 1:] / ps[:, :, :, :1]
    spread = np.nanmax(ratio, axis=2) - np.nanmin(ratio, axis=2)
    return bool(np.nanmax(np.abs(spread)) <= tol)


@dataclass
class OracleResult:
    q_exact: np.ndarray          # x, a, z
    h_exact: np.ndarray          # k-1, x, a, w (binary outcome: k-1 = 0)
    theta_lemma: np.ndarray      # a, k-1
    theta_ipw: np.ndarray
    theta_or: np.ndarray
    theta_dr: np.ndarray
    beta_designed: np.ndarray    # per x: (x, a-1, k-1); nan if not constant in U
    selection_ok: bool
    observed_residual: float     # max residual of the observable bridge equations

    @staticmethod
    def _log_ratio(t):
        return np.log(t[1:, :] / t[:1, :])

    @property
    def beta_lemma(self):
        return self._log_ratio(self.theta_lemma)

    @property
    def beta_ipw(self):
        return self._log_ratio(self.theta_ipw)

    @property
    def beta_or(self):
        return self._log_ratio(self.theta_or)

    @property
    def beta_dr(self):
        return self._log_ratio(self.theta_dr)

    @property
    def beta0_true(self) -> float:
        """Designed log odds ratio (binary A, Y; constant over X) or nan."""
        b = self.beta_designed
        if b.size and np.allclose(b, b.flat[0], atol=1e-12):
            return float(b.flat[0])
        return float("nan")

    def max_identity_gap(self):
        ref = self.beta_lemma
        return float(max(np.max(np.abs(b - ref)) for b in (self.beta_ipw, self.beta_or, self.beta_dr)))


def _observable_residual(law, q, h):
    """Max violation of the observable-level bridge equations."""
    ps = law.selected()
    pxayzw = ps.sum(axis=0)
    nx, na, ny, nz, nw = pxayzw.shape
    worst = 0.0
    ref = pxayzw[:, :, 0]                       # x a z w (Y=0)
    for x in range(nx):
        pw = ref[x].sum(axis=(0, 1))            # w
        for a in range(na):
            # E[q(a,Z,x) | A=a, W, x, Y=0] = 1 / P(A=a | W, x, Y=0)
            paw = ref[x, a].sum(axis=0)         # w
            lhs = (ref[x, a] * q[x, a][:, None]).sum(axis=0) / np.where(paw > 0, paw, 1)
            rhs = np.where(paw > 0, pw / np.where(paw > 0, paw, 1), 0)
            worst = max(worst, float(np.max(np.abs(np.where(paw > 0, lhs - rhs, 0)))))
            for k in range(1, ny):
                # E[h_k(a,W,x) | A=a, Z, x, Y=0] = P(Y=k | a, Z, x) / P(Y=0 | a, Z, x)
                pz0 = ref[x, a].sum(axis=1)
                pzk = pxayzw[x, a, k].sum(axis=1)
                lhs = (ref[x, a] * h[k - 1, x, a][None, :]).sum(axis=1) / np.where(pz0 > 0, pz0, 1)
                rhs = pzk / np.where(pz0 > 0, pz0, 1)
                worst = max(worst, float(np.max(np.abs(np.where(pz0 > 0, lhs - rhs, 0)))))
    return worst


def discrete_oracle(law: DiscreteLaw, c=None) -> OracleResult:
    """Exact bridges and the four population expressions of the log OR.

    Bridges come from the latent-level equations; the residual of the
    observable-level equations at those bridges is reported as a check.
    """
    br = _bridges(law)
    q, h = br["q"], br["h"]
    zq, zh = np.zeros_like(q), np.zeros_like(h)
    designed = designed_log_or(law)
    spread = np.nanmax(designed, axis=0) - np.nanmin(designed, axis=0)
    per_x = np.where(np.abs(spread) < 1e-10, designed[0], np.nan)
    return OracleResult(
        q_exact=q,
        h_exact=h,
        theta_lemma=lemma_theta(law, c),
        theta_ipw=population_theta(law, q, zh, c),
        theta_or=population_theta(law, zq, h, c),
        theta_dr=population_theta(law, q, h, c),
        beta_designed=per_x,
        selection_ok=selection_assumption_holds(law),
        observed_residual=_observable_residual(law, q, h),
    )


# ---------------------------------------------------------------------------
# Monte Carlo


ESTIMATORS = ("PIPW", "POR", "PDR", "Kernel")


@dataclass
class EstimatorSummary:
    estimator: str
    scenario: str
    N: int
    replicates: int
    n_converged: int
    bias: Optional[float]
    sd: Optional[float]
    mean_se: Optional[float]
    coverage: Optional[float]
    mean_n: float
    estimates: np.ndarray = field(repr=False, default=None)
    std_errs: np.ndarray = field(repr=False, default=None)
    failures: dict = field(default_factory=dict)

    @property
    def mc_se(self) -> Optional[float]:
        """Monte Carlo standard error of the bias."""
        if self.sd is None or self.n_converged < 2:
            return None
        return self.sd / math.sqrt(self.n_converged)

    def to_dict(self):
        return {
            "estimator": self.estimator, "scenario": self.scenario, "N": self.N,
            "replicates": self.replicates, "n_converged": self.n_converged,
            "bias": self.bias, "sd": self.sd, "mean_se": self.mean_se,
            "coverage": self.coverage, "mc_se": self.mc_se, "mean_selected_n": self.mean_n,
            "failures": self.failures,
        }


@dataclass
class MonteCarloReport:
    spec: DgpSpec
    seed: int
    reps: int
    rows: List[EstimatorSummary]

    def __getitem__(self, estimator) -> EstimatorSummary:
        for r in self.rows:
            if r.estimator == estimator:
                return r
        raise KeyError(estimator)

    def to_dict(self):
        return {"spec": self.spec.to_dict(), "seed": self.seed, "reps": self.reps,
                "rows": [r.to_dict() for r in self.rows]}

    def format_table(self) -> str:
        """Aligned text table: one row per estimator (Bias, SD, SE, Coverage)."""
        head = f"{'Scenario':<9}{'N':>9}  {'Estimator':<8}{'Bias':>8}{'SD':>8}{'SE':>8}{'Cov%':>7}{'conv':>7}"
        lines = [head, "-" * len(head)]

        def fmt(v, spec):
            return f"{v:{spec}}" if v is not None else f"{'-':>{spec.split('.')[0]}}"

        for r in self.rows:
            cov = None if r.coverage is None else 100 * r.coverage
            lines.append(
                f"{r.scenario:<9}{r.N:>9}  {r.estimator:<8}{fmt(r.bias, '8.3f')}{fmt(r.sd, '8.3f')}"
                f"{fmt(r.mean_se, '8.3f')}{fmt(cov, '7.1f')}{r.n_converged:>4}/{r.replicates:<3}"
            )
        return "\n".join(lines)


def replicate_seeds(seed, reps):
    return np.random.SeedSequence(seed).spawn(reps)


def run_replicate(spec: DgpSpec, estimators: Sequence[str], seed, options=None,
                  kernel_config=None):
    """One replicate: {estimator: EstimateResult or the exception}, and n."""
    data = generate(spec, seed)
    sample = data.sample
    out = {}
    parametric = [e for e in estimators if e != "Kernel"]
    if parametric:
        q_spec, h_spec = spec.model_specs(sample)
        weights = MomentWeights.default(q_spec, h_spec)
        q_fit = h_fit = None
        q_err = h_err = None
        try:
            q_fit = solve_q(sample, q_spec, weights, options)
        except ProxorError as exc:
            q_err = exc
        try:
            h_fit = solve_h(sample, h_spec, weights, options)
        except ProxorError as exc:
            h_err = exc
        for est in parametric:
            need_q, need_h = est in ("PIPW", "PDR"), est in ("POR", "PDR")
            if (need_q and q_err) or (need_h and h_err):
                out[est] = q_err if need_q and q_err else h_err
                continue
            try:
                fit = joint_fit(sample, est, q_spec, h_spec, weights, options,
                                q_fit=q_fit if need_q else None, h_fit=h_fit if need_h else None)
                out[est] = fit.result
            except ProxorError as exc:
                out[est] = exc
    if "Kernel" in estimators:
        from .kernel import KernelConfig, crossfit_beta
        try:
            out["Kernel"] = crossfit_beta(sample, kernel_config or KernelConfig())
        except ProxorError as exc:
            out["Kernel"] = exc
    return out, sample.n


def summarize(spec, estimator, results, beta0, ns) -> EstimatorSummary:
    ok = [r for r in results if not isinstance(r, Exception) and r.converged
          and np.isfinite(r.beta_hat) and np.isfinite(r.std_err)]
    fails: Dict[str, int] = {}
    for r in results:
        if isinstance(r, Exception):
            fails[type(r).__name__] = fails.get(type(r).__name__, 0) + 1
        elif r not in ok:
            fails["NotConverged"] = fails.get("NotConverged", 0) + 1
    est = np.array([r.beta_hat for r in ok])
    se = np.array([r.std_err for r in ok])
    k = len(ok)
    return EstimatorSummary(
        estimator, spec.scenario, spec.N, len(results), k,
        bias=float(est.mean() - beta0) if k else None,
        sd=float(est.std(ddof=1)) if k >= 2 else None,
        mean_se=float(se.mean()) if k else None,
        coverage=float(np.mean([r.covers(beta0) for r in ok])) if k else None,
        mean_n=float(np.mean(ns)) if len(ns) else float("nan"),
        estimates=est, std_errs=se, failures=fails,
    )


def run_monte_carlo(spec: DgpSpec, estimators=("PIPW", "POR", "PDR"), reps=500, seed=20240601,
                    options: Optional[SolverOptions] = None, kernel_config=None,
                    progress=None) -> MonteCarloReport:
    """Replicate the design ``reps`` times and summarize each estimator.

    Replicate r uses the r-th child of SeedSequence(seed), so results do
    not depend on execution order.  Failed replicates are excluded from
    bias, SD and coverage and counted in ``failures``.
    """
    if reps < 1:
        raise InvalidSpec("reps must be at least 1")
    estimators = [e if e == "Kernel" else e.upper() for e in
                  (("Kernel" if e.lower() == "kernel" else e) for e in estimators)]
    for e in estimators:
        if e not in ESTIMATORS:
            raise InvalidSpec(f"unknown estimator {e!r}; expected one of {ESTIMATORS}")
    collected = {e: [] for e in estimators}
    ns = []
    for r, ss in enumerate(replicate_seeds(seed, reps)):
        res, n = run_replicate(spec, estimators, ss, options, kernel_config)
        ns.append(n)
        for e in estimators:
            collected[e].append(res[e])
        if progress is not None:
            progress(r + 1, reps)
    rows = [summarize(spec, e, collected[e], spec.beta0, ns) for e in estimators]
    return MonteCarloReport(spec, seed, reps, rows)
