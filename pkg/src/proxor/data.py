"""Observed-data containers, validation and shared result types."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable, List, Optional

import numpy as np
from scipy.stats import norm

from .errors import (
    DegenerateStratum,
    DimensionMismatch,
    NonBinaryOutcome,
    NonBinaryTreatment,
    ValidationError,
)


def _as_matrix(v, n=None):
    if v is None:
        return np.zeros((0 if n is None else n, 0))
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    return arr


def _frozen(arr):
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SelectedSample:
    """Observed rows (A, Y, Z, W, X) of the selected (S=1) subsample.

    ``z``, ``w`` and ``x`` are stored as 2-D float arrays; ``x`` may have zero
    columns.  The latent confounder never appears here.
    """

    a: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x: np.ndarray = None

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(-1)
        object.__setattr__(self, "a", _frozen(a))
        object.__setattr__(self, "y", _frozen(np.asarray(self.y, dtype=float).reshape(-1)))
        object.__setattr__(self, "z", _frozen(_as_matrix(self.z)))
        object.__setattr__(self, "w", _frozen(_as_matrix(self.w)))
        object.__setattr__(self, "x", _frozen(_as_matrix(self.x, n=len(a))))

    @property
    def n(self) -> int:
        return int(self.a.shape[0])

    @property
    def p(self) -> int:
        return int(self.z.shape[1])

    @property
    def r(self) -> int:
        return int(self.w.shape[1])

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    def subset(self, idx) -> "SelectedSample":
        idx = np.asarray(idx)
        return SelectedSample(self.a[idx], self.y[idx], self.z[idx], self.w[idx], self.x[idx])

    def __eq__(self, other):
        if not isinstance(other, SelectedSample):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("a", "y", "z", "w", "x")
        )

    __hash__ = None


@dataclass(frozen=True)
class Violation:
    kind: str
    row: Optional[int]
    column: Optional[str]
    reason: str


_ERROR_BY_KIND = {
    "NonBinaryTreatment": NonBinaryTreatment,
    "NonBinaryOutcome": NonBinaryOutcome,
    "DimensionMismatch": DimensionMismatch,
    "DegenerateStratum": DegenerateStratum,
}


def find_violations(sample: SelectedSample) -> List[Violation]:
    """Return every invariant violation in ``sample`` (empty when valid)."""
    out: List[Violation] = []
    n = sample.n
    if n == 0:
        out.append(Violation("DimensionMismatch", None, None, "sample has no rows"))
        return out
    for name in ("y", "z", "w", "x"):
        rows = getattr(sample, name).shape[0]
        if rows != n:
            out.append(
                Violation("DimensionMismatch", None, name, f"{name} has {rows} rows, expected {n}")
            )
    if out:
        return out
    for name, kind in (("a", "NonBinaryTreatment"), ("y", "NonBinaryOutcome")):
        col = getattr(sample, name)
        for i in np.flatnonzero(~np.isin(col, (0.0, 1.0))):
            out.append(Violation(kind, int(i), name, f"value {col[i]!r} is not 0 or 1"))
    for name in ("z", "w", "x"):
        mat = getattr(sample, name)
        bad = ~np.isfinite(mat)
        for i, j in zip(*np.nonzero(bad)):
            out.append(
                Violation("DimensionMismatch", int(i), f"{name}{j + 1}", "missing or non-finite value")
            )
    if not any(v.kind in ("NonBinaryTreatment", "NonBinaryOutcome") for v in out):
        for name in ("a", "y"):
            col = getattr(sample, name)
            for level in (1, 0):
                if not np.any(col == level):
                    out.append(
                        Violation("DegenerateStratum", None, name, f"{name}={level} stratum is empty")
                    )
    return out


def validate(sample: SelectedSample) -> SelectedSample:
    """Check the sample invariants and return the sample unchanged.

    Raises the error class of the first violation found; the exception's
    ``violations`` attribute lists all of them.
    """
    problems = find_violations(sample)
    if problems:
        first = problems[0]
        where = f" at row {first.row}" if first.row is not None else ""
        msg = f"{first.kind}{where}: {first.reason}"
        if len(problems) > 1:
            msg += f" (+{len(problems) - 1} more)"
        raise _ERROR_BY_KIND.get(first.kind, ValidationError)(msg, problems)
    return sample


def constant_c(x):
    """Default outcome-contrast weight c(X) = 1."""
    return np.ones(np.shape(x)[0])


class SpecFeatures:
    """Gradient-matched moment weight: the bridge's own linear design,
    evaluated with the opposite proxy substituted in."""

    def __init__(self, spec):
        self.spec = spec

    def __call__(self, a, v, x):
        return self.spec.features(a, v, x)

    def __repr__(self):
        return f"SpecFeatures({self.spec!r})"


@dataclass(frozen=True)
class MomentWeights:
    """User-chosen functions c(X), kappa1(A, W, X) and kappa2(A, Z, X)."""

    c: Callable = constant_c
    kappa1: Optional[Callable] = None
    kappa2: Optional[Callable] = None

    @classmethod
    def default(cls, q_spec=None, h_spec=None, c=constant_c) -> "MomentWeights":
        k1 = SpecFeatures(q_spec) if q_spec is not None and q_spec.dim > 0 else None
        k2 = SpecFeatures(h_spec) if h_spec is not None and h_spec.dim > 0 else None
        return cls(c=c, kappa1=k1, kappa2=k2)

    def scaled(self, factor: float) -> "MomentWeights":
        c = self.c
        return MomentWeights(c=lambda x: factor * c(x), kappa1=self.kappa1, kappa2=self.kappa2)

    def check(self, sample: SelectedSample, q_spec=None, h_spec=None) -> None:
        """Verify exact identification: kappa dims must match parameter dims."""
        head = slice(0, min(sample.n, 2))
        a, z, w, x = sample.a[head], sample.z[head], sample.w[head], sample.x[head]
        cv = np.asarray(self.c(x))
        if cv.shape != (a.shape[0],):
            raise DimensionMismatch(f"c(X) must return one value per row, got shape {cv.shape}")
        if q_spec is not None and q_spec.dim > 0:
            if self.kappa1 is None:
                raise DimensionMismatch("kappa1 is required to fit the treatment bridge")
            k = np.asarray(self.kappa1(a, w, x))
            if k.ndim != 2 or k.shape[1] != q_spec.dim:
                raise DimensionMismatch(
                    f"kappa1 has dimension {k.shape[-1]}, treatment bridge has {q_spec.dim}"
                )
        if h_spec is not None and h_spec.dim > 0:
            if self.kappa2 is None:
                raise DimensionMismatch("kappa2 is required to fit the outcome bridge")
            k = np.asarray(self.kappa2(a, z, x))
            if k.ndim != 2 or k.shape[1] != h_spec.dim:
                raise DimensionMismatch(
                    f"kappa2 has dimension {k.shape[-1]}, outcome bridge has {h_spec.dim}"
                )


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_iter: int = 200
    fallback: bool = True
    # condition number above which the moment Jacobian counts as singular
    max_condition: float = 1e12


Z975 = float(norm.ppf(0.975))


@dataclass
class EstimateResult:
    method: str
    beta_hat: float
    std_err: float
    ci_low: float
    ci_high: float
    converged: bool
    iterations: int
    moment_residual_norm: float
    theta1: float = float("nan")
    theta0: float = float("nan")
    extra: dict = field(default_factory=dict)

    @classmethod
    def wald(cls, method, beta_hat, std_err, **kw) -> "EstimateResult":
        half = Z975 * std_err
        return cls(method, float(beta_hat), float(std_err), float(beta_hat - half),
                   float(beta_hat + half), **kw)

    @property
    def odds_ratio(self) -> float:
        return float(np.exp(self.beta_hat))

    def covers(self, value: float) -> bool:
        return bool(self.ci_low <= value <= self.ci_high)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["odds_ratio"] = self.odds_ratio
        return out
