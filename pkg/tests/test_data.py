import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from proxor import (
    EstimateResult,
    MomentWeights,
    SaturatedBinary,
    SelectedSample,
    find_violations,
    validate,
)
from proxor.data import Z975
from proxor.errors import (
    DegenerateStratum,
    DimensionMismatch,
    NonBinaryOutcome,
    NonBinaryTreatment,
    ValidationError,
)


def minimal():
    return SelectedSample([0, 1, 0, 1], [0, 0, 1, 1], [0.5, 1.0, 2.0, 3.0], [1.0, 0.0, 1.0, 0.0])


def test_minimal_sample_is_valid():
    s = minimal()
    assert validate(s) is s
    assert (s.n, s.p, s.r, s.d) == (4, 1, 1, 0)
    assert find_violations(s) == []


def test_non_binary_treatment_reports_row():
    s = SelectedSample([0, 1, 2, 1], [0, 0, 1, 1], [0, 1, 0, 1], [1, 0, 1, 0])
    with pytest.raises(NonBinaryTreatment) as exc:
        validate(s)
    v = exc.value.violations[0]
    assert (v.kind, v.row, v.column) == ("NonBinaryTreatment", 2, "a")


def test_non_binary_outcome():
    s = SelectedSample([0, 1, 0, 1], [0, 0.5, 1, 1], [0, 1, 0, 1], [1, 0, 1, 0])
    with pytest.raises(NonBinaryOutcome):
        validate(s)


def test_all_y_zero_is_degenerate():
    s = SelectedSample([0, 1, 0, 1], [0, 0, 0, 0], [0, 1, 0, 1], [1, 0, 1, 0])
    with pytest.raises(DegenerateStratum) as exc:
        validate(s)
    assert any("y=1" in v.reason for v in exc.value.violations)


def test_row_count_mismatch():
    s = SelectedSample([0, 1, 0, 1], [0, 0, 1, 1], [0, 1, 0], [1, 0, 1, 0])
    with pytest.raises(DimensionMismatch):
        validate(s)


def test_non_finite_proxy_is_reported():
    s = SelectedSample([0, 1, 0, 1], [0, 0, 1, 1], [0, np.nan, 0, 1], [1, 0, 1, 0])
    kinds = {(v.kind, v.row, v.column) for v in find_violations(s)}
    assert ("DimensionMismatch", 1, "z1") in kinds


def test_all_violations_listed():
    s = SelectedSample([0, 3, 0, 3], [0, 0, 7, 1], [0, 1, 0, 1], [1, 0, 1, 0])
    with pytest.raises(ValidationError) as exc:
        validate(s)
    kinds = sorted(v.kind for v in exc.value.violations)
    assert kinds == ["NonBinaryOutcome", "NonBinaryTreatment", "NonBinaryTreatment"]


def test_arrays_are_read_only():
    s = minimal()
    with pytest.raises(ValueError):
        s.a[0] = 1.0
    assert s.z.shape == (4, 1) and s.x.shape == (4, 0)


def test_subset_and_equality():
    s = minimal()
    sub = s.subset([0, 1, 2, 3])
    assert sub == s
    assert s.subset([1, 2]).n == 2


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.floats(-5, 5)), min_size=4,
                max_size=30))
def test_validate_is_idempotent(rows):
    a, y, z = (np.array(c, dtype=float) for c in zip(*rows))
    s = SelectedSample(a, y, z, z[::-1].copy())
    try:
        once = validate(s)
    except ValidationError as exc:
        with pytest.raises(type(exc)):
            validate(s)
        return
    twice = validate(once)
    assert twice == s
    for name in ("a", "y", "z", "w", "x"):
        assert getattr(twice, name).tobytes() == getattr(s, name).tobytes()


def test_wald_interval():
    r = EstimateResult.wald("PDR", -1.2, 0.3, converged=True, iterations=3,
                            moment_residual_norm=0.0)
    assert Z975 == pytest.approx(norm.ppf(0.975), abs=1e-15)
    assert r.ci_low == -1.2 - Z975 * 0.3 and r.ci_high == -1.2 + Z975 * 0.3
    assert r.ci_low <= r.beta_hat <= r.ci_high
    assert r.odds_ratio == pytest.approx(math.exp(-1.2))
    assert r.covers(-1.0) and not r.covers(0.0)
    d = r.to_dict()
    assert d["method"] == "PDR" and (d["ci_low"], d["ci_high"]) == (r.ci_low, r.ci_high)
    assert d["odds_ratio"] == r.odds_ratio


def test_moment_weights_dimension_check():
    s = minimal()
    spec = SaturatedBinary()
    spec_bin = SelectedSample([0, 1, 0, 1], [0, 0, 1, 1], [0, 1, 0, 1], [1, 0, 1, 0])
    MomentWeights.default(spec, spec).check(spec_bin, spec, spec)
    bad = MomentWeights(kappa1=lambda a, w, x: np.ones((len(a), 3)))
    with pytest.raises(DimensionMismatch):
        bad.check(s, q_spec=spec)
    with pytest.raises(DimensionMismatch):
        MomentWeights().check(s, h_spec=spec)


def test_scaled_weights():
    w = MomentWeights().scaled(5.0)
    assert np.all(w.c(np.zeros((3, 0))) == 5.0)
