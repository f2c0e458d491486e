import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proxor import (
    BridgeFit,
    DgpSpec,
    InverseLogisticTreatment,
    LinearBasis,
    LogLinearOutcome,
    MomentWeights,
    SaturatedBinary,
    SelectedSample,
    SolverOptions,
    discrete_oracle,
    eval_h,
    eval_q,
    generate,
    h_moment,
    q_moment,
    solve_h,
    solve_q,
    true_bridge_params_continuous,
)
from proxor.errors import DegenerateStratum, DimensionMismatch, NoConvergence, SingularJacobian
from proxor.families import logistic_irls
from proxor.simulation import binary_law

from conftest import random_binary_sample

# Scenario II population bridge parameters, evaluated by hand from the
# continuous design's coefficients (see test_simulation for the derivation).
TAU_II = (-0.601953125, -0.05859375, 0.25, 0.9375)
PSI_II = (0.1021875, math.log(0.2), -0.5, -0.875)


def test_inverse_logistic_at_zero():
    fit = BridgeFit.fixed(InverseLogisticTreatment(1, 1), np.zeros(4), "q")
    assert eval_q(fit, 1, 0.0, 0.0) == pytest.approx(2.0, abs=0)


def test_saturated_constant_q():
    fit = BridgeFit.fixed(SaturatedBinary(), [2.0, 0, 0, 0], "q")
    for a in (0, 1):
        for z in (0, 1):
            assert eval_q(fit, a, z) == 2.0


def test_scenario_ii_q_value():
    fit = BridgeFit.fixed(InverseLogisticTreatment(1, 1), TAU_II, "q")
    expected = 1 + math.exp(TAU_II[0] + TAU_II[2] * 1 + TAU_II[3] * 0.5)
    assert eval_q(fit, 0, 1.0, 0.5) == pytest.approx(expected, rel=1e-14)


def test_scenario_ii_h_value():
    fit = BridgeFit.fixed(LogLinearOutcome(1, 1), PSI_II, "h")
    expected = math.exp(PSI_II[0] + PSI_II[1] + PSI_II[2] * 2 + PSI_II[3] * 0.5)
    assert eval_h(fit, 1, 2.0, 0.5) == pytest.approx(expected, rel=1e-14)


def test_loglinear_zero_and_saturated_constant_h():
    assert eval_h(BridgeFit.fixed(LogLinearOutcome(2, 1), np.zeros(5), "h"), 1, [3.0, -1], 2) == 1.0
    assert eval_h(BridgeFit.fixed(SaturatedBinary(), [0.25, 0, 0, 0], "h"), 1, 1) == 0.25


def test_eval_dimension_mismatch():
    fit = BridgeFit.fixed(InverseLogisticTreatment(2, 1), np.zeros(5), "q")
    with pytest.raises(DimensionMismatch):
        eval_q(fit, 1, [0.0], [0.0])


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.integers(0, 1),
       st.floats(-3, 3), st.floats(0, 1))
def test_family_positivity(theta, a, v, x):
    q = eval_q(BridgeFit.fixed(InverseLogisticTreatment(1, 1), theta, "q"), a, v, x)
    h = eval_h(BridgeFit.fixed(LogLinearOutcome(1, 1), theta, "h"), a, v, x)
    assert q > 1 and h > 0


# (z, w) counts with Z and W associated, so the proxies are informative
ZW_COUNTS = {(0, 0): 15, (1, 1): 15, (0, 1): 5, (1, 0): 5}


def _balanced_sample():
    # Y=0 rows: A independent of (Z, W) with P(A=1 | Y=0) = 1/2
    rows = []
    for a in (0, 1):
        for (z, w), k in ZW_COUNTS.items():
            rows += [(a, 0, z, w)] * k
    rows += [(1, 1, 1, 0), (0, 1, 0, 1), (1, 1, 0, 1), (0, 1, 1, 0)] * 3
    a, y, z, w = (np.array(c, dtype=float) for c in zip(*rows))
    return SelectedSample(a, y, z, w)


def test_solve_q_constant_two():
    s = _balanced_sample()
    fit = solve_q(s, SaturatedBinary())
    assert np.allclose(fit.params, [2, 0, 0, 0], atol=1e-12)
    assert fit.converged and fit.residual_norm <= 1e-8


def test_solve_h_constant_odds():
    # Y independent of (A, Z, W) with odds 1/3 within every cell
    rows = []
    for a in (0, 1):
        for (z, w), k in ZW_COUNTS.items():
            rows += [(a, 0, z, w)] * (3 * k) + [(a, 1, z, w)] * k
    a, y, z, w = (np.array(c, dtype=float) for c in zip(*rows))
    fit = solve_h(SelectedSample(a, y, z, w), SaturatedBinary())
    assert np.allclose(fit.params, [1 / 3, 0, 0, 0], atol=1e-12)


def _cell_values(fit, role):
    ev = eval_q if role == "q" else eval_h
    return np.array([[ev(fit, a, v) for v in (0, 1)] for a in (0, 1)])


def test_saturated_fit_matches_exact_bridges_large_sample():
    law = binary_law()
    orc = discrete_oracle(law)
    s = law.sample(1_000_000, seed=3)
    spec = SaturatedBinary()
    q = _cell_values(solve_q(s, spec), "q")
    h = _cell_values(solve_h(s, spec), "h")
    # RMS sampling error at n = 1e6 is about 0.03 for q and 0.008 for h
    assert np.max(np.abs(q - orc.q_exact[0])) < 0.15
    assert np.max(np.abs(h - orc.h_exact[0, 0])) < 0.05


def test_scenario_ii_large_sample_recovers_closed_form():
    spec = DgpSpec.scenario_spec("II", N=2_000_000)
    s = generate(spec, 11).sample
    tp = true_bridge_params_continuous(spec)
    q = solve_q(s, InverseLogisticTreatment.for_sample(s))
    h = solve_h(s, LogLinearOutcome.for_sample(s))
    # psi is exact; tau relies on a rare-outcome approximation
    assert np.allclose(h.params, tp.psi, atol=0.15)
    assert np.allclose(q.params, tp.tau, atol=0.25)


def test_converged_fit_has_small_moment(rng):
    s = random_binary_sample(rng)
    spec = SaturatedBinary()
    fq, fh = solve_q(s, spec), solve_h(s, spec)
    assert np.linalg.norm(q_moment(s, fq)) <= SolverOptions().tolerance
    assert np.linalg.norm(h_moment(s, fh)) <= SolverOptions().tolerance


def test_newton_agrees_with_linear_solve(rng):
    s = random_binary_sample(rng)
    spec = SaturatedBinary()
    w = MomentWeights.default(spec, spec)
    ref = 1 - s.y
    k1 = w.kappa1(s.a, s.w, s.x)
    fq = spec.features(s.a, s.z, s.x)
    mat = (ref[:, None] * k1).T @ fq / s.n
    rhs = (ref[:, None] * (w.kappa1(np.ones(s.n), s.w, s.x) + w.kappa1(np.zeros(s.n), s.w, s.x))
           ).sum(axis=0) / s.n
    direct = np.linalg.solve(mat, rhs)
    fit = solve_q(s, spec, w, x0=np.zeros(4))
    assert fit.method == "newton"
    assert np.allclose(fit.params, direct, atol=1e-10)


def test_duplicated_basis_column_is_singular(rng):
    s = random_binary_sample(rng)
    dup = LinearBasis(lambda a, v, x: np.column_stack([np.ones_like(a), a, v[:, 0], v[:, 0]]), 4)
    with pytest.raises(SingularJacobian):
        solve_q(s, dup)


def test_outcome_rows_do_not_affect_q(rng):
    s = random_binary_sample(rng)
    cases = np.flatnonzero(s.y == 1)
    z = s.z.copy()
    z[cases] = z[rng.permutation(cases)]
    z[cases[0]] = 1 - z[cases[0]]
    s2 = SelectedSample(s.a, s.y, z, s.w)
    p1 = solve_q(s, SaturatedBinary()).params
    p2 = solve_q(s2, SaturatedBinary()).params
    assert np.array_equal(p1, p2)


def test_single_treatment_among_controls_is_degenerate():
    s = SelectedSample([0, 0, 1, 1, 0, 1], [0, 0, 1, 1, 0, 1], [0, 1, 0, 1, 1, 0],
                       [1, 0, 1, 0, 0, 1])
    with pytest.raises(DegenerateStratum):
        solve_q(s, SaturatedBinary())


def test_iteration_limit_raises():
    s = generate(DgpSpec.scenario_spec("II", N=100_000), 2).sample
    opts = SolverOptions(max_iter=1, fallback=False)
    with pytest.raises(NoConvergence):
        solve_q(s, InverseLogisticTreatment.for_sample(s), options=opts)


def test_logistic_irls_matches_closed_form():
    # saturated design: fitted probabilities equal the cell frequencies
    x = np.array([0] * 40 + [1] * 60, dtype=float)
    t = np.concatenate([np.r_[np.ones(10), np.zeros(30)], np.r_[np.ones(45), np.zeros(15)]])
    b = logistic_irls(np.column_stack([np.ones_like(x), x]), t)
    assert b[0] == pytest.approx(math.log(10 / 30), abs=1e-10)
    assert b[0] + b[1] == pytest.approx(math.log(45 / 15), abs=1e-10)


def test_restart_recovers_stalled_start():
    s = generate(DgpSpec.scenario_spec("II", N=100_000), 5).sample
    fit = solve_q(s, InverseLogisticTreatment.for_sample(s))
    assert fit.converged and fit.residual_norm <= 1e-8
