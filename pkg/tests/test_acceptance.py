"""Acceptance criteria 1-10.

Every Monte Carlo study uses the package default seed (DEFAULT_SEED) and is
run once; a one-line PASS/FAIL summary per criterion is printed at the end
of the pytest session.  Run alone with

    pytest tests/test_acceptance.py -v
"""

import math

import numpy as np
import pytest

from proxor import (
    BridgeFit,
    DgpSpec,
    EffectModSpec,
    InverseLogisticTreatment,
    KernelConfig,
    LogLinearOutcome,
    PolytomousSample,
    SaturatedBinary,
    effect_mod_fit,
    estimate_pdr,
    estimate_pipw,
    estimate_por,
    eval_h,
    eval_q,
    generate,
    joint_fit,
    polytomous_fit,
    run_monte_carlo,
    solve_h,
    solve_q,
)
from proxor.cli import DEFAULT_SEED
from proxor.errors import ProxorError
from proxor.estimators import constant_basis
from proxor.kernel import _Design, _fit_fold, crossfit_fit, moment_weights
from proxor.simulation import binary_law, discrete_oracle, random_law

from conftest import well_posed_sample
from saddle_oracle import minimax_objective, quadratic_saddle

BETA0 = math.log(0.2)
REPS = 500
METHODS = ("POR", "PIPW", "PDR")

_reports = {}


def report(name, N):
    key = (name, N)
    if key not in _reports:
        spec = DgpSpec.scenario_spec(name, N=N)
        _reports[key] = run_monte_carlo(spec, METHODS, REPS, DEFAULT_SEED)
    return _reports[key]


def describe(rep):
    parts = []
    for m in METHODS:
        r = rep[m]
        parts.append(f"{m} bias={r.bias:+.3f} sd={r.sd:.3f} se={r.mean_se:.3f} "
                     f"cov={100 * r.coverage:.1f}% conv={r.n_converged}/{r.replicates}")
    return "; ".join(parts)


def check(record_property, number, failures, detail):
    record_property("criterion", number)
    record_property("detail", detail if not failures else f"{detail} | failed: {'; '.join(failures)}")
    assert not failures, "; ".join(failures)


def test_criterion_01_scenario_i(record_property):
    rep = report("I", 5000)
    fails = []
    for m in METHODS:
        r = rep[m]
        if abs(r.bias) > 0.04:
            fails.append(f"{m} |bias| {abs(r.bias):.3f} > 0.04")
        if not 0.18 <= r.sd <= 0.27:
            fails.append(f"{m} SD {r.sd:.3f} outside [0.18, 0.27]")
        if not 0.934 <= r.coverage <= 0.994:
            fails.append(f"{m} coverage {100 * r.coverage:.1f}% outside [93.4, 99.4]")
    check(record_property, 1, fails, describe(rep))


def test_criterion_02_scenario_ii(record_property):
    rep = report("II", 100_000)
    fails = []
    for m in METHODS:
        r = rep[m]
        if abs(r.bias) > 0.05:
            fails.append(f"{m} |bias| {abs(r.bias):.3f} > 0.05")
        if not 0.91 <= r.coverage <= 0.98:
            fails.append(f"{m} coverage {100 * r.coverage:.1f}% outside [91, 98]")
    check(record_property, 2, fails, describe(rep))


def test_criterion_03_scenario_iii(record_property):
    rep = report("III", 200_000)
    fails = []
    r = rep["PIPW"]
    if not -0.14 <= r.bias <= -0.06:
        fails.append(f"PIPW bias {r.bias:+.3f} outside [-0.14, -0.06]")
    if r.coverage > 0.92:
        fails.append(f"PIPW coverage {100 * r.coverage:.1f}% > 92%")
    for m in ("POR", "PDR"):
        r = rep[m]
        if abs(r.bias) > 0.04:
            fails.append(f"{m} |bias| {abs(r.bias):.3f} > 0.04")
        if r.coverage < 0.93:
            fails.append(f"{m} coverage {100 * r.coverage:.1f}% < 93%")
    check(record_property, 3, fails, describe(rep))


def test_criterion_04_scenario_iv(record_property):
    rep = report("IV", 200_000)
    fails = []
    r = rep["POR"]
    if not -0.15 <= r.bias <= -0.07:
        fails.append(f"POR bias {r.bias:+.3f} outside [-0.15, -0.07]")
    for m in ("PIPW", "PDR"):
        r = rep[m]
        if abs(r.bias) > 0.04:
            fails.append(f"{m} |bias| {abs(r.bias):.3f} > 0.04")
        if r.coverage < 0.93:
            fails.append(f"{m} coverage {100 * r.coverage:.1f}% < 93%")
    check(record_property, 4, fails, describe(rep))


def test_criterion_05_scenario_v(record_property):
    rep = report("V", 200_000)
    fails = []
    b = {m: abs(rep[m].bias) for m in METHODS}
    for m in METHODS:
        if b[m] < 0.05:
            fails.append(f"{m} |bias| {b[m]:.3f} < 0.05")
    if b["PDR"] > b["PIPW"] + 0.02:
        fails.append(f"PDR |bias| {b['PDR']:.3f} > PIPW |bias| {b['PIPW']:.3f} + 0.02")
    if b["PDR"] > b["POR"] + 0.02:
        fails.append(f"PDR |bias| {b['PDR']:.3f} > POR |bias| {b['POR']:.3f} + 0.02")
    check(record_property, 5, fails, describe(rep))


def test_criterion_06_oracle_identities(record_property):
    rng = np.random.default_rng(DEFAULT_SEED)
    worst, count = 0.0, 0
    fails = []
    for i in range(25):
        beta = float(rng.uniform(-1.5, 1.5))
        law = random_law(DEFAULT_SEED + i, n_x=1 + i % 3, beta=beta)
        orc = discrete_oracle(law)
        vals = [orc.beta_ipw[0, 0], orc.beta_or[0, 0], orc.beta_dr[0, 0], orc.beta_lemma[0, 0]]
        gap = max(abs(v - beta) for v in vals)
        worst = max(worst, gap, abs(orc.beta0_true - beta))
        count += 1
        if gap > 1e-10:
            fails.append(f"law {i}: gap {gap:.2e}")
    check(record_property, 6, fails, f"{count} random laws, max |identity gap| = {worst:.2e}")


def test_criterion_07_reductions(record_property):
    rng = np.random.default_rng(DEFAULT_SEED)
    fails = []
    for i in range(100):
        s, q, h = well_posed_sample(rng, n=300)
        pipw, por = estimate_pipw(s, q), estimate_por(s, h)
        a = estimate_pdr(s, q, BridgeFit.zero("h"))
        b = estimate_pdr(s, BridgeFit.zero("q"), h)
        if a.beta_hat != pipw.beta_hat:
            fails.append(f"sample {i}: PDR(h=0) {a.beta_hat!r} != PIPW {pipw.beta_hat!r}")
        if b.beta_hat != por.beta_hat:
            fails.append(f"sample {i}: PDR(q=0) {b.beta_hat!r} != POR {por.beta_hat!r}")
    s, _, _ = well_posed_sample(rng, n=800)
    ps = PolytomousSample.from_arrays(s.a, s.y, s.z, s.w, a_ref=0.0, y_ref=0.0)
    poly_gap = 0.0
    for m in METHODS:
        pr = polytomous_fit(ps, m)
        fit = joint_fit(s, m, SaturatedBinary(), SaturatedBinary())
        poly_gap = max(poly_gap, abs(pr.betas[0, 0] - fit.beta_hat))
    if poly_gap > 1e-10:
        fails.append(f"polytomous J=K=1 gap {poly_gap:.2e}")
    s2 = generate(DgpSpec.scenario_spec("II", N=100_000), DEFAULT_SEED).sample
    qs, hs = InverseLogisticTreatment.for_sample(s2), LogLinearOutcome.for_sample(s2)
    em_gap = 0.0
    for m in METHODS:
        hom = joint_fit(s2, m, qs, hs)
        em = effect_mod_fit(s2, m, EffectModSpec(constant_basis), hom.q_fit, hom.h_fit)
        em_gap = max(em_gap, abs(em.alpha[0] - hom.beta_hat))
    if em_gap > 1e-8:
        fails.append(f"effect-modification gap {em_gap:.2e}")
    check(record_property, 7, fails,
          f"100 samples bit-for-bit; polytomous gap {poly_gap:.1e}; constant-model gap {em_gap:.1e}")


def _bridge_error(law, orc, n, reps):
    eq, eh = [], []
    for r in range(reps):
        s = law.sample(n, seed=DEFAULT_SEED + 1000 * r + n)
        try:
            q, h = solve_q(s, SaturatedBinary()), solve_h(s, SaturatedBinary())
        except ProxorError:
            continue
        qv = np.array([[eval_q(q, a, z) for z in (0, 1)] for a in (0, 1)])
        hv = np.array([[eval_h(h, a, w) for w in (0, 1)] for a in (0, 1)])
        eq.append(np.sqrt(np.mean((qv - orc.q_exact[0]) ** 2)))
        eh.append(np.sqrt(np.mean((hv - orc.h_exact[0, 0]) ** 2)))
    return float(np.mean(eq)), float(np.mean(eh))


def test_criterion_08_root_n_rate(record_property):
    law = binary_law()
    orc = discrete_oracle(law)
    ns = np.array([1_000, 10_000, 100_000])
    errs = np.array([_bridge_error(law, orc, int(n), 40) for n in ns])
    slopes = [float(np.polyfit(np.log(ns), np.log(errs[:, j]), 1)[0]) for j in (0, 1)]
    fails = [f"{role} slope {sl:.3f} outside [-0.65, -0.35]"
             for role, sl in zip("qh", slopes) if not -0.65 <= sl <= -0.35]
    detail = (f"q slope {slopes[0]:.3f}, h slope {slopes[1]:.3f}; "
              f"RMS errors q {np.round(errs[:, 0], 4).tolist()}, h {np.round(errs[:, 1], 4).tolist()}")
    check(record_property, 8, fails, detail)


def test_criterion_09_sandwich_calibration(record_property):
    fails, parts = [], []
    for name, N in (("I", 5000), ("II", 100_000)):
        rep = report(name, N)
        for m in METHODS:
            r = rep[m]
            ratio = r.mean_se / r.sd
            parts.append(f"{name}/{m} meanSE/SD={ratio:.3f} (median SE/SD="
                         f"{np.median(r.std_errs) / r.sd:.3f})")
            if abs(ratio - 1) > 0.15:
                fails.append(f"{name}/{m} mean SE {r.mean_se:.3f} vs SD {r.sd:.3f}")
    check(record_property, 9, fails, "; ".join(parts))


def test_criterion_10_kernel(record_property):
    fails, parts = [], []
    worst = 0.0
    for seed in (1, 2, 3):
        s = generate(DgpSpec.scenario_spec("II", N=8000), seed).sample.subset(np.arange(50))
        cfg = KernelConfig()
        d = _Design(s, cfg)
        fe = _fit_fold(d, 0)
        out, m = fe.out_fold, fe.m
        kq = d.qb.gram(d.zx[out], d.zx[out])
        kh = d.hb.gram(d.wx[out], d.wx[out])
        lam = {k: cfg.lam(k, m) for k in ("lambda_q", "lambda_h", "lambda_qstar", "lambda_hstar")}
        for a in (0, 1):
            g1, g2, g3 = moment_weights(s.a[out], s.y[out], np.ones(m), a)
            th = quadratic_saddle(minimax_objective(kq, kh, g1, g3, lam["lambda_q"],
                                                    lam["lambda_hstar"]), 2 * m)
            worst = max(worst, np.max(np.abs(kq @ th[:m] - kq @ fe.gamma_coefs[a])))
            th = quadratic_saddle(minimax_objective(kh, kq, g1, g2, lam["lambda_h"],
                                                    lam["lambda_qstar"]), 2 * m)
            worst = max(worst, np.max(np.abs(kh @ th[:m] - kh @ fe.alpha_coefs[a])))
    parts.append(f"closed form vs saddle oracle max diff {worst:.1e}")
    if worst > 1e-6:
        fails.append(f"saddle mismatch {worst:.2e}")

    rep = run_monte_carlo(DgpSpec.scenario_spec("II", N=20_000), ["Kernel"], 100, DEFAULT_SEED)
    r = rep["Kernel"]
    parts.append(f"kernel bias {r.bias:+.3f}, MC-SE {r.mc_se:.3f}, conv {r.n_converged}/100")
    if abs(r.bias) > 3 * r.mc_se:
        fails.append(f"kernel |bias| {abs(r.bias):.3f} > 3 MC-SE {3 * r.mc_se:.3f}")

    fit = crossfit_fit(generate(DgpSpec.scenario_spec("II", N=20_000), DEFAULT_SEED).sample)
    ok = (fit.zeta1 == float(np.mean([f.zeta1 for f in fit.folds]))
          and fit.zeta0 == float(np.mean([f.zeta0 for f in fit.folds])))
    parts.append(f"zeta aggregation exact: {ok}")
    if not ok:
        fails.append("zeta aggregation identity")
    check(record_property, 10, fails, "; ".join(parts))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
