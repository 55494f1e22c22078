"""Acceptance criteria, one test per numbered requirement.

Every test prints exactly one verdict line of the form

    ACCEPTANCE nn PASS|FAIL <criterion> (<detail>)

so the captured output of this module is a 13-line scorecard. Sample
sizes, tolerances, and reference values follow the package contract:
closed forms where they exist, the independent oracle everywhere else,
3-sigma style margins tied to measured Monte Carlo standard errors.
"""

import math
import time

import numpy as np
import pytest

from bias_lab import (
    ExperimentConfig,
    GramModel,
    cli,
    engine,
    oracle,
    templates as tpl,
    theory,
)

PAIR_RHOS = (-1.0, -0.5, 0.0, 0.5, 0.9, 0.99)

# E[max of n iid standard normals]; frozen from the quadrature oracle
MAX_MEAN = {
    16: 1.765991393055,
    64: 2.343733465079,
    256: 2.826863278939,
    1024: 3.248239601375,
    4096: 3.626082177769,
}


def _line(num, ok, title, detail=""):
    state = "PASS" if ok else "FAIL"
    tail = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {num:02d} {state} {title}{tail}")
    assert ok, f"criterion {num} failed: {title}{tail}"


def _info(num, title, detail):
    print(f"ACCEPTANCE {num:02d} INFO {title} ({detail})")


def _rand_corr(rng, L, rmax=0.8):
    while True:
        a = rng.standard_normal((L, 2 * L))
        c = a @ a.T
        d = np.sqrt(np.diag(c))
        rho = c / np.outer(d, d)
        off = rho - np.diag(np.diag(rho))
        top = np.max(np.abs(off))
        if top > rmax:
            rho = np.eye(L) + off * (rmax / top)
        if np.linalg.eigvalsh(rho)[0] > 1e-6:
            return rho


def _equicorrelated(L, rho):
    return GramModel.from_correlation(
        np.eye(L) * (1.0 - rho) + np.full((L, L), rho))


@pytest.fixture(scope="module")
def pair_family():
    """Six hard pair runs at M = 1e6, shared by criteria 1 and 2."""
    estimates = {}
    t0 = time.perf_counter()
    for rho in PAIR_RHOS:
        ts = tpl.make_pair(rho)
        cfg = ExperimentConfig(m=1_000_000, seed=101, mode="gram")
        estimates[rho] = engine.hard_assign(ts, cfg)
    elapsed = time.perf_counter() - t0
    return estimates, elapsed


def test_criterion_01_hard_pair_closed_form(pair_family):
    estimates, elapsed = pair_family
    worst = 0.0
    for rho, est in estimates.items():
        want = math.sqrt((1.0 - rho) / math.pi)
        worst = max(worst, abs(float(est.corr[0, 0]) - want))
    ok = worst <= 0.005 and elapsed < 5.0
    _line(1, ok, "hard pair matches sqrt((1-rho)/pi) at six correlations",
          f"max |error| {worst:.5f} <= 0.005, runtime {elapsed:.2f} s < 5 s")


def test_criterion_02_pair_antisymmetry(pair_family):
    estimates, _ = pair_family
    worst_ratio = 0.0
    for rho, est in estimates.items():
        gap = np.abs(est.corr[1] + est.corr[0])
        tol = 3.0 * (est.stderr[1] + est.stderr[0])
        worst_ratio = max(worst_ratio, float(np.max(gap / tol)))
    ok = worst_ratio <= 1.0
    _line(2, ok, "estimate row of x1 is the negative of the row of x0",
          f"worst |gap| / (3 stderr) = {worst_ratio:.2f}")


def test_criterion_03_sharp_soft_meets_hard():
    rng = np.random.default_rng(2024)
    g = GramModel.from_correlation(_rand_corr(rng, 3))
    hard = engine.hard_assign(g, ExperimentConfig(m=1_000_000, seed=21))
    soft = engine.soft_assign(g, ExperimentConfig(m=1_000_000, seed=21,
                                                  beta=100.0))
    gap = float(np.max(np.abs(hard.corr - soft.corr)))
    tol = max(0.01, 5.0 * float(np.max(hard.stderr + soft.stderr)))
    ok = gap <= tol
    _line(3, ok, "beta=100 soft run coincides with the hard run at L=3",
          f"max |corr gap| {gap:.5f} <= {tol:.5f}")


def test_criterion_04_weak_soft_linear_slope():
    g = GramModel.from_correlation(np.eye(4))
    beta = 1e-3
    est = engine.soft_assign(g, ExperimentConfig(m=10_000_000, seed=31,
                                                 beta=beta))
    slope = est.corr / beta
    want = theory.beta_zero_limit(g).predicted_corr
    tol = 5.0 * est.stderr / beta
    gap = np.abs(slope - want)
    ok = bool(np.all(gap <= tol))
    _line(4, ok, "corr/beta at beta=0.001 matches [3/4, -1/4, -1/4, -1/4]",
          f"worst entry gap/tol = {float(np.max(gap / tol)):.2f}, M=1e7")


def test_criterion_05_positivity_and_dominance():
    rng = np.random.default_rng(777)
    failures = 0
    worst_z = math.inf
    for i in range(50):
        L = int(rng.integers(2, 7))
        g = GramModel.from_correlation(_rand_corr(rng, L))
        seed = 5000 + i
        hard = engine.hard_assign(g, ExperimentConfig(m=1_000_000,
                                                      seed=seed))
        soft = engine.soft_assign(g, ExperimentConfig(m=1_000_000,
                                                      seed=seed, beta=1.0))
        for est in (hard, soft):
            diag = np.diag(est.corr)
            z = float(np.min(diag / np.diag(est.stderr)))
            worst_z = min(worst_z, z)
            if z <= 3.0:
                failures += 1
        for a in range(L):
            for b in range(L):
                if a == b:
                    continue
                gap = hard.corr[a, a] - hard.corr[a, b]
                se = math.hypot(hard.stderr[a, a], hard.stderr[a, b])
                worst_z = min(worst_z, gap / se)
                if gap <= 3.0 * se:
                    failures += 1
    ok = failures == 0
    _line(5, ok, "50 random sets: self correlation positive, hard diagonal "
          "dominant, both at 3 sigma",
          f"failures {failures}, worst z-score {worst_z:.1f}")


def test_criterion_06_average_inverse_dependency():
    ok = True
    details = []
    for L in (2, 3, 4):
        g_lo = _equicorrelated(L, 0.0)
        g_hi = _equicorrelated(L, 0.5)
        for kind, beta in (("hard", math.inf), ("soft", 1.0)):
            run = engine.hard_assign if kind == "hard" else engine.soft_assign
            lo = run(g_lo, ExperimentConfig(m=1_000_000, seed=60 + L,
                                            beta=beta))
            hi = run(g_hi, ExperimentConfig(m=1_000_000, seed=60 + L,
                                            beta=beta))
            margin = lo.avg_self_corr - hi.avg_self_corr
            se = math.hypot(lo.avg_self_stderr, hi.avg_self_stderr)
            ok = ok and margin > 3.0 * se
            if L == 2 and kind == "hard":
                ok = ok and abs(lo.avg_self_corr - 0.5642) <= 0.005
                ok = ok and abs(hi.avg_self_corr - 0.3989) <= 0.005
                details.append(f"L=2 hard {lo.avg_self_corr:.4f} vs "
                               f"{hi.avg_self_corr:.4f}")
    _line(6, ok, "mass-weighted self correlation decreases from rho=0 to "
          "rho=0.5 at L=2,3,4 for both estimators",
          "; ".join(details))


def test_criterion_07_individual_inverse_dependency():
    L = 8
    seq_lo = [1.0] + [0.0] * (L - 1)
    seq_hi = [1.0, 0.4] + [0.0] * (L - 3) + [0.4]
    g_lo = tpl.make_circulant(seq_lo).gram()
    g_hi = tpl.make_circulant(seq_hi).gram()
    min_z = math.inf
    for kind, beta in (("hard", math.inf), ("soft", 1.0)):
        run = engine.hard_assign if kind == "hard" else engine.soft_assign
        lo = run(g_lo, ExperimentConfig(m=1_000_000, seed=70, beta=beta))
        hi = run(g_hi, ExperimentConfig(m=1_000_000, seed=70, beta=beta))
        for ell in range(L):
            gap = lo.corr[ell, ell] - hi.corr[ell, ell]
            se = math.hypot(lo.stderr[ell, ell], hi.stderr[ell, ell])
            min_z = min(min_z, gap / se)
    ok = min_z > 3.0
    _line(7, ok, "every per-cluster self correlation drops when circulant "
          "off-diagonals grow from 0 to 0.4",
          f"smallest z-score {min_z:.1f}")


def test_criterion_08_span_residual_scaling():
    x0 = tpl.make_exponential(50, 0.08)
    ts = tpl.make_haar_family(x0, 3, seed=88)
    small = engine.hard_assign(ts, ExperimentConfig(m=10_000, seed=80,
                                                    mode="full"))
    large = engine.hard_assign(ts, ExperimentConfig(m=1_000_000, seed=81,
                                                    mode="full"))
    r_small = engine.span_residual(small, ts)
    r_large = engine.span_residual(large, ts)
    ratio = float(np.mean(r_small / r_large))
    ok = 7.0 <= ratio <= 13.0 and float(np.max(r_large)) < 0.1
    _line(8, ok, "out-of-span fraction shrinks like 1/sqrt(M) over "
          "M=1e4 to 1e6 and ends below 0.1",
          f"mean shrink factor {ratio:.1f} in [7, 13], "
          f"residual at 1e6 {float(np.max(r_large)):.4f}")


def test_criterion_09_finite_l_oracle_agreement():
    g = GramModel.from_correlation(np.eye(3))
    est = engine.soft_assign(g, ExperimentConfig(m=1_000_000, seed=90,
                                                 beta=1.0))
    worst = 0.0
    for ell in range(3):
        ref = oracle.soft_moments(g, 1.0, ell)
        gap = abs(float(est.corr[ell, ell]) - float(ref.ratio()[ell]))
        tol = 3.0 * (float(est.stderr[ell, ell]) + float(ref.ratio_bound()))
        worst = max(worst, gap / tol)
    ref0 = oracle.soft_moments(g, 1.0, 0)
    truth = float(ref0.ratio()[0])
    pred = float(theory.soft_finite_prediction(g).predicted_corr[0, 0])
    rel = abs(pred - truth) / abs(truth)
    _info(9, "first-order expansion vs oracle at L=3, unit scale",
          f"prediction {pred:.5f}, oracle {truth:.5f}, relative gap "
          f"{100.0 * rel:.0f}%; the expansion sits outside its validity "
          f"region here, reported for transparency and not gated")
    ok = worst <= 1.0
    _line(9, ok, "soft engine matches the oracle at L=3 orthonormal, "
          "beta=1", f"worst |gap| / tolerance {worst:.2f}")


def test_criterion_10_gumbel_sweep():
    levels = (16, 64, 256, 1024, 4096)
    t0 = time.perf_counter()
    ratios = []
    ok = True
    details = []
    for lv in levels:
        cfg = ExperimentConfig(m=1_000_000, seed=100 + lv)
        est = engine.hard_assign_diag(lv, cfg)
        want = MAX_MEAN[lv]
        a_l, b_l, _ = theory.gumbel_constants(lv)
        gap = abs(est.avg_self_corr - want)
        ok = ok and gap <= 3.0 * est.avg_self_stderr + 1e-9
        ratios.append(est.avg_self_corr / a_l)
        details.append(f"L={lv}: ratio {ratios[-1]:.3f}, b_L {b_l:.3f}")
    drift = [abs(r - 1.0) for r in ratios]
    ok = ok and all(a > b for a, b in zip(drift, drift[1:]))
    ok = ok and drift[-1] <= 0.15
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 60.0
    _line(10, ok, "orthonormal sweep matches E[max of L normals] with the "
          "ratio to sqrt(2 log L) rising toward 1",
          "; ".join(details) + f"; |ratio-1| at 4096 = {drift[-1]:.3f}"
          f" <= 0.15; runtime {elapsed:.1f} s < 60 s")


def test_criterion_11_soft_consistency_l256():
    cfg = ExperimentConfig(m=10_000_000, seed=110, beta=1.0)
    est = engine.soft_assign_diag(256, cfg)
    val = float(est.avg_self_corr)
    ok = 0.95 <= val <= 1.01
    _line(11, ok, "soft self correlation at orthonormal L=256, beta=1, "
          "M=1e7 lies in [0.95, 1.01]",
          f"measured {val:.5f}, first-order reference 0.98938")


def test_criterion_12_oracle_self_checks():
    rng = np.random.default_rng(12012)
    worst_ibp = 0.0
    for _ in range(10):
        L = int(rng.integers(2, 4))
        g = GramModel.from_correlation(_rand_corr(rng, L))
        beta = float(rng.uniform(0.2, 5.0))
        ell = int(rng.integers(0, L))
        worst_ibp = max(worst_ibp, oracle.ibp_residual(g, beta, ell))
    ibp_ok = worst_ibp < 1e-6
    quad_gap = 0.0
    for rho in (-0.7, 0.0, 0.6, 0.95):
        g = GramModel.from_correlation(np.array([[1.0, rho], [rho, 1.0]]))
        ex = oracle.hard_moments(g, 0)
        qd = oracle.hard_moments(g, 0, method="quadrature")
        quad_gap = max(quad_gap, float(np.max(np.abs(ex.value - qd.value))),
                       abs(ex.mass - qd.mass))
    quad_ok = quad_gap < 1e-8
    mass_ok = True
    for seq in ([1.0, 0.3, 0.3], [1.0, 0.3, 0.1, 0.1, 0.3]):
        g = tpl.make_circulant(seq).gram()
        L = g.L
        for ell in range(L):
            res = oracle.soft_moments(g, 1.0, ell)
            tol = max(float(res.mass_bound), 1e-9)
            mass_ok = mass_ok and abs(res.mass - 1.0 / L) <= tol
    ok = ibp_ok and quad_ok and mass_ok
    _line(12, ok, "oracle self checks: parts identity, exact vs "
          "quadrature, circulant occupancy 1/L",
          f"worst ibp residual {worst_ibp:.2e} < 1e-6, exact/quadrature "
          f"gap {quad_gap:.2e} < 1e-8, occupancy within bound: {mass_ok}")


def test_criterion_13_verification_determinism(tmp_path):
    t0 = time.perf_counter()
    rep_a = cli.verify("fast", str(tmp_path / "a"))
    rep_b = cli.verify("fast", str(tmp_path / "b"))
    elapsed = time.perf_counter() - t0
    names_a = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    names_b = sorted(p.name for p in (tmp_path / "b").glob("*.csv"))
    identical = names_a == names_b and all(
        (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
        for n in names_a)
    ok = (rep_a.all_pass() and rep_b.all_pass() and identical
          and len(names_a) > 0 and elapsed < 120.0)
    _line(13, ok, "fast verification suite passes twice with byte-identical "
          "CSV artifacts",
          f"{len(names_a)} CSV files, two runs in {elapsed:.1f} s < 120 s")
