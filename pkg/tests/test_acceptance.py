"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line before asserting; the lines are echoed in
the terminal summary by conftest.py.
"""

import csv
import json
import time

import numpy as np
import pytest

import independent as ind
from matchdid import oracle
from matchdid.cli import main
from matchdid.dataio import write_panel
from matchdid.estimators import did_naive, did_twoway_fe
from matchdid.guidelines import bootstrap_guidelines, estimate_guideline_xy, lag_match_gain
from matchdid.linalg import block_inverse, mvn_conditional_mean, structured_inverse_q
from matchdid.model import ModelParams, PanelDataset, two_period_base, sample_population, scalar_params, validate
from matchdid.simlab import RobustnessSpec, empirical_bias, robustness_model, run_robustness, summarize_robustness

RESULTS: list[str] = []


def record(number, title, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    RESULTS.append(line)
    print(line, flush=True)
    return ok


def stable_correlated_model(**overrides):
    """Three stable pre-periods, two correlated covariates."""
    kw = dict(
        beta_theta=[[1.0], [1.0], [1.0], [1.5]],
        beta_x=[[0.5, 0.2], [0.6, 0.3], [0.4, 0.1], [0.8, 0.5]],
        mu_theta=[[0.0], [1.0]],
        mu_x=[[0.0, 0.0], [0.5, 1.0]],
        sigma_tt=[[1.0]],
        sigma_xx=[[1.0, 0.3], [0.3, 1.0]],
        sigma_tx=[[0.3, 0.4]],
        sigma_e2=0.25,
        p_treat=0.3,
    )
    kw.update(overrides)
    return ModelParams.build(**kw)


# 1 -------------------------------------------------------------------------


def test_oracle_simulation_agreement():
    t0 = time.perf_counter()
    p = two_period_base()
    targets = {"dim": ind.bias_dim(p), "did": ind.bias_did(p), "did_x": ind.bias_x(p), "did_xy": ind.bias_xy(p)}
    # cross-check the analytic reference by its own regression Monte Carlo
    # U = (theta, x, y0, y1); match on x and y0, compare y1
    mc, mc_se = ind.mc_matched_bias(p, [0, 0, 0, 1], [1, 2], 200_000, 7)
    assert abs(mc - targets["did_xy"]) < 5 * mc_se

    parts, ok = [], True
    for i, (name, target) in enumerate(targets.items()):
        emp = empirical_bias(p, name, 100_000, 20, [1, i])
        tol = 4 * emp.se if name != "did_xy" else max(4 * emp.se, 0.03)
        good = emp.n_ok == 20 and abs(emp.mean - target) <= tol
        ok &= good
        parts.append(f"{name} {emp.mean:.4f} vs {target:.4f} tol {tol:.4f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60
    record(1, "oracle and simulation agree at the two-period base point", ok, "; ".join(parts) + f"; {elapsed:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------


def _draw_scalar(rng, rho=None, beta_x=None):
    bt = rng.uniform(-2, 2, size=2)
    bt[0] = np.sign(bt[0]) * max(abs(bt[0]), 0.1)
    return dict(
        beta_theta=bt,
        beta_x=rng.uniform(-2, 2, size=2) if beta_x is None else beta_x,
        delta_theta=rng.normal(),
        delta_x=rng.normal(),
        sigma_theta=rng.uniform(0.3, 2),
        sigma_x=rng.uniform(0.3, 2),
        rho=rng.uniform(-0.9, 0.9) if rho is None else rho,
        sigma_e2=rng.uniform(0.1, 3),
    )


def two_period_matched_lags(k):
    """Latent trend times residual imbalance times one minus reliability."""
    b0, b1 = k["beta_theta"]
    st, sx, rho = k["sigma_theta"], k["sigma_x"], k["rho"]
    resid_imbalance = k["delta_theta"] - rho * st / sx * k["delta_x"]
    signal = b0**2 * st**2 * (1 - rho**2)
    return b1 * resid_imbalance * (1 - signal / (signal + k["sigma_e2"]))


def two_period_matched_x(k):
    b0, b1 = k["beta_theta"]
    return (b1 - b0) * (k["delta_theta"] - k["rho"] * k["sigma_theta"] / k["sigma_x"] * k["delta_x"])


def no_correlation_matched_lags(k):
    b0, b1 = k["beta_theta"]
    signal = b0**2 * k["sigma_theta"] ** 2
    return b1 * k["delta_theta"] * (1 - signal / (signal + k["sigma_e2"]))


def many_lags_matched(bt, delta, var_theta, sigma_e2):
    T = len(bt) - 1
    signal = T * np.mean(bt[:T] ** 2) * var_theta
    return bt[T] * delta * (1 - signal / (signal + sigma_e2))


def test_reduction_chain():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {k: 0.0 for k in ("two-period", "no-covariate", "zero-correlation", "many-lags", "stable-correlated")}
    count = 1000
    for _ in range(count):
        k = _draw_scalar(rng)
        p = scalar_params(**k)
        b0, b1 = k["beta_theta"]
        bx0, bx1 = k["beta_x"]
        gaps = [
            oracle.bias_did_match_xy(p, cross_check=False) - two_period_matched_lags(k),
            oracle.bias_did_match_x(p) - two_period_matched_x(k),
            oracle.bias_dim(p) - (b1 * k["delta_theta"] + bx1 * k["delta_x"]),
            oracle.bias_did(p) - ((b1 - b0) * k["delta_theta"] + (bx1 - bx0) * k["delta_x"]),
        ]
        worst["two-period"] = max(worst["two-period"], max(map(abs, gaps)))

        k = _draw_scalar(rng, rho=0.0, beta_x=np.zeros(2))
        gap = oracle.bias_did_match_xy(scalar_params(**k), cross_check=False) - no_correlation_matched_lags(k)
        worst["no-covariate"] = max(worst["no-covariate"], abs(gap))

        k = _draw_scalar(rng, rho=0.0)
        gap = oracle.bias_did_match_xy(scalar_params(**k), cross_check=False) - no_correlation_matched_lags(k)
        worst["zero-correlation"] = max(worst["zero-correlation"], abs(gap))

        T = int(rng.integers(2, 6))
        p_dim = int(rng.integers(1, 4))
        bt = rng.uniform(-2, 2, size=T + 1)
        bt[:T] += 0.2 * np.sign(bt[:T])
        var_theta = rng.uniform(0.3, 3)
        a = rng.normal(size=(p_dim, p_dim))
        p = ModelParams.build(
            beta_theta=bt[:, None],
            beta_x=rng.normal(size=(T + 1, p_dim)),
            mu_theta=rng.normal(size=(2, 1)),
            mu_x=rng.normal(size=(2, p_dim)),
            sigma_tt=[[var_theta]],
            sigma_xx=a @ a.T + 0.3 * np.eye(p_dim),
            sigma_tx=np.zeros((1, p_dim)),
            sigma_e2=rng.uniform(0.1, 3),
        )
        delta = float(p.mu_theta[1, 0] - p.mu_theta[0, 0])
        gap = oracle.bias_did_match_xy(p, cross_check=False) - many_lags_matched(bt, delta, var_theta, p.sigma_e2)
        worst["many-lags"] = max(worst["many-lags"], abs(gap))

        # stable pre-periods with correlated covariates: residual imbalance and variance
        bt[:T] = bt[0]
        joint = rng.normal(size=(p_dim + 1, p_dim + 1))
        joint = joint @ joint.T + 0.3 * np.eye(p_dim + 1)
        p = p.replace(
            beta_theta=bt[:, None].copy(),
            sigma_tt=joint[:1, :1],
            sigma_tx=joint[:1, 1:],
            sigma_xx=joint[1:, 1:],
        )
        coef = np.linalg.solve(p.sigma_xx, p.sigma_tx[0])
        resid_delta = delta - coef @ (p.mu_x[1] - p.mu_x[0])
        resid_var = p.sigma_tt[0, 0] - coef @ p.sigma_tx[0]
        gap = oracle.bias_did_match_xy(p, cross_check=False) - many_lags_matched(bt, resid_delta, resid_var, p.sigma_e2)
        worst["stable-correlated"] = max(worst["stable-correlated"], abs(gap))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-10 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {count} sets each; {elapsed:.1f}s"
    record(2, "general bias formula reduces to every special case", ok, detail)
    assert ok


# 3 -------------------------------------------------------------------------


def test_decision_boundary_grid(tmp_path):
    t0 = time.perf_counter()
    s_grid = (np.arange(50) + 0.5) / 25  # 0.02 .. 1.98
    r_grid = (np.arange(50) + 0.5) / 50  # 0.01 .. 0.99
    mask = np.zeros((50, 50), dtype=int)
    mismatches = 0
    for i, s in enumerate(s_grid):
        for j, r in enumerate(r_grid):
            # post loading 1, pre loading s, noise chosen to hit reliability r
            p = scalar_params([s, 1.0], [0.0, 0.0], sigma_e2=s * s * (1 - r) / r)
            rel = oracle.reliability(p).value
            d = oracle.match_decision(rel, validate(p).derived.s)
            helps = abs(oracle.bias_did_match_xy(p)) < abs(oracle.bias_did(p))
            mask[i, j] = int(d.recommend_match_y)
            mismatches += d.recommend_match_y != helps
    out = tmp_path / "decision_mask.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s"] + [f"{r:.2f}" for r in r_grid])
        for s, row in zip(s_grid, mask):
            w.writerow([f"{s:.2f}"] + row.tolist())
    # region structure: matching wins when s is far from one or r is high
    edge = mask[0].sum() > mask[24].sum() and mask[-1].sum() > mask[25].sum() and mask[:, -1].all()
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and edge and elapsed < 5
    record(3, "decision rule equals the bias comparison on a 50x50 grid", ok, f"{mismatches} mismatches; {mask.sum()} match cells; {elapsed:.2f}s")
    assert ok


# 4 -------------------------------------------------------------------------


def test_reliability_grows_with_lags():
    got = []
    for T in (1, 2, 3):
        p = ModelParams.build(
            beta_theta=np.ones((T + 1, 1)),
            beta_x=np.ones((T + 1, 1)),
            mu_theta=[[0.0], [1.0]],
            mu_x=[[0.0], [1.0]],
            sigma_tt=[[1.0]],
            sigma_xx=[[1.0]],
            sigma_tx=[[0.0]],
            sigma_e2=1.0,
        )
        got.append(oracle.reliability(p).value)
    ok = all(abs(g - e) <= 1e-12 for g, e in zip(got, (0.5, 2 / 3, 0.75)))
    ok &= abs(got[2] / got[0] - 1.5) <= 1e-12  # three lags: half again the one-lag reliability
    record(4, "reliability 1/2, 2/3, 3/4 with one to three lags", ok, ", ".join(f"{g:.12f}" for g in got))
    assert ok


# 5 -------------------------------------------------------------------------


def test_reported_decision_arithmetic():
    d = oracle.match_decision(0.937, 0.936)
    ok = d.recommend_match_y and d.threshold == pytest.approx(0.936, abs=1e-12)
    record(5, "reported reliability and slope ratio give a match decision", ok, f"threshold {d.threshold:.3f}")
    assert ok


@pytest.mark.xfail(strict=True, reason="reported aggregates cannot reproduce the reported reduction; see notes")
def test_reported_reduction_band():
    delta, r, s = -0.11, 0.937, 0.936
    # loadings on the reported scale, and a pair with exactly the reported slope ratio
    text_scale = lag_match_gain(0.54, 0.58, delta, r)
    ratio_scale = lag_match_gain(0.58 * s, 0.58, delta, r)
    ok = 0.001 <= abs(ratio_scale) <= 0.006
    record(5, "reduction from reported aggregates lies in 0.001..0.006", ok, f"{abs(ratio_scale):.2e} with consistent loadings, {abs(text_scale):.2e} with reported loadings")
    assert ok


# 6 -------------------------------------------------------------------------


def test_guideline_consistency():
    t0 = time.perf_counter()
    p = stable_correlated_model()
    r_pop = oracle.reliability(p).value
    s_pop = validate(p).derived.s
    hits = 0
    for rep in range(100):
        g = estimate_guideline_xy(sample_population(p, 50_000, [6, rep], oracle=False))
        hits += abs(g.r_hat / r_pop - 1) <= 0.02 and abs(g.s_hat / s_pop - 1) <= 0.02
    elapsed = time.perf_counter() - t0
    ok = hits >= 95 and elapsed < 300
    record(6, "estimated reliability and slope ratio within 2% of population", ok, f"{hits}/100; r {r_pop:.4f}, s {s_pop:.4f}; {elapsed:.1f}s")
    assert ok


# 7 -------------------------------------------------------------------------


def test_noise_inflation_identity():
    p = robustness_model("fully-varying", "all", "varying", 0.09)
    vm = validate(p)
    bt = p.beta_theta[:, 0]
    resid_var = float(vm.derived.tilde_sigma_theta2[0, 0])
    expected = p.sigma_e2 + (bt[3] - bt[2]) ** 2 * resid_var / 2
    sig, rh = [], []
    for rep in range(200):
        g = estimate_guideline_xy(sample_population(vm, 10_000, [7, rep], oracle=False))
        sig.append(g.sigma_e2_hat)
        rh.append(g.r_hat)
    mean, se = np.mean(sig), np.std(sig, ddof=1) / np.sqrt(len(sig))
    r_pop = oracle.reliability(vm).value
    ok = abs(mean - expected) <= 4 * se and np.mean(rh) < r_pop
    record(7, "noise estimate inflated by the slope change; reliability understated", ok,
           f"mean {mean:.5f} vs {expected:.5f} (se {se:.5f}); mean r_hat {np.mean(rh):.4f} < r {r_pop:.4f}")
    assert ok


# 8 -------------------------------------------------------------------------


@pytest.mark.slow
def test_robustness_classification():
    t0 = time.perf_counter()
    rows = run_robustness(RobustnessSpec())
    summary = summarize_robustness(rows)
    elapsed = time.perf_counter() - t0
    ok = (
        summary["agreement_far"] >= 0.99
        and summary["max_abs_gain_misclassified"] < 0.02
        and elapsed < 900
    )
    varying = [r["est_minus_true"] for r in rows if r["theta_pattern"] != "stable"]
    record(8, "guideline decisions agree with the oracle across the robustness grid", ok,
           f"agreement {summary['agreement_far']:.4f} over {summary['cells_far_from_boundary']} cells; "
           f"{summary['misclassified']} misclassified, max |gain| {summary['max_abs_gain_misclassified']:.4f}; "
           f"mean estimated-minus-true gain under unstable loadings {np.mean(varying):+.4f}; {elapsed:.0f}s")
    assert ok


# 9 -------------------------------------------------------------------------


def test_twoway_fe_equals_averaged_did():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        n, T = int(rng.integers(4, 300)), int(rng.integers(1, 6))
        z = np.r_[1, 0, rng.integers(0, 2, n - 2)]
        y = rng.normal(size=(n, T + 1)) * rng.uniform(0.1, 10) + rng.normal(size=T + 1)
        d = PanelDataset(unit_id=np.arange(n), z=z, x=rng.normal(size=(n, 1)), y=y)
        worst = max(worst, abs(did_twoway_fe(d).tau_hat - did_naive(d).tau_hat))
    ok = worst <= 1e-10
    record(9, "two-way fixed effects equals the averaged-pre DiD", ok, f"max gap {worst:.1e} over 100 panels")
    assert ok


# 10 ------------------------------------------------------------------------


def test_matrix_identities():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(300):
        dim = int(rng.integers(1, 21))
        x = rng.uniform(0.5, 10)
        y = rng.uniform(-0.4, 0.4) * x
        dense = np.full((dim, dim), y) + (x - y) * np.eye(dim)
        worst = max(worst, np.abs(structured_inverse_q(x, y, dim) - np.linalg.inv(dense)).max())

        dim = int(rng.integers(2, 21))
        a = rng.normal(size=(dim, dim))
        cov = a @ a.T + 0.5 * np.eye(dim)
        mean = rng.normal(size=dim)
        obs = rng.choice(dim, size=int(rng.integers(1, dim)), replace=False)
        vals = rng.normal(size=len(obs))
        free = np.setdiff1d(np.arange(dim), obs)
        ref = mean[free] + cov[np.ix_(free, obs)] @ np.linalg.inv(cov[np.ix_(obs, obs)]) @ (vals - mean[obs])
        worst = max(worst, np.abs(mvn_conditional_mean(mean, cov, obs, vals) - ref).max())

        k = int(rng.integers(1, dim))
        inv = block_inverse(cov[:k, :k], cov[:k, k:], cov[k:, :k], cov[k:, k:])
        worst = max(worst, np.abs(inv - np.linalg.inv(cov)).max())
    ok = worst <= 1e-10
    record(10, "structured inverse, block inverse and conditional mean match dense solves", ok, f"max gap {worst:.1e}")
    assert ok


# 11 ------------------------------------------------------------------------


def test_bootstrap_reproducible_and_covers(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    p = stable_correlated_model()
    panel = tmp_path / "panel.csv"
    write_panel(sample_population(p, 2000, 11), panel)
    outs = []
    for k in range(2):
        out = tmp_path / f"boot{k}.json"
        assert main(["bootstrap", "--panel", str(panel), "--bootstrap", "200", "--seed", "5", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    same = outs[0] == outs[1] and json.loads(outs[0])["payload"]["report"]["bootstrap"]["n_ok"] == 200

    t0 = time.perf_counter()
    r_pop = oracle.reliability(p).value
    covered = 0
    for rep in range(200):
        data = sample_population(p, 5000, [11, rep], oracle=False)
        lo, hi = bootstrap_guidelines(data, 400, rep).ci["r_hat"]
        covered += lo <= r_pop <= hi
    coverage = covered / 200
    elapsed = time.perf_counter() - t0
    ok = same and 0.90 <= coverage <= 0.99
    record(11, "bootstrap is byte-reproducible and its reliability interval covers", ok,
           f"identical output {same}; coverage {coverage:.3f}; {elapsed:.0f}s")
    assert ok
