"""Monte Carlo harness: empirical biases, parameter sweeps, robustness grid."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from . import estimators as est
from . import oracle
from .errors import MatchDidError, UnsupportedConfig, ValidationError
from .guidelines import estimate_guideline_xy
from .model import ModelParams, PanelDataset, sample_population, validate

ESTIMATORS: dict[str, Callable[[PanelDataset], est.EstimateResult]] = {
    "dim": est.difference_in_means,
    "did": est.did_naive,
    "did_x": lambda d: est.did_matched(d, est.MatchSpec("X")),
    "did_xy": lambda d: est.did_matched(d, est.MatchSpec("X_and_YT")),
    "y_only": lambda d: est.did_matched(d, est.MatchSpec("Y0_only")),
}

ORACLES: dict[str, Callable[[Any], float]] = {
    "dim": oracle.bias_dim,
    "did": oracle.bias_did,
    "did_x": oracle.bias_did_match_x,
    "did_xy": oracle.bias_did_match_xy,
    "y_only": oracle.bias_did_match_y_only,
}


@dataclass(frozen=True)
class EmpiricalBias:
    estimator: str
    mean: float
    se: float | None
    n_ok: int
    n_failed: int
    mean_distance: float | None = None


def empirical_bias(model, estimator: str, n: int, reps: int, seed) -> EmpiricalBias:
    """Average of ``tau_hat - tau`` over independent synthetic samples."""
    if estimator not in ESTIMATORS:
        raise ValidationError(f"unknown estimator {estimator!r}")
    if reps < 1:
        raise ValidationError("reps must be at least 1")
    vm = validate(model)
    fn = ESTIMATORS[estimator]
    base = list(np.atleast_1d(seed).astype(int))
    vals, dists, failed = [], [], 0
    for rep in range(reps):
        data = sample_population(vm, n, base + [rep])
        try:
            res = fn(data)
        except MatchDidError:
            failed += 1
            continue
        vals.append(res.tau_hat - vm.params.tau)
        if res.mean_distance is not None:
            dists.append(res.mean_distance)
    if not vals:
        return EmpiricalBias(estimator, float("nan"), None, 0, failed)
    arr = np.asarray(vals)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else None
    return EmpiricalBias(
        estimator=estimator,
        mean=float(arr.mean()),
        se=se,
        n_ok=len(arr),
        n_failed=failed,
        mean_distance=float(np.mean(dists)) if dists else None,
    )


_PATH = re.compile(r"^([a-z_0-9]+)((?:\[\d+\])*)$")


def with_param(params: ModelParams, path: str, value: float) -> ModelParams:
    """Return a copy of ``params`` with one entry changed.

    Paths are field names with optional indices (``beta_theta[1][0]``) or the
    scalar-model shortcuts ``delta_theta``, ``delta_x`` and ``rho``.
    """
    value = float(value)
    if path in ("delta_theta", "delta_x"):
        name = "mu_theta" if path == "delta_theta" else "mu_x"
        mu = getattr(params, name).copy()
        mu[1] = mu[0] + value
        return params.replace(**{name: mu})
    if path == "rho":
        if params.p != 1 or params.q != 1:
            raise UnsupportedConfig("rho shortcut requires p = q = 1")
        cov = np.sqrt(params.sigma_tt[0, 0] * params.sigma_xx[0, 0]) * value
        return params.replace(sigma_tx=np.array([[cov]]))
    m = _PATH.match(path)
    if not m or not hasattr(params, m.group(1)):
        raise ValidationError(f"unknown parameter path {path!r}")
    name = m.group(1)
    idx = tuple(int(i) for i in re.findall(r"\[(\d+)\]", m.group(2)))
    current = getattr(params, name)
    if not idx:
        if isinstance(current, np.ndarray):
            return params.replace(**{name: np.full_like(current, value)})
        return params.replace(**{name: value})
    arr = np.array(current, dtype=float, copy=True)
    arr[idx] = value
    if name in ("sigma_tt", "sigma_xx") and len(idx) == 2:
        arr[idx[::-1]] = value
    return params.replace(**{name: arr})


@dataclass
class SweepSpec:
    base: ModelParams
    axis: str
    values: list[float]
    estimators: list[str] = field(default_factory=lambda: ["dim", "did", "did_x", "did_xy"])
    n_units: int = 50_000
    replications: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.values or not np.all(np.isfinite(self.values)):
            raise ValidationError("sweep axis values must be finite and non-empty")
        if self.replications < 1:
            raise ValidationError("replications must be at least 1")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ValidationError(f"unknown estimators {bad}")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "SweepSpec":
        kw = {k: v for k, v in doc.items() if k != "base"}
        return cls(base=ModelParams.from_dict(doc["base"]), **kw)


SWEEP_COLUMNS = (
    "axis", "value", "estimator", "oracle_bias", "empirical_bias", "se",
    "n_ok", "n_failed", "mean_distance", "error",
)


def run_sweep(spec: SweepSpec) -> list[dict[str, Any]]:
    """Oracle and Monte Carlo bias for each axis value and estimator."""
    rows = []
    for i, value in enumerate(spec.values):
        params = with_param(spec.base, spec.axis, value)
        for j, name in enumerate(spec.estimators):
            row: dict[str, Any] = dict.fromkeys(SWEEP_COLUMNS)
            row.update(axis=spec.axis, value=float(value), estimator=name, error="")
            try:
                row["oracle_bias"] = ORACLES[name](params)
                emp = empirical_bias(params, name, spec.n_units, spec.replications, [spec.seed, i, j])
                row.update(
                    empirical_bias=emp.mean,
                    se=emp.se,
                    n_ok=emp.n_ok,
                    n_failed=emp.n_failed,
                    mean_distance=emp.mean_distance,
                )
            except MatchDidError as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
    return rows


THETA_PATTERNS = {
    "stable": [0.6, 0.6, 0.6, 0.6, 0.8],
    "last-two-stable": [0.0, 0.2, 0.6, 0.6, 0.8],
    "fully-varying": [0.0, 0.2, 0.4, 0.6, 0.8],
}
X_PATTERNS = {
    "stable": [[0.25, 0.40]] * 5,
    "varying": [[0.25, 0.40], [0.50, 0.30], [0.60, 0.05], [0.35, 0.25], [0.70, 0.50]],
}
CORRELATIONS = {
    "all": ((0.3, 0.6), 0.5),
    "x-theta-only": ((0.3, 0.6), 0.0),
    "x-x-only": ((0.0, 0.0), 0.5),
    "none": ((0.0, 0.0), 0.0),
}
DEFAULT_NOISE_SD = [round(0.1 * k, 10) for k in range(1, 16)]


def robustness_model(theta: str, corr: str, xpat: str, sigma_e2: float, specs=None) -> ModelParams:
    """Four pre-periods, two covariates, unit variances, treated means 1."""
    thetas = (specs or {}).get("theta_patterns", THETA_PATTERNS)
    xs = (specs or {}).get("x_patterns", X_PATTERNS)
    (c1, c2), cxx = CORRELATIONS[corr]
    return ModelParams.build(
        beta_theta=thetas[theta],
        beta_x=xs[xpat],
        mu_theta=[[0.0], [1.0]],
        mu_x=[[0.0, 0.0], [1.0, 1.0]],
        sigma_tt=[[1.0]],
        sigma_xx=[[1.0, cxx], [cxx, 1.0]],
        sigma_tx=[[c1, c2]],
        sigma_e2=sigma_e2,
    )


@dataclass
class RobustnessSpec:
    theta_patterns: list[str] = field(default_factory=lambda: list(THETA_PATTERNS))
    correlations: list[str] = field(default_factory=lambda: list(CORRELATIONS))
    x_patterns: list[str] = field(default_factory=lambda: list(X_PATTERNS))
    noise_sd: list[float] = field(default_factory=lambda: list(DEFAULT_NOISE_SD))
    n_units: int = 10_000
    replications: int = 200
    seed: int = 0
    theta_slopes: dict[str, list[float]] = field(default_factory=lambda: dict(THETA_PATTERNS))
    x_slopes: dict[str, list[list[float]]] = field(default_factory=lambda: dict(X_PATTERNS))

    def __post_init__(self):
        for name, grid in (
            ("theta_patterns", self.theta_patterns),
            ("correlations", self.correlations),
            ("x_patterns", self.x_patterns),
            ("noise_sd", self.noise_sd),
        ):
            if not grid:
                raise ValidationError(f"{name} grid is empty")
        unknown = (
            [t for t in self.theta_patterns if t not in self.theta_slopes]
            + [c for c in self.correlations if c not in CORRELATIONS]
            + [x for x in self.x_patterns if x not in self.x_slopes]
        )
        if unknown:
            raise ValidationError(f"unknown factor levels {unknown}")
        if any(not np.isfinite(s) or s < 0 for s in self.noise_sd):
            raise ValidationError("noise standard deviations must be finite and non-negative")
        if self.replications < 1:
            raise ValidationError("replications must be at least 1")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RobustnessSpec":
        return cls(**doc)


ROBUSTNESS_COLUMNS = (
    "theta_pattern", "correlation", "x_pattern", "sigma_e", "sigma_e2",
    "true_r", "true_s", "true_threshold", "decision_margin",
    "true_bias_x", "true_bias_xy", "true_delta_tau_xy", "oracle_match",
    "frac_match", "guideline_match", "agree", "frac_agree",
    "mean_delta_tau_xy_hat", "mean_delta_tau_xy_signed", "est_minus_true",
    "mean_sigma_e2_hat", "expected_sigma_e2_hat", "mean_r_hat", "mean_s_hat",
    "turnover_sigma_e", "n_ok", "n_failed",
)


def true_gain(params: ModelParams) -> tuple[float, float, float]:
    """(bias matched on X, bias matched on X and lags, |first| - |second|)."""
    b_x = oracle.bias_did_match_x(params)
    b_xy = oracle.bias_did_match_xy(params)
    return b_x, b_xy, abs(b_x) - abs(b_xy)


def turnover_sigma_e(make: Callable[[float], ModelParams], lo: float = 1e-3, hi: float = 20.0) -> float | None:
    """Noise standard deviation at which matching on lags stops reducing bias."""

    def f(sd):
        return true_gain(make(sd * sd))[2]

    f_lo, f_hi = f(lo), f(hi)
    if f_lo == 0:
        return lo
    if np.sign(f_lo) == np.sign(f_hi):
        return None
    return float(brentq(f, lo, hi, xtol=1e-12))


def run_robustness(spec: RobustnessSpec, progress: Callable[[int, int], None] | None = None) -> list[dict[str, Any]]:
    """Guideline decisions versus the exact oracle across the factor grid."""
    specs = {"theta_patterns": spec.theta_slopes, "x_patterns": spec.x_slopes}
    rows = []
    cells = [
        (t, c, x)
        for t in spec.theta_patterns
        for c in spec.correlations
        for x in spec.x_patterns
    ]
    total = len(cells) * len(spec.noise_sd)
    done = 0
    for ci, (t, c, x) in enumerate(cells):

        def make(s2, t=t, c=c, x=x):
            return robustness_model(t, c, x, s2, specs)

        turnover = turnover_sigma_e(make)
        for ni, sd in enumerate(spec.noise_sd):
            s2 = sd * sd
            params = make(s2)
            vm = validate(params)
            rel = oracle.reliability(vm).value
            s = vm.derived.s
            decision = oracle.match_decision(rel, s)
            b_x, b_xy, gain = true_gain(vm)
            T = vm.T
            bt = params.beta_theta[:, 0]
            s2t = float(vm.derived.tilde_sigma_theta2[0, 0])
            expected_sigma = s2 + (bt[T - 1] - bt[T - 2]) ** 2 * s2t / 2
            votes, hats, signed, sig, rh, sh = [], [], [], [], [], []
            failed = 0
            for rep in range(spec.replications):
                data = sample_population(vm, spec.n_units, [spec.seed, ci, ni, rep], oracle=False)
                try:
                    g = estimate_guideline_xy(data)
                except MatchDidError:
                    failed += 1
                    continue
                votes.append(g.match_y)
                hats.append(g.delta_tau_xy_hat)
                signed.append(g.delta_tau_xy_signed)
                sig.append(g.sigma_e2_hat)
                rh.append(g.r_hat)
                sh.append(g.s_hat)
            oracle_match = bool(gain > 0)
            frac = float(np.mean(votes)) if votes else float("nan")
            guide = bool(frac > 0.5) if votes else None
            mean_signed = float(np.mean(signed)) if signed else float("nan")
            rows.append(
                {
                    "theta_pattern": t,
                    "correlation": c,
                    "x_pattern": x,
                    "sigma_e": float(sd),
                    "sigma_e2": float(s2),
                    "true_r": rel,
                    "true_s": s,
                    "true_threshold": decision.threshold,
                    "decision_margin": decision.margin,
                    "true_bias_x": b_x,
                    "true_bias_xy": b_xy,
                    "true_delta_tau_xy": gain,
                    "oracle_match": oracle_match,
                    "frac_match": frac,
                    "guideline_match": guide,
                    "agree": None if guide is None else guide == oracle_match,
                    "frac_agree": float(np.mean(np.asarray(votes) == oracle_match)) if votes else float("nan"),
                    "mean_delta_tau_xy_hat": float(np.mean(hats)) if hats else float("nan"),
                    "mean_delta_tau_xy_signed": mean_signed,
                    "est_minus_true": mean_signed - gain,
                    "mean_sigma_e2_hat": float(np.mean(sig)) if sig else float("nan"),
                    "expected_sigma_e2_hat": float(expected_sigma),
                    "mean_r_hat": float(np.mean(rh)) if rh else float("nan"),
                    "mean_s_hat": float(np.mean(sh)) if sh else float("nan"),
                    "turnover_sigma_e": turnover,
                    "n_ok": len(votes),
                    "n_failed": failed,
                }
            )
            done += 1
            if progress is not None:
                progress(done, total)
    return rows


def summarize_robustness(rows: Sequence[dict[str, Any]], margin: float = 0.02) -> dict[str, Any]:
    """Cell-level agreement away from the decision boundary."""
    far = [r for r in rows if abs(r["decision_margin"]) > margin and r["agree"] is not None]
    wrong = [r for r in rows if r["agree"] is False]
    return {
        "cells": len(rows),
        "cells_far_from_boundary": len(far),
        "agreement_far": float(np.mean([r["agree"] for r in far])) if far else float("nan"),
        "misclassified": len(wrong),
        "max_abs_gain_misclassified": max((abs(r["true_delta_tau_xy"]) for r in wrong), default=0.0),
    }


def spec_to_dict(spec) -> dict[str, Any]:
    out = asdict(spec)
    if isinstance(spec, SweepSpec):
        out["base"] = spec.base.to_dict()
    return out
