"""Data-driven advice on whether to match on covariates and lagged outcomes.

The covariate rule compares covariate imbalance with the change in covariate
slopes. The lagged-outcome rule residualizes outcomes on X within controls,
recovers latent loadings and the noise variance from residual variances, and
compares the implied reliability of the lags with the slope ratio.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import (
    DegenerateLoadings,
    EmptyGroup,
    InsufficientYears,
    InvalidGrid,
    MatchDidError,
    UnsupportedConfig,
)
from .linalg import ols
from .model import PanelDataset, validate
from .oracle import match_decision

DEGENERATE_TOL = 1e-10
CI_LEVEL = 0.95
BOOTSTRAP_FIELDS = (
    "delta_tau_x_hat",
    "sigma_e2_hat",
    "bar_beta_pre_hat",
    "beta_theta_T_hat",
    "r_hat",
    "s_hat",
    "tilde_delta_theta_hat",
    "delta_tau_xy_hat",
)


@dataclass
class BootstrapBlock:
    B: int
    n_ok: int
    n_skipped: int
    skip_reasons: dict[str, int]
    ci: dict[str, list[float] | None]
    match_y_vote_fraction: float | None
    seed: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class GuidelineReport:
    delta_x_hat: list[float]
    Delta_x_hat: list[float]
    delta_tau_x_hat: float
    n_treated: int
    n_control: int
    sigma_e2_hat: float | None = None
    beta_theta_hat: list[float] | None = None
    bar_beta_pre_hat: float | None = None
    beta_theta_T_hat: float | None = None
    r_hat: float | None = None
    s_hat: float | None = None
    tilde_delta_theta_hat: float | None = None
    delta_tau_xy_hat: float | None = None
    delta_tau_xy_signed: float | None = None
    threshold: float | None = None
    margin: float | None = None
    match_x: bool = True
    match_y: bool | None = None
    clamp_flags: list[int] = field(default_factory=list)
    assumed_r: float | None = None
    bootstrap: BootstrapBlock | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Residualized:
    y_tilde: np.ndarray
    z: np.ndarray
    coef: np.ndarray

    @property
    def T(self) -> int:
        return self.y_tilde.shape[1] - 1


def _control_fit(x: np.ndarray, y: np.ndarray, z: np.ndarray):
    co = z == 0
    if not co.any():
        raise EmptyGroup("no control units")
    if not (z == 1).any():
        raise EmptyGroup("no treated units")
    design = np.hstack([np.ones((int(co.sum()), 1)), x[co]])
    return ols(design, y[co]).coef  # (1 + p, T + 1)


def residualize(data: PanelDataset) -> Residualized:
    """Remove the control-group linear effect of X from every period's outcome.

    The intercept is kept, so treated-versus-control gaps survive.
    """
    coef = _control_fit(data.x, data.y, data.z)
    return Residualized(y_tilde=data.y - data.x @ coef[1:], z=data.z, coef=coef)


def estimate_sigma_e2(res: Residualized, t_a: int | None = None, t_b: int | None = None) -> float:
    """Half the control-group variance of the change between two pre-periods."""
    T = res.T
    if T < 2:
        raise UnsupportedConfig("noise variance needs two pre-periods; use sensitivity_t1 for T = 1")
    t_a = T - 1 if t_a is None else t_a
    t_b = T - 2 if t_b is None else t_b
    if t_a == t_b or not (0 <= t_a < T and 0 <= t_b < T):
        raise UnsupportedConfig(f"period pair ({t_a}, {t_b}) must be two distinct pre-periods")
    co = res.z == 0
    diff = res.y_tilde[co, t_a] - res.y_tilde[co, t_b]
    return float(0.5 * np.var(diff, ddof=1))


def _x_part(x, y, z, coef) -> dict[str, Any]:
    T = y.shape[1] - 1
    tr, co = z == 1, z == 0
    delta_x = x[tr].mean(axis=0) - x[co].mean(axis=0)
    slopes = coef[1:]  # (p, T + 1)
    change = slopes[:, T] - slopes[:, :T].mean(axis=1)
    return {
        "delta_x_hat": delta_x.tolist(),
        "Delta_x_hat": change.tolist(),
        "delta_tau_x_hat": float(abs(delta_x @ change)),
        "n_treated": int(tr.sum()),
        "n_control": int(co.sum()),
    }


def estimate_guideline_x(data: PanelDataset) -> GuidelineReport:
    """Estimated bias reduction from matching on X."""
    if data.p < 1:
        raise UnsupportedConfig("covariate guideline needs at least one covariate")
    coef = _control_fit(data.x, data.y, data.z)
    return GuidelineReport(**_x_part(data.x, data.y, data.z, coef))


def _loadings(var_t: np.ndarray, sigma_e2: float) -> tuple[np.ndarray, list[int]]:
    sq = var_t - sigma_e2
    clamped = [int(t) for t in np.flatnonzero(sq < 0)]
    return np.sqrt(np.maximum(sq, 0.0)), clamped


def lag_match_gain(bar_pre: float, beta_T: float, tilde_delta: float, r: float) -> float:
    """Bias removed by also matching on lags; negative when it adds bias."""
    return abs((beta_T - bar_pre) * tilde_delta) - abs(beta_T * tilde_delta * (1.0 - r))


def _finish(
    base: dict[str, Any],
    y_tilde: np.ndarray,
    z: np.ndarray,
    T: int,
    sigma_e2: float,
    beta: np.ndarray,
    clamped: list[int],
    r: float,
    n_pre: int,
    assumed_r: float | None = None,
) -> GuidelineReport:
    tr, co = z == 1, z == 0
    scale = max(1.0, float(np.sqrt(np.var(y_tilde[co], axis=0).mean())))
    bar = float(beta[:n_pre].mean())
    beta_T = float(beta[T])
    if bar <= DEGENERATE_TOL * scale:
        raise DegenerateLoadings("mean pre-period loading is zero; latent imbalance is not identified")
    if beta_T <= DEGENERATE_TOL * scale:
        raise DegenerateLoadings("post-period loading is zero; slope ratio is not identified")
    s = bar / beta_T
    gaps = y_tilde[tr, :n_pre].mean(axis=0) - y_tilde[co, :n_pre].mean(axis=0)
    tilde_delta = float(gaps.mean() / bar)
    signed = lag_match_gain(bar, beta_T, tilde_delta, r)
    decision = match_decision(min(max(r, 0.0), 1.0), s)
    return GuidelineReport(
        **base,
        sigma_e2_hat=float(sigma_e2),
        beta_theta_hat=beta.tolist(),
        bar_beta_pre_hat=bar,
        beta_theta_T_hat=beta_T,
        r_hat=float(r),
        s_hat=float(s),
        tilde_delta_theta_hat=tilde_delta,
        delta_tau_xy_hat=float(abs(signed)),
        delta_tau_xy_signed=float(signed),
        threshold=decision.threshold,
        margin=decision.margin,
        match_y=decision.recommend_match_y,
        clamp_flags=clamped,
        assumed_r=assumed_r,
    )


def _xy_core(x, y, z, sigma_pair=None) -> GuidelineReport:
    T = y.shape[1] - 1
    if T < 2:
        raise UnsupportedConfig("lagged-outcome guideline needs T >= 2; use sensitivity_t1")
    coef = _control_fit(x, y, z)
    base = _x_part(x, y, z, coef)
    res = Residualized(y_tilde=y - x @ coef[1:], z=z, coef=coef)
    pair = sigma_pair or (None, None)
    sigma_e2 = estimate_sigma_e2(res, *pair)
    co = z == 0
    var_t = np.var(res.y_tilde[co], axis=0, ddof=1)
    beta, clamped = _loadings(var_t, sigma_e2)
    mean_sq = float(np.mean(beta[:T] ** 2))
    total = T * mean_sq + sigma_e2
    r = T * mean_sq / total if total > 0 else 0.0
    return _finish(base, res.y_tilde, z, T, sigma_e2, beta, clamped, r, n_pre=T)


def estimate_guideline_xy(data: PanelDataset, sigma_pair: tuple[int, int] | None = None) -> GuidelineReport:
    """Both guidelines for panels with at least two pre-periods."""
    return _xy_core(data.x, data.y, data.z, sigma_pair)


def sensitivity_t1(data: PanelDataset, r_grid: Sequence[float]) -> list[GuidelineReport]:
    """Two-period mode: assume a reliability instead of estimating it."""
    if data.T != 1:
        raise UnsupportedConfig("sensitivity mode applies to T = 1 panels")
    grid = [float(r) for r in r_grid]
    if not grid or any(not np.isfinite(r) or r <= 0 or r > 1 for r in grid):
        raise InvalidGrid("reliability grid must be non-empty with values in (0, 1]")
    coef = _control_fit(data.x, data.y, data.z)
    base = _x_part(data.x, data.y, data.z, coef)
    y_tilde = data.y - data.x @ coef[1:]
    var_t = np.var(y_tilde[data.z == 0], axis=0, ddof=1)
    out = []
    for r in grid:
        sigma_e2 = var_t[0] * (1.0 - r)
        beta, clamped = _loadings(var_t, sigma_e2)
        out.append(_finish(base, y_tilde, data.z, 1, sigma_e2, beta, clamped, r, n_pre=1, assumed_r=r))
    return out


def population_limits(model, sigma_pair: tuple[int, int] | None = None) -> GuidelineReport:
    """Probability limits of the guideline estimates under a known model.

    Within controls the residualized outcome is beta_theta_t * (theta - k'X)
    plus noise, so its variance is beta_theta_t^2 * s2 + sigma_e2 and the
    noise estimate converges to sigma_e2 + (beta_a - beta_b)^2 * s2 / 2.
    """
    vm = validate(model)
    pr, d = vm.params, vm.derived
    if vm.q != 1 or pr.has_interaction:
        raise UnsupportedConfig("population limits need a linear model with q = 1")
    T = vm.T
    s2 = float(d.tilde_sigma_theta2[0, 0])
    bt = pr.beta_theta[:, 0]
    k = np.linalg.solve(pr.sigma_xx, pr.sigma_tx[0])
    slopes = pr.beta_x + np.outer(bt, k)  # population control-group OLS slopes
    change = slopes[T] - slopes[:T].mean(axis=0)
    base = {
        "delta_x_hat": d.delta_x.tolist(),
        "Delta_x_hat": change.tolist(),
        "delta_tau_x_hat": float(abs(d.delta_x @ change)),
        "n_treated": 0,
        "n_control": 0,
    }
    var_t = bt**2 * s2 + pr.sigma_e2
    if T >= 2:
        t_a, t_b = sigma_pair or (T - 1, T - 2)
        sigma_e2 = pr.sigma_e2 + (bt[t_a] - bt[t_b]) ** 2 * s2 / 2
    else:
        sigma_e2 = pr.sigma_e2
    beta, clamped = _loadings(var_t, sigma_e2)
    mean_sq = float(np.mean(beta[:T] ** 2))
    total = T * mean_sq + sigma_e2
    r = T * mean_sq / total if total > 0 else 0.0
    # residualized gaps are beta_theta_t * tilde_delta; emulate them exactly
    gaps = bt * float(d.tilde_delta_theta[0])
    fake = np.vstack([gaps, np.zeros(T + 1)])
    return _finish(base, fake, np.array([1, 0]), T, sigma_e2, beta, clamped, r, n_pre=T)


def _cluster_layout(cluster_id: np.ndarray):
    _, inverse = np.unique(cluster_id, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return order, starts, counts


def _resample_rows(rng, order, starts, counts) -> np.ndarray:
    picks = rng.integers(0, len(counts), size=len(counts))
    if np.all(counts == 1):
        return order[picks]
    sizes = counts[picks]
    offsets = np.repeat(starts[picks] - np.concatenate([[0], np.cumsum(sizes)[:-1]]), sizes)
    return order[np.arange(sizes.sum()) + offsets]


def bootstrap_guidelines(
    data: PanelDataset,
    B: int = 1000,
    seed: int = 0,
    sigma_pair: tuple[int, int] | None = None,
) -> BootstrapBlock:
    """Cluster bootstrap of the guideline quantities with percentile intervals.

    Replicate ``b`` draws from a Philox stream keyed by ``(seed, b)``.
    Failed replicates are counted by error type rather than raised.
    """
    if B < 1:
        raise InvalidGrid("B must be at least 1")
    order, starts, counts = _cluster_layout(np.asarray(data.cluster_id))
    draws: dict[str, list[float]] = {k: [] for k in BOOTSTRAP_FIELDS}
    votes: list[bool] = []
    reasons: dict[str, int] = {}
    for b in range(B):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), b])))
        rows = _resample_rows(rng, order, starts, counts)
        try:
            if data.T >= 2:
                rep = _xy_core(data.x[rows], data.y[rows], data.z[rows], sigma_pair)
            else:
                coef = _control_fit(data.x[rows], data.y[rows], data.z[rows])
                rep = GuidelineReport(**_x_part(data.x[rows], data.y[rows], data.z[rows], coef))
        except MatchDidError as exc:
            name = type(exc).__name__
            reasons[name] = reasons.get(name, 0) + 1
            continue
        for k in BOOTSTRAP_FIELDS:
            v = getattr(rep, k)
            if v is not None:
                draws[k].append(v)
        if rep.match_y is not None:
            votes.append(rep.match_y)
    alpha = (1 - CI_LEVEL) / 2 * 100
    ci = {
        k: (np.percentile(v, [alpha, 100 - alpha]).tolist() if v else None) for k, v in draws.items()
    }
    n_skipped = sum(reasons.values())
    return BootstrapBlock(
        B=B,
        n_ok=B - n_skipped,
        n_skipped=n_skipped,
        skip_reasons=dict(sorted(reasons.items())),
        ci=ci,
        match_y_vote_fraction=float(np.mean(votes)) if votes else None,
        seed=int(seed),
    )


@dataclass(frozen=True, eq=False)
class StaggeredPanel:
    """Long-format panel where units may experience events in several years.

    ``event`` marks the (unit, year) rows in which the unit is treated; that
    year is the post-period of the corresponding cross-section.
    """

    unit_id: np.ndarray
    year: np.ndarray
    y: np.ndarray
    x: np.ndarray
    event: np.ndarray
    cluster_id: np.ndarray | None = None


@dataclass
class StaggeredReport:
    per_year: dict[int, GuidelineReport]
    weights: dict[int, int]
    aggregate: GuidelineReport
    votes: dict[int, bool]
    failures: dict[int, str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_year": {str(k): v.to_dict() for k, v in self.per_year.items()},
            "weights": {str(k): v for k, v in self.weights.items()},
            "aggregate": self.aggregate.to_dict(),
            "votes": {str(k): v for k, v in self.votes.items()},
            "failures": {str(k): v for k, v in self.failures.items()},
        }


def cross_section(panel: StaggeredPanel, year: int, T: int) -> PanelDataset:
    """Units observed in ``year - T .. year``; treated iff an event in ``year``.

    Covariates are averaged over the pre-period years of the window.
    """
    window = np.arange(year - T, year + 1)
    units, u_inv = np.unique(panel.unit_id, return_inverse=True)
    col = np.searchsorted(window, panel.year)
    inside = (col < len(window)) & (window[np.minimum(col, len(window) - 1)] == panel.year)
    y = np.full((len(units), T + 1), np.nan)
    ev = np.zeros(len(units), dtype=bool)
    p = panel.x.shape[1]
    xsum = np.zeros((len(units), p))
    xcount = np.zeros(len(units))
    rows = np.flatnonzero(inside)
    y[u_inv[rows], col[rows]] = panel.y[rows]
    post = rows[col[rows] == T]
    ev[u_inv[post]] = panel.event[post].astype(bool)
    pre = rows[col[rows] < T]
    np.add.at(xsum, u_inv[pre], panel.x[pre])
    np.add.at(xcount, u_inv[pre], 1)
    keep = np.all(np.isfinite(y), axis=1) & (xcount == T)
    if not keep.any():
        raise InsufficientYears(f"no unit is observed throughout {year - T}..{year}")
    clusters = units if panel.cluster_id is None else _first_per_unit(panel.cluster_id, u_inv, len(units))
    return PanelDataset(
        unit_id=units[keep],
        z=ev[keep].astype(np.int8),
        x=xsum[keep] / xcount[keep, None],
        y=y[keep],
        cluster_id=clusters[keep],
    )


def _first_per_unit(values, u_inv, n_units):
    out = np.empty(n_units, dtype=np.asarray(values).dtype)
    out[u_inv[::-1]] = np.asarray(values)[::-1]
    return out


_AGG_SCALARS = (
    "delta_tau_x_hat",
    "sigma_e2_hat",
    "bar_beta_pre_hat",
    "beta_theta_T_hat",
    "r_hat",
    "s_hat",
    "tilde_delta_theta_hat",
    "delta_tau_xy_hat",
    "delta_tau_xy_signed",
)
_AGG_VECTORS = ("delta_x_hat", "Delta_x_hat", "beta_theta_hat")


def aggregate_reports(reports: Sequence[GuidelineReport], weights: Sequence[float]) -> GuidelineReport:
    """Weighted average of report quantities with the lag decision recomputed."""
    w = np.asarray(weights, dtype=float)
    if len(reports) == 0 or np.any(w < 0) or w.sum() <= 0:
        raise InsufficientYears("no positively weighted reports to aggregate")
    w = w / w.sum()
    out = replace(
        reports[0],
        n_treated=int(sum(r.n_treated for r in reports)),
        n_control=int(sum(r.n_control for r in reports)),
        clamp_flags=sorted({t for r in reports for t in r.clamp_flags}),
        bootstrap=None,
    )
    for name in _AGG_SCALARS:
        vals = [getattr(r, name) for r in reports]
        setattr(out, name, None if any(v is None for v in vals) else float(np.dot(w, vals)))
    for name in _AGG_VECTORS:
        vals = [getattr(r, name) for r in reports]
        if any(v is None for v in vals):
            setattr(out, name, None)
        else:
            setattr(out, name, (w @ np.asarray(vals, dtype=float)).tolist())
    if out.r_hat is not None and out.s_hat is not None:
        d = match_decision(min(max(out.r_hat, 0.0), 1.0), out.s_hat)
        out.threshold, out.margin, out.match_y = d.threshold, d.margin, d.recommend_match_y
    return out


def staggered_analysis(
    panel: StaggeredPanel,
    T: int,
    sigma_pair: tuple[int, int] | None = None,
    years: Sequence[int] | None = None,
) -> StaggeredReport:
    """Run both guidelines per event year and pool them by treated counts."""
    if T < 2:
        raise UnsupportedConfig("staggered analysis needs T >= 2 lags")
    event_years = np.unique(np.asarray(panel.year)[np.asarray(panel.event).astype(bool)])
    candidates = [int(y) for y in (event_years if years is None else years)]
    if not candidates:
        raise InsufficientYears("no event years in panel")
    per_year: dict[int, GuidelineReport] = {}
    failures: dict[int, str] = {}
    for yr in candidates:
        try:
            data = cross_section(panel, yr, T)
            per_year[yr] = estimate_guideline_xy(data, sigma_pair)
        except MatchDidError as exc:
            failures[yr] = f"{type(exc).__name__}: {exc}"
    if not per_year:
        raise InsufficientYears(f"no usable event year; failures: {failures}")
    weights = {yr: rep.n_treated for yr, rep in per_year.items()}
    agg = aggregate_reports(list(per_year.values()), list(weights.values()))
    votes = {yr: bool(rep.match_y) for yr, rep in per_year.items()}
    return StaggeredReport(per_year=per_year, weights=weights, aggregate=agg, votes=votes, failures=failures)
