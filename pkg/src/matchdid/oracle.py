"""Closed-form population biases of the DiD estimators and the match rule.

All biases are ``E[tau_hat] - tau`` under perfect matching, where the outer
expectation runs over the treated distribution of the matching variables.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import (
    DivisionByZero,
    MatchDidError,
    NumericalError,
    UnsupportedConfig,
    ValidationError,
)
from .linalg import mvn_conditional_mean, solve_spd, structured_inverse_q  # noqa: F401 (re-export)
from .model import ModelParams, ValidatedModel, validate

ZERO_TOL = 1e-12
CROSS_CHECK_TOL = 1e-6
_GH_NODES, _GH_WEIGHTS = hermegauss(160)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def _require_linear(vm: ValidatedModel, what: str) -> None:
    if vm.params.has_interaction:
        raise UnsupportedConfig(f"{what} is not defined for interaction models; use bias_interaction")


def _require_scalar(vm: ValidatedModel, what: str, two_period: bool = True) -> None:
    if vm.p != 1 or vm.q != 1 or (two_period and vm.T != 1):
        raise UnsupportedConfig(f"{what} requires p = q = 1" + (" and T = 1" if two_period else ""))


def bias_dim(model) -> float:
    """Difference in post-period means, defined for two periods."""
    vm = validate(model)
    if vm.T != 1:
        raise UnsupportedConfig("difference in means is defined only for T = 1")
    _require_linear(vm, "difference-in-means bias")
    pr, d = vm.params, vm.derived
    return float(pr.beta_theta[1] @ d.delta_theta + pr.beta_x[1] @ d.delta_x)


def bias_did(model) -> float:
    """Unmatched DiD with pre-period outcomes averaged."""
    vm = validate(model)
    d = vm.derived
    out = d.Delta_PT
    if vm.params.interaction is not None:
        out += d.Delta_theta_x * d.delta_theta_x
    return float(out)


def bias_did_match_x(model) -> float:
    vm = validate(model)
    _require_linear(vm, "matched-on-X bias")
    pr, d = vm.params, vm.derived
    proj = solve_spd(pr.sigma_xx, d.delta_x, block="sigma_xx")
    return float(d.Delta_theta @ (d.delta_theta - pr.sigma_tx @ proj))


def _conditioning_blocks(vm: ValidatedModel):
    """Moments of (theta, X, Y_0..Y_{T-1}) needed for matching on X and lags.

    Returns Cov(theta, V), Cov(V, V) and E[V | Z=1] - E[V | Z=0] for
    V = (X, Y_0, ..., Y_{T-1}).
    """
    pr, d = vm.params, vm.derived
    q, p, T = pr.q, pr.p, pr.T
    joint = pr.joint_cov()
    loads = np.concatenate([pr.beta_theta[:T], pr.beta_x[:T]], axis=1)  # (T, q + p)
    cov_w_y = joint @ loads.T  # (q + p, T)
    cov_yy = loads @ joint @ loads.T + pr.sigma_e2 * np.eye(T)
    cov_theta_v = np.concatenate([pr.sigma_tx, cov_w_y[:q]], axis=1)
    cov_vv = np.block([[pr.sigma_xx, cov_w_y[q:]], [cov_w_y[q:].T, cov_yy]])
    gap_w = np.concatenate([d.delta_theta, d.delta_x])
    gap_v = np.concatenate([d.delta_x, loads @ gap_w])
    return cov_theta_v, cov_vv, gap_v


def bias_did_match_xy(model, cross_check: bool = True) -> float:
    """Bias of matching on X and all pre-period outcomes (general formula)."""
    vm = validate(model)
    _require_linear(vm, "matched-on-X-and-lags bias")
    pr, d = vm.params, vm.derived
    cov_theta_v, cov_vv, gap_v = _conditioning_blocks(vm)
    shift = cov_theta_v @ solve_spd(cov_vv, gap_v, block="[X, Y^T]")
    value = float(pr.beta_theta[pr.T] @ (d.delta_theta - shift))
    if cross_check and pr.q == 1 and d.tilde_delta_theta is not None:
        other = closed_form_match_xy(vm)
        if abs(other - value) > CROSS_CHECK_TOL * (1.0 + abs(value)):
            raise NumericalError(
                f"general and reduced bias formulas disagree ({value!r} vs {other!r})"
            )
    return value


def closed_form_match_xy(model) -> float:
    """Reduced form for a univariate latent confounder.

    Matching on X removes the part of theta explained by X; the residual
    latent variable is then measured by T noisy lags, so
    bias = beta_theta_T * tilde_delta * (1 - r).
    """
    vm = validate(model)
    if vm.q != 1:
        raise UnsupportedConfig("reduced form requires q = 1")
    d = vm.derived
    if d.tilde_delta_theta is None:
        raise UnsupportedConfig("reduced form requires invertible sigma_xx")
    r = reliability(vm).value
    return float(vm.params.beta_theta[vm.T, 0] * d.tilde_delta_theta[0] * (1.0 - r))


@dataclass(frozen=True)
class YOnlyBias:
    bias: float
    r_theta: float
    r_x: float


def y_only_terms(model) -> YOnlyBias:
    """Matching on the single pre-period outcome only (p = q = 1, T = 1).

    With c1 = Cov(theta, Y0), c2 = Cov(X, Y0) and d = Var(Y0) within group,
    the matched control's theta and X are pulled toward the treated values by
    the regression factors c1 / d and c2 / d.
    """
    vm = validate(model)
    _require_scalar(vm, "match-on-Y0-only bias")
    _require_linear(vm, "match-on-Y0-only bias")
    pr, dq = vm.params, vm.derived
    bt0, bt1 = pr.beta_theta[:, 0]
    bx0, bx1 = pr.beta_x[:, 0]
    s_tt, s_xx, s_tx = pr.sigma_tt[0, 0], pr.sigma_xx[0, 0], pr.sigma_tx[0, 0]
    dt, dx = dq.delta_theta[0], dq.delta_x[0]
    c1 = bt0 * s_tt + bx0 * s_tx
    c2 = bx0 * s_xx + bt0 * s_tx
    den = bt0**2 * s_tt + bx0**2 * s_xx + 2 * bt0 * bx0 * s_tx + pr.sigma_e2
    if den <= ZERO_TOL:
        raise DivisionByZero("pre-period outcome has zero variance")
    bias = (
        bt1 * dt * (1 - bt0 * c1 / den)
        + bx1 * dx * (1 - bx0 * c2 / den)
        - bt1 * c1 * bx0 / den * dx
        - bx1 * c2 * bt0 / den * dt
    )
    return YOnlyBias(bias=float(bias), r_theta=float(bt0 * c1 / den), r_x=float(bx0 * c2 / den))


def bias_did_match_y_only(model) -> float:
    return y_only_terms(model).bias


@dataclass(frozen=True)
class InteractionBias:
    bias_did: float
    bias_did_x: float
    bias_did_xy: float
    bias_did_xy_exact: float
    r_tilde: float
    leftover: float


def bias_interaction(model) -> InteractionBias:
    """Biases when the outcome carries an X * theta interaction (rho = 0, T = 1).

    ``bias_did_xy`` is the linear-projection closed form; ``bias_did_xy_exact``
    integrates the exact conditional expectation over the treated X
    distribution. The two coincide when the pre-period interaction slope is 0.
    """
    vm = validate(model)
    _require_scalar(vm, "interaction biases")
    pr = vm.params
    if abs(pr.sigma_tx[0, 0]) > ZERO_TOL:
        raise UnsupportedConfig("interaction biases require zero correlation between X and theta")
    inter = pr.interaction if pr.interaction is not None else np.zeros(2)
    bt0, bt1 = pr.beta_theta[:, 0]
    bx0, bx1 = pr.beta_x[:, 0]
    bi0, bi1 = inter
    mt0, mt1 = pr.mu_theta[:, 0]
    mx0, mx1 = pr.mu_x[:, 0]
    s_tt, s_xx, se2 = pr.sigma_tt[0, 0], pr.sigma_xx[0, 0], pr.sigma_e2
    dt, dx = mt1 - mt0, mx1 - mx0
    dtx = mt1 * mx1 - mt0 * mx0
    did = (bt1 - bt0) * dt + (bx1 - bx0) * dx + (bi1 - bi0) * dtx
    did_x = (bt1 - bt0) * dt + (bi1 - bi0) * mx1 * dt
    den = bt0**2 * s_tt + 2 * bt0 * bi0 * mx0 * s_tt + bi0**2 * (s_tt * s_xx + s_tt * mx0**2) + se2
    if den <= ZERO_TOL:
        raise DivisionByZero("residual variance of the pre-period outcome is zero")
    r_tilde = (bt0**2 * s_tt + bt0 * bi0 * mx0 * s_tt) / den
    leftover = (bi0 * mx0 + bt0) * (dtx - dx * mt0) * bi0 * s_tt / den
    did_xy = bt1 * dt * (1 - r_tilde) + bi1 * mx1 * dt * (1 - r_tilde) - (bt1 + bi1 * mx1) * leftover
    # exact: given X = x the lag is linear in theta with loading bt0 + bi0 x
    xs = mx1 + np.sqrt(s_xx) * _GH_NODES
    load = bt0 + bi0 * xs
    signal = load**2 * s_tt
    total = signal + se2
    r_x = np.divide(signal, total, out=np.zeros_like(total), where=total > 0)
    exact = float(np.sum(_GH_WEIGHTS * (bt1 + bi1 * xs) * dt * (1 - r_x)))
    return InteractionBias(
        bias_did=float(did),
        bias_did_x=float(did_x),
        bias_did_xy=float(did_xy),
        bias_did_xy_exact=exact,
        r_tilde=float(r_tilde),
        leftover=float(leftover),
    )


@dataclass(frozen=True)
class Reliability:
    value: float
    variant: str
    flagged: bool = False


def reliability(model) -> Reliability:
    """Share of residual lag variance due to the latent confounder.

    r = T * mean(beta_pre^2) * s2 / (T * mean(beta_pre^2) * s2 + sigma_e2),
    where s2 is the latent variance left after projecting on X.
    """
    vm = validate(model)
    if vm.q != 1:
        raise UnsupportedConfig("reliability is defined for a univariate latent confounder")
    pr, d = vm.params, vm.derived
    if d.tilde_sigma_theta2 is None:
        raise UnsupportedConfig("reliability requires invertible sigma_xx")
    if vm.T == 1:
        variant = "r_theta|x"
    elif np.all(np.abs(pr.sigma_tx) <= ZERO_TOL):
        variant = "r_theta^T"
    else:
        variant = "r_theta|x^T"
    signal = vm.T * d.bar_beta_pre_sq[0] * max(float(d.tilde_sigma_theta2[0, 0]), 0.0)
    total = signal + pr.sigma_e2
    if total <= 0:
        return Reliability(0.0, variant, flagged=True)
    return Reliability(float(signal / total), variant)


@dataclass(frozen=True)
class SignConditions:
    x_trend_agrees: bool
    projection_agrees: bool
    no_overcorrection: bool

    @property
    def all(self) -> bool:
        return self.x_trend_agrees and self.projection_agrees and self.no_overcorrection


def _same_sign(a: float, b: float, tol: float = ZERO_TOL) -> bool:
    if abs(a) <= tol or abs(b) <= tol:
        return True
    return (a > 0) == (b > 0)


def sign_conditions(model) -> SignConditions:
    """Sufficient conditions under which matching on X cannot hurt."""
    vm = validate(model)
    if vm.q != 1:
        raise UnsupportedConfig("sign conditions require q = 1")
    pr, d = vm.params, vm.derived
    coef = solve_spd(pr.sigma_xx, pr.sigma_tx[0], block="sigma_xx")
    lat = float(d.Delta_theta[0] * d.delta_theta[0])
    shift = float(coef @ d.delta_x)
    return SignConditions(
        x_trend_agrees=_same_sign(float(d.Delta_x @ d.delta_x), lat),
        projection_agrees=_same_sign(float(d.Delta_theta[0]) * shift, lat),
        no_overcorrection=_same_sign(float(d.delta_theta[0]), float(d.delta_theta[0]) - shift),
    )


@dataclass(frozen=True)
class MatchDecision:
    recommend_match_y: bool
    threshold: float
    margin: float
    recommend_match_x: bool = True
    sign_conditions: SignConditions | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def match_decision(r: float, s: float, signs: SignConditions | None = None) -> MatchDecision:
    """Match on lags iff r > 1 - |1 - s|."""
    if not (-ZERO_TOL <= r <= 1 + ZERO_TOL):
        raise ValidationError(f"reliability {r} is outside [0, 1]")
    threshold = 1.0 - abs(1.0 - s)
    return MatchDecision(
        recommend_match_y=bool(r > threshold),
        threshold=float(threshold),
        margin=float(r - threshold),
        sign_conditions=signs,
    )


@dataclass
class BiasReport:
    bias_dim: float | None
    bias_did: float
    bias_did_x: float | None
    bias_did_xy: float | None
    bias_did_y_only: float | None
    reliability: float | None
    reliability_variant: str | None
    s: float | None
    Delta_PT: float
    decomposition: dict[str, float]
    decision: MatchDecision | None = None
    bias_did_xy_exact: float | None = None
    notes: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        return out


def _attempt(fn, model, notes: dict[str, str], key: str):
    try:
        return fn(model)
    except MatchDidError as exc:
        notes[key] = f"{type(exc).__name__}: {exc}"
        return None


def bias_report(model: ModelParams | ValidatedModel) -> BiasReport:
    vm = validate(model)
    d = vm.derived
    notes: dict[str, str] = {}
    inter_term = 0.0
    if vm.params.interaction is not None:
        inter_term = float(d.Delta_theta_x * d.delta_theta_x)
    decomposition = {
        "theta_term": float(d.Delta_theta @ d.delta_theta),
        "x_term": float(d.Delta_x @ d.delta_x),
        "interaction_term": inter_term,
    }
    exact = None
    if vm.params.has_interaction:
        ib = _attempt(bias_interaction, vm, notes, "interaction")
        b_x = ib.bias_did_x if ib else None
        b_xy = ib.bias_did_xy if ib else None
        exact = ib.bias_did_xy_exact if ib else None
        b_dim = None
        notes.setdefault("bias_dim", "not defined for interaction models")
    else:
        b_dim = _attempt(bias_dim, vm, notes, "bias_dim") if vm.T == 1 else None
        b_x = _attempt(bias_did_match_x, vm, notes, "bias_did_x")
        b_xy = _attempt(bias_did_match_xy, vm, notes, "bias_did_xy")
    b_y = None
    if vm.p == 1 and vm.q == 1 and vm.T == 1 and not vm.params.has_interaction:
        b_y = _attempt(bias_did_match_y_only, vm, notes, "bias_did_y_only")
    rel = _attempt(reliability, vm, notes, "reliability")
    if rel is not None and rel.flagged:
        notes["reliability"] = "outcome variance has no latent part; reliability set to 0"
    decision = None
    if rel is not None and d.s is not None:
        signs = _attempt(sign_conditions, vm, notes, "sign_conditions")
        decision = match_decision(rel.value, d.s, signs)
    return BiasReport(
        bias_dim=b_dim,
        bias_did=bias_did(vm),
        bias_did_x=b_x,
        bias_did_xy=b_xy,
        bias_did_y_only=b_y,
        reliability=None if rel is None else rel.value,
        reliability_variant=None if rel is None else rel.variant,
        s=d.s,
        Delta_PT=d.Delta_PT,
        decomposition=decomposition,
        decision=decision,
        bias_did_xy_exact=exact,
        notes=notes,
    )
