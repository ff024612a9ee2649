"""Linear Gaussian structural model for latent and observed confounding.

Within treatment group ``z`` the confounders are jointly normal,

    (theta, X) | Z = z  ~  N((mu_theta_z, mu_x_z), [[S_tt, S_tx], [S_xt, S_xx]]),

and the untreated outcome in period ``t`` is

    Y_t(0) = beta0_t + beta_theta_t' theta + beta_x_t' X [+ beta_thx_t X theta] + eps_t,

with independent eps_t ~ N(0, sigma_e2). Treated units receive ``tau`` in the
final period only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .errors import DimensionMismatch, InvalidProbability, NonPSDCovariance, SingularCovariance
from .linalg import solve_spd

PSD_TOL = 1e-10
JITTER = 1e-12
SAMPLE_BLOCK = 16384


def _vec(a, name: str) -> np.ndarray:
    out = np.asarray(a, dtype=float)
    if out.ndim == 0:
        out = out.reshape(1)
    if out.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional")
    return out


def _per_period(a, name: str) -> np.ndarray:
    """Coerce per-period slopes to shape (periods, dim)."""
    out = np.asarray(a, dtype=float)
    if out.ndim == 1:
        out = out[:, None]
    if out.ndim != 2:
        raise DimensionMismatch(f"{name} must be a list of per-period vectors")
    return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameterization of the structural model.

    Per-period arrays have ``T + 1`` rows (periods ``0..T``); the group means
    are stored with row 0 for controls and row 1 for treated units.
    """

    beta_theta: np.ndarray
    beta_x: np.ndarray
    mu_theta: np.ndarray
    mu_x: np.ndarray
    sigma_tt: np.ndarray
    sigma_xx: np.ndarray
    sigma_tx: np.ndarray
    sigma_e2: float
    p_treat: float = 0.5
    tau: float = 0.0
    beta0: np.ndarray | None = None
    interaction: np.ndarray | None = None

    @classmethod
    def build(
        cls,
        beta_theta,
        beta_x,
        mu_theta,
        mu_x,
        sigma_tt,
        sigma_xx,
        sigma_tx,
        sigma_e2: float,
        p_treat: float = 0.5,
        tau: float = 0.0,
        beta0=None,
        interaction=None,
    ) -> "ModelParams":
        bt = _per_period(beta_theta, "beta_theta")
        bx = _per_period(beta_x, "beta_x")
        mt = _per_period(mu_theta, "mu_theta")
        mx = _per_period(mu_x, "mu_x")
        q, p = bt.shape[1], bx.shape[1]
        stx = np.asarray(sigma_tx, dtype=float)
        stx = stx.reshape(q, p) if stx.size == q * p else np.atleast_2d(stx)
        return cls(
            beta_theta=bt,
            beta_x=bx,
            mu_theta=mt,
            mu_x=mx,
            sigma_tt=np.atleast_2d(np.asarray(sigma_tt, dtype=float)),
            sigma_xx=np.atleast_2d(np.asarray(sigma_xx, dtype=float)),
            sigma_tx=stx,
            sigma_e2=float(sigma_e2),
            p_treat=float(p_treat),
            tau=float(tau),
            beta0=None if beta0 is None else _vec(beta0, "beta0"),
            interaction=None if interaction is None else _vec(interaction, "interaction"),
        )

    @property
    def T(self) -> int:
        return self.beta_theta.shape[0] - 1

    @property
    def p(self) -> int:
        return self.beta_x.shape[1]

    @property
    def q(self) -> int:
        return self.beta_theta.shape[1]

    @property
    def intercepts(self) -> np.ndarray:
        if self.beta0 is None:
            return np.zeros(self.T + 1)
        return self.beta0

    @property
    def has_interaction(self) -> bool:
        return self.interaction is not None and bool(np.any(self.interaction != 0))

    def joint_cov(self) -> np.ndarray:
        return np.block([[self.sigma_tt, self.sigma_tx], [self.sigma_tx.T, self.sigma_xx]])

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "T": self.T,
            "p": self.p,
            "q": self.q,
            "beta0": self.intercepts.tolist(),
            "beta_theta": self.beta_theta.tolist(),
            "beta_x": self.beta_x.tolist(),
            "mu_theta": {"0": self.mu_theta[0].tolist(), "1": self.mu_theta[1].tolist()},
            "mu_x": {"0": self.mu_x[0].tolist(), "1": self.mu_x[1].tolist()},
            "sigma_tt": self.sigma_tt.tolist(),
            "sigma_xx": self.sigma_xx.tolist(),
            "sigma_tx": self.sigma_tx.tolist(),
            "sigma_e2": self.sigma_e2,
            "p_treat": self.p_treat,
            "tau": self.tau,
        }
        if self.interaction is not None:
            out["interaction"] = self.interaction.tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ModelParams":
        try:
            mu_theta = doc["mu_theta"]
            mu_x = doc["mu_x"]
            if isinstance(mu_theta, dict):
                mu_theta = [mu_theta["0"], mu_theta["1"]]
            if isinstance(mu_x, dict):
                mu_x = [mu_x["0"], mu_x["1"]]
            params = cls.build(
                beta_theta=doc["beta_theta"],
                beta_x=doc["beta_x"],
                mu_theta=mu_theta,
                mu_x=mu_x,
                sigma_tt=doc["sigma_tt"],
                sigma_xx=doc["sigma_xx"],
                sigma_tx=doc["sigma_tx"],
                sigma_e2=doc["sigma_e2"],
                p_treat=doc.get("p_treat", 0.5),
                tau=doc.get("tau", 0.0),
                beta0=doc.get("beta0"),
                interaction=doc.get("interaction"),
            )
        except KeyError as exc:
            raise DimensionMismatch(f"model document is missing key {exc}") from None
        for key, actual in (("T", params.T), ("p", params.p), ("q", params.q)):
            if key in doc and int(doc[key]) != actual:
                raise DimensionMismatch(f"declared {key}={doc[key]} but arrays imply {actual}")
        return params


def scalar_params(
    beta_theta,
    beta_x,
    delta_theta: float = 1.0,
    delta_x: float = 1.0,
    sigma_theta: float = 1.0,
    sigma_x: float = 1.0,
    rho: float = 0.0,
    sigma_e2: float = 1.0,
    mu_theta0: float = 0.0,
    mu_x0: float = 0.0,
    p_treat: float = 0.5,
    tau: float = 0.0,
    interaction=None,
) -> ModelParams:
    """Convenience constructor for one observed and one latent confounder."""
    return ModelParams.build(
        beta_theta=np.asarray(beta_theta, dtype=float)[:, None],
        beta_x=np.asarray(beta_x, dtype=float)[:, None],
        mu_theta=[[mu_theta0], [mu_theta0 + delta_theta]],
        mu_x=[[mu_x0], [mu_x0 + delta_x]],
        sigma_tt=[[sigma_theta**2]],
        sigma_xx=[[sigma_x**2]],
        sigma_tx=[[rho * sigma_theta * sigma_x]],
        sigma_e2=sigma_e2,
        p_treat=p_treat,
        tau=tau,
        interaction=interaction,
    )


def two_period_base(**overrides) -> ModelParams:
    """Two-period base configuration: post slopes 1.5, everything else 1, rho 0."""
    kw = dict(beta_theta=[1.0, 1.5], beta_x=[1.0, 1.5], sigma_e2=1.0)
    kw.update(overrides)
    return scalar_params(**kw)


@dataclass(frozen=True, eq=False)
class DerivedQuantities:
    delta_theta: np.ndarray
    delta_x: np.ndarray
    Delta_theta: np.ndarray
    Delta_x: np.ndarray
    Delta_PT: float
    bar_beta_pre: np.ndarray
    bar_beta_pre_sq: np.ndarray
    s: float | None
    tilde_delta_theta: np.ndarray | None
    tilde_sigma_theta2: np.ndarray | None
    delta_theta_x: float | None = None
    Delta_theta_x: float | None = None

    def to_dict(self) -> dict[str, Any]:
        def conv(v):
            if v is None:
                return None
            if isinstance(v, np.ndarray):
                return v.tolist()
            return float(v)

        return {k: conv(v) for k, v in self.__dict__.items()}


def derive(params: ModelParams) -> DerivedQuantities:
    bt, bx = params.beta_theta, params.beta_x
    T = params.T
    delta_theta = params.mu_theta[1] - params.mu_theta[0]
    delta_x = params.mu_x[1] - params.mu_x[0]
    bar_pre = bt[:T].mean(axis=0)
    Delta_theta = bt[T] - bar_pre
    Delta_x = bx[T] - bx[:T].mean(axis=0)
    Delta_PT = float(Delta_theta @ delta_theta + Delta_x @ delta_x)
    bar_sq = (bt[:T] ** 2).mean(axis=0)
    s = None
    if params.q == 1 and bt[T, 0] != 0:
        s = float(bar_pre[0] / bt[T, 0])
    try:
        proj = solve_spd(params.sigma_xx, params.sigma_tx.T, block="sigma_xx").T
        tilde_delta = delta_theta - proj @ delta_x
        tilde_sigma = params.sigma_tt - proj @ params.sigma_tx.T
    except SingularCovariance:
        tilde_delta = tilde_sigma = None
    dtx = Dtx = None
    if params.interaction is not None and params.p == 1 and params.q == 1:
        mt, mx = params.mu_theta[:, 0], params.mu_x[:, 0]
        dtx = float(mt[1] * mx[1] - mt[0] * mx[0])
        Dtx = float(params.interaction[T] - params.interaction[:T].mean())
    return DerivedQuantities(
        delta_theta=delta_theta,
        delta_x=delta_x,
        Delta_theta=Delta_theta,
        Delta_x=Delta_x,
        Delta_PT=Delta_PT,
        bar_beta_pre=bar_pre,
        bar_beta_pre_sq=bar_sq,
        s=s,
        tilde_delta_theta=tilde_delta,
        tilde_sigma_theta2=tilde_sigma,
        delta_theta_x=dtx,
        Delta_theta_x=Dtx,
    )


@dataclass(frozen=True, eq=False)
class ValidatedModel:
    params: ModelParams
    chol: np.ndarray
    derived: DerivedQuantities = field(repr=False)

    @property
    def T(self) -> int:
        return self.params.T

    @property
    def p(self) -> int:
        return self.params.p

    @property
    def q(self) -> int:
        return self.params.q


def validate(params: ModelParams | ValidatedModel) -> ValidatedModel:
    """Check shapes, probabilities and covariance; precompute a factor."""
    if isinstance(params, ValidatedModel):
        return params
    T, p, q = params.T, params.p, params.q
    if T < 1:
        raise DimensionMismatch("at least one pre-period and one post-period are required")
    if p < 1 or q < 1:
        raise DimensionMismatch("p and q must be at least 1")
    periods = T + 1
    checks = [
        ("beta_x", params.beta_x.shape, (periods, p)),
        ("mu_theta", params.mu_theta.shape, (2, q)),
        ("mu_x", params.mu_x.shape, (2, p)),
        ("sigma_tt", params.sigma_tt.shape, (q, q)),
        ("sigma_xx", params.sigma_xx.shape, (p, p)),
        ("sigma_tx", params.sigma_tx.shape, (q, p)),
    ]
    if params.beta0 is not None:
        checks.append(("beta0", params.beta0.shape, (periods,)))
    if params.interaction is not None:
        if p != 1 or q != 1:
            raise DimensionMismatch("interaction terms require p = q = 1")
        checks.append(("interaction", params.interaction.shape, (periods,)))
    for name, got, want in checks:
        if tuple(got) != want:
            raise DimensionMismatch(f"{name} has shape {tuple(got)}, expected {want}")
    if not 0.0 < params.p_treat < 1.0:
        raise InvalidProbability(f"p_treat={params.p_treat} is not in (0, 1)")
    if not np.isfinite(params.sigma_e2) or params.sigma_e2 < 0:
        raise NonPSDCovariance(f"sigma_e2={params.sigma_e2} must be non-negative")
    cov = params.joint_cov()
    if not np.all(np.isfinite(cov)):
        raise NonPSDCovariance("covariance has non-finite entries")
    if not np.allclose(cov, cov.T, atol=PSD_TOL, rtol=0):
        raise NonPSDCovariance("joint covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    scale = max(1.0, float(np.abs(cov).max()))
    if np.linalg.eigvalsh(cov)[0] < -PSD_TOL * scale:
        raise NonPSDCovariance("joint covariance of (theta, X) is not positive semidefinite")
    jitter = JITTER * scale
    for _ in range(8):
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
            break
        except np.linalg.LinAlgError:
            jitter *= 10
    else:  # pragma: no cover - eigenvalue check makes this unreachable
        raise NonPSDCovariance("Cholesky factorization failed")
    return ValidatedModel(params=params, chol=chol, derived=derive(params))


def selection_probability(model, theta, x) -> np.ndarray | float:
    """P(Z = 1 | theta, x) implied by the group-conditional normals."""
    vm = validate(model)
    pr = vm.params
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    scalar = theta.ndim <= 1 and x.ndim <= 1
    w = np.concatenate([np.atleast_2d(theta.reshape(-1, pr.q)), np.atleast_2d(x.reshape(-1, pr.p))], axis=1)
    mu0 = np.concatenate([pr.mu_theta[0], pr.mu_x[0]])
    mu1 = np.concatenate([pr.mu_theta[1], pr.mu_x[1]])

    def quad(mu):
        sol = np.linalg.solve(vm.chol, (w - mu).T)
        return np.sum(sol**2, axis=0)

    logit = np.log(pr.p_treat) - np.log1p(-pr.p_treat) - 0.5 * (quad(mu1) - quad(mu0))
    prob = 1.0 / (1.0 + np.exp(-logit))
    return float(prob[0]) if scalar else prob


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced unit-by-period panel.

    ``y`` has one column per period ``0..T``. The oracle fields (``theta``,
    ``y_untreated``, ``y_treated``) are populated only for synthetic data.
    """

    unit_id: np.ndarray
    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    cluster_id: np.ndarray | None = None
    weight: np.ndarray | None = None
    theta: np.ndarray | None = None
    y_untreated: np.ndarray | None = None
    y_treated: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.unit_id)
        z = np.asarray(self.z)
        if z.shape != (n,):
            raise DimensionMismatch("z must have one entry per unit")
        if not np.all((z == 0) | (z == 1)):
            raise DimensionMismatch("z must be 0 or 1")
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z.astype(np.int8))
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2 or y.shape[0] != n or x.shape[0] != n:
            raise DimensionMismatch("x and y must have one row per unit")
        if y.shape[1] < 2:
            raise DimensionMismatch("at least two periods are required")
        object.__setattr__(self, "y", y)
        if self.cluster_id is None:
            object.__setattr__(self, "cluster_id", np.asarray(self.unit_id))
        if self.weight is not None:
            wt = np.asarray(self.weight, dtype=float)
            if wt.shape != (n,) or np.any(wt < 0):
                raise DimensionMismatch("weights must be non-negative, one per unit")
            object.__setattr__(self, "weight", wt)

    @property
    def n(self) -> int:
        return len(self.unit_id)

    @property
    def T(self) -> int:
        return self.y.shape[1] - 1

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def treated(self) -> np.ndarray:
        return self.z == 1

    @property
    def control(self) -> np.ndarray:
        return self.z == 0

    def take(self, idx) -> "PanelDataset":
        idx = np.asarray(idx)

        def sub(a):
            return None if a is None else np.asarray(a)[idx]

        return PanelDataset(
            unit_id=np.asarray(self.unit_id)[idx],
            z=self.z[idx],
            x=self.x[idx],
            y=self.y[idx],
            cluster_id=sub(self.cluster_id),
            weight=sub(self.weight),
            theta=sub(self.theta),
            y_untreated=sub(self.y_untreated),
            y_treated=sub(self.y_treated),
        )

    def with_outcomes(self, y: np.ndarray) -> "PanelDataset":
        return replace(self, y=y, y_untreated=None, y_treated=None)


def _entropy(seed) -> list[int]:
    if np.ndim(seed) == 0:
        return [int(seed)]
    return [int(s) for s in seed]


def sample_population(model, n: int, seed, oracle: bool = True) -> PanelDataset:
    """Draw ``n`` units. Deterministic in ``seed`` (an int or a tuple of ints).

    Units are generated in fixed-size blocks; block ``b`` draws from a Philox
    stream keyed by ``(*seed, b)``, so any block can be regenerated on its own.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    vm = validate(model)
    pr = vm.params
    T, p, q = pr.T, pr.p, pr.q
    periods = T + 1
    sd_e = np.sqrt(pr.sigma_e2)
    z_parts, w_parts, e_parts = [], [], []
    for b, start in enumerate(range(0, n, SAMPLE_BLOCK)):
        m = min(SAMPLE_BLOCK, n - start)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(_entropy(seed) + [b])))
        z_parts.append(rng.random(m) < pr.p_treat)
        w_parts.append(rng.standard_normal((m, q + p)))
        e_parts.append(rng.standard_normal((m, periods)))
    z = np.concatenate(z_parts).astype(np.int8)
    w = np.concatenate(w_parts) @ vm.chol.T
    means = np.concatenate([pr.mu_theta, pr.mu_x], axis=1)
    w += means[z]
    theta, x = w[:, :q], w[:, q:]
    y0 = pr.intercepts[None, :] + theta @ pr.beta_theta.T + x @ pr.beta_x.T
    if pr.interaction is not None:
        y0 += (x[:, 0] * theta[:, 0])[:, None] * pr.interaction[None, :]
    y0 += sd_e * np.concatenate(e_parts)
    y1 = y0.copy()
    y1[:, T] += pr.tau
    y = np.where(z[:, None] == 1, y1, y0)
    ids = np.arange(n)
    return PanelDataset(
        unit_id=ids,
        z=z,
        x=x,
        y=y,
        cluster_id=ids,
        theta=theta if oracle else None,
        y_untreated=y0 if oracle else None,
        y_treated=y1 if oracle else None,
    )
