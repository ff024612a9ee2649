"""Finite-sample DiD estimators, matched and unmatched."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import EmptyGroup, NoFeasibleMatch, SingularCovariance, UnsupportedConfig
from .linalg import RCOND_TOL, ols  # noqa: F401 (ols re-exported)
from .model import PanelDataset

MATCH_ON = ("X", "X_and_YT", "Y0_only")
METRICS = ("normalized-euclidean", "mahalanobis", "exact")
SCALE_GROUPS = ("control", "treated", "pooled")
BRUTE_LIMIT = 2_000_000
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class MatchSpec:
    match_on: str = "X"
    metric: str = "normalized-euclidean"
    with_replacement: bool = True
    caliper: float | None = None
    scale_group: str = "control"
    search: str = "auto"

    def __post_init__(self):
        if self.match_on not in MATCH_ON:
            raise UnsupportedConfig(f"match_on must be one of {MATCH_ON}")
        if self.metric not in METRICS:
            raise UnsupportedConfig(f"metric must be one of {METRICS}")
        if self.scale_group not in SCALE_GROUPS:
            raise UnsupportedConfig(f"scale_group must be one of {SCALE_GROUPS}")
        if self.search not in ("auto", "brute", "kdtree"):
            raise UnsupportedConfig("search must be auto, brute or kdtree")
        if self.caliper is not None and not self.caliper >= 0:
            raise UnsupportedConfig("caliper must be non-negative")


@dataclass(frozen=True)
class EstimateResult:
    estimator: str
    tau_hat: float
    n_treated: int
    n_control_used: int
    unmatched_treated: int = 0
    mean_distance: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _groups(data: PanelDataset) -> tuple[np.ndarray, np.ndarray]:
    tr, co = data.treated, data.control
    if not tr.any():
        raise EmptyGroup("no treated units")
    if not co.any():
        raise EmptyGroup("no control units")
    return tr, co


def _wmean(values: np.ndarray, weights: np.ndarray | None) -> np.ndarray:
    if weights is None:
        return values.mean(axis=0)
    total = weights.sum()
    if total <= 0:
        raise EmptyGroup("group has zero total weight")
    return np.tensordot(weights, values, axes=(0, 0)) / total


def _weights(data: PanelDataset, mask: np.ndarray) -> np.ndarray | None:
    return None if data.weight is None else data.weight[mask]


def difference_in_means(data: PanelDataset) -> EstimateResult:
    """Post-period treated-minus-control mean."""
    tr, co = _groups(data)
    T = data.T
    est = _wmean(data.y[tr, T], _weights(data, tr)) - _wmean(data.y[co, T], _weights(data, co))
    return EstimateResult("dim", float(est), int(tr.sum()), int(co.sum()))


def did_naive(data: PanelDataset) -> EstimateResult:
    """Post-period gap minus the gap in pre-period averages."""
    tr, co = _groups(data)
    T = data.T
    change = data.y[:, T] - data.y[:, :T].mean(axis=1)
    est = _wmean(change[tr], _weights(data, tr)) - _wmean(change[co], _weights(data, co))
    return EstimateResult("did", float(est), int(tr.sum()), int(co.sum()))


def did_twoway_fe(data: PanelDataset) -> EstimateResult:
    """Coefficient on treated x post from a unit and period fixed-effects fit.

    Uses the two-way within transformation, exact for balanced panels with
    unit-level weights.
    """
    tr, co = _groups(data)
    n, periods = data.y.shape
    w = np.ones(n) if data.weight is None else data.weight
    d = np.zeros((n, periods))
    d[:, -1] = data.z

    def within(a):
        col = np.tensordot(w, a, axes=(0, 0)) / w.sum()
        return a - a.mean(axis=1, keepdims=True) - col[None, :] + col.mean()

    sw = np.sqrt(np.repeat(w, periods))
    fit = ols((sw * within(d).ravel())[:, None], sw * within(data.y).ravel())
    return EstimateResult("twfe", float(fit.coef[0]), int(tr.sum()), int(co.sum()))


def _ranks(ids: np.ndarray) -> np.ndarray:
    order = np.argsort(ids, kind="stable")
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def _match_vars(data: PanelDataset, spec: MatchSpec) -> np.ndarray:
    if spec.match_on == "X":
        return data.x
    if spec.match_on == "X_and_YT":
        return np.hstack([data.x, data.y[:, : data.T]])
    if data.T != 1:
        raise UnsupportedConfig("Y0_only matching is defined only for T = 1")
    return data.y[:, :1]


def _scale(v: np.ndarray, ref: np.ndarray, metric: str) -> np.ndarray:
    if metric == "exact":
        return v
    if metric == "normalized-euclidean":
        sd = ref.std(axis=0)
        sd[sd <= 0] = 1.0
        return v / sd
    cov = np.atleast_2d(np.cov(ref, rowvar=False))
    eig = np.linalg.eigvalsh(cov)
    if eig[-1] <= 0 or eig[0] / eig[-1] < RCOND_TOL:
        raise SingularCovariance("matching covariance")
    chol = np.linalg.cholesky(cov)
    return np.linalg.solve(chol, v.T).T


def _brute_nearest(tv, cv, c_rank, exact: bool):
    """Nearest control per treated row; ties go to the lowest rank."""
    k = cv.shape[1]
    chunk = max(1, BRUTE_LIMIT // max(1, cv.shape[0] * max(k, 1)))
    idx = np.empty(len(tv), dtype=np.int64)
    dist = np.empty(len(tv))
    big = np.iinfo(np.int64).max
    for s in range(0, len(tv), chunk):
        diff = tv[s : s + chunk, None, :] - cv[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        best = d2.min(axis=1)
        tie = d2 <= best[:, None] * (1 + TIE_RTOL)
        pick = np.where(tie, c_rank[None, :], big).argmin(axis=1)
        idx[s : s + chunk] = pick
        dist[s : s + chunk] = np.sqrt(best)
    if exact:
        dist = np.where(dist == 0, 0.0, np.inf)
    return idx, dist


def _tree_nearest(tv, cv, c_rank):
    tree = cKDTree(cv)
    k = min(8, len(cv))
    d, j = tree.query(tv, k=k)
    if k == 1:
        d, j = d[:, None], j[:, None]
    tie = d <= d[:, :1] * (1 + TIE_RTOL)
    cand = np.where(tie, c_rank[j], np.iinfo(np.int64).max)
    col = cand.argmin(axis=1)
    rows = np.arange(len(tv))
    idx = j[rows, col]
    dist = d[:, 0].copy()
    crowded = tie.all(axis=1) & (k < len(cv))
    if crowded.any():
        bi, bd = _brute_nearest(tv[crowded], cv, c_rank, exact=False)
        idx[crowded] = bi
        dist[crowded] = bd
    return idx, dist


def _assign_without_replacement(tv, cv, exact: bool):
    diff = tv[:, None, :] - cv[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    cost = dist.copy()
    if exact:
        cost[dist > 0] = 1e300
    rows, cols = linear_sum_assignment(cost)
    idx = np.full(len(tv), -1, dtype=np.int64)
    out = np.full(len(tv), np.inf)
    idx[rows] = cols
    out[rows] = dist[rows, cols]
    if exact:
        out[out > 0] = np.inf
    return idx, out


def match_pairs(data: PanelDataset, spec: MatchSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (treated index, matched control index, distance) in data order.

    Unmatched treated units have control index -1 and infinite distance.
    """
    tr, co = _groups(data)
    ranks = _ranks(np.asarray(data.unit_id))
    t_idx = np.flatnonzero(tr)
    c_idx = np.flatnonzero(co)
    t_idx = t_idx[np.argsort(ranks[t_idx], kind="stable")]
    c_idx = c_idx[np.argsort(ranks[c_idx], kind="stable")]
    v = _match_vars(data, spec)
    ref = {"control": v[c_idx], "treated": v[t_idx], "pooled": v}[spec.scale_group]
    v = _scale(v, ref, spec.metric)
    tv, cv = v[t_idx], v[c_idx]
    exact = spec.metric == "exact"
    c_rank = np.arange(len(c_idx))
    if not spec.with_replacement:
        local, dist = _assign_without_replacement(tv, cv, exact)
    elif exact or spec.search == "brute" or (
        spec.search == "auto" and len(tv) * len(cv) <= BRUTE_LIMIT
    ):
        local, dist = _brute_nearest(tv, cv, c_rank, exact)
    else:
        local, dist = _tree_nearest(tv, cv, c_rank)
    if spec.caliper is not None:
        dist = np.where(dist > spec.caliper, np.inf, dist)
    matched = np.where(np.isfinite(dist) & (local >= 0), c_idx[np.maximum(local, 0)], -1)
    return t_idx, matched, dist


def did_matched(data: PanelDataset, spec: MatchSpec | None = None) -> EstimateResult:
    """Nearest-neighbour matched DiD.

    Matching on X keeps the second difference; once lagged outcomes are part
    of the match the pre-period gap is matched away and only the post-period
    difference remains.
    """
    spec = spec or MatchSpec()
    t_idx, c_match, dist = match_pairs(data, spec)
    ok = c_match >= 0
    if not ok.any():
        raise NoFeasibleMatch("no treated unit has an acceptable control")
    ti, ci = t_idx[ok], c_match[ok]
    T = data.T
    y = data.y
    if spec.match_on == "X":
        pre = y[:, :T].mean(axis=1)
        contrast = (y[ti, T] - pre[ti]) - (y[ci, T] - pre[ci])
    else:
        contrast = y[ti, T] - y[ci, T]
    w = None if data.weight is None else data.weight[ti]
    name = {"X": "did_x", "X_and_YT": "did_xy", "Y0_only": "y_only"}[spec.match_on]
    return EstimateResult(
        estimator=name,
        tau_hat=float(_wmean(contrast, w)),
        n_treated=int(len(t_idx)),
        n_control_used=int(len(np.unique(ci))),
        unmatched_treated=int((~ok).sum()),
        mean_distance=float(dist[ok].mean()),
    )
