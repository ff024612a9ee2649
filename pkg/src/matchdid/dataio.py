"""File formats: model parameters, panels, specs and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from .errors import (
    InputOutputError,
    MissingColumn,
    ParseError,
    UnbalancedPanel,
    UnsupportedConfig,
    ValidationError,
)
from .guidelines import StaggeredPanel
from .model import ModelParams, PanelDataset

FORMAT_VERSION = 1


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc.strerror or exc}") from None


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise InputOutputError(f"cannot write {path}: {exc.strerror or exc}") from None


def load_json(path) -> dict[str, Any]:
    text = _read_text(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    return doc


def load_params(path) -> ModelParams:
    doc = load_json(path)
    return ModelParams.from_dict(doc.get("model", doc))


def save_params(params: ModelParams, path) -> None:
    _write_text(path, json.dumps(params.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class PanelSchema:
    """Column mapping for a panel CSV.

    Wide files list ``outcomes`` in time order. Long files set ``year`` and
    ``outcome`` instead. Exactly one of ``z`` and ``event_year`` names the
    treatment column; a long-format row is an event when its year equals its
    ``event_year`` value.
    """

    unit_id: str = "unit_id"
    covariates: list[str] = field(default_factory=list)
    outcomes: list[str] = field(default_factory=list)
    z: str | None = None
    event_year: str | None = None
    year: str | None = None
    outcome: str | None = None
    cluster_id: str | None = None
    weight: str | None = None

    def __post_init__(self):
        if (self.z is None) == (self.event_year is None):
            raise UnsupportedConfig("schema needs exactly one of 'z' and 'event_year'")
        long = self.year is not None
        if long and self.outcome is None:
            raise UnsupportedConfig("long-format schema needs 'outcome' alongside 'year'")
        if not long:
            if self.event_year is not None:
                raise UnsupportedConfig("event-year panels must be in long format")
            if len(self.outcomes) < 2:
                raise UnsupportedConfig("wide schema needs at least two outcome columns")

    @property
    def is_long(self) -> bool:
        return self.year is not None

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "PanelSchema":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise UnsupportedConfig(f"unknown schema keys {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def wide(cls, p: int, T: int, weight: bool = False) -> "PanelSchema":
        """Schema of the files written by :func:`write_panel`."""
        return cls(
            unit_id="unit_id",
            cluster_id="cluster_id",
            z="z",
            covariates=[f"x{j}" for j in range(p)],
            outcomes=[f"y{t}" for t in range(T + 1)],
            weight="weight" if weight else None,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _numeric(frame: pd.DataFrame, col: str, path, allow_missing: bool = False) -> np.ndarray:
    raw = frame[col]
    vals = pd.to_numeric(raw, errors="coerce")
    bad = vals.isna() & raw.notna() & (raw.astype(str).str.strip() != "")
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError(f"{path}: row {i + 2}, column '{col}': cannot parse {raw.iloc[i]!r} as a number")
    out = vals.to_numpy(dtype=float)
    if not allow_missing and np.isnan(out).any():
        i = int(np.flatnonzero(np.isnan(out))[0])
        raise ParseError(f"{path}: row {i + 2}, column '{col}': missing value")
    return out


def _read_frame(path, needed: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""], skipinitialspace=True)
    except FileNotFoundError:
        raise InputOutputError(f"cannot read {path}: no such file") from None
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    missing = [c for c in needed if c not in frame.columns]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {missing}")
    return frame


def _ids(raw: pd.Series) -> np.ndarray:
    as_num = pd.to_numeric(raw, errors="coerce")
    if as_num.notna().all() and np.all(as_num == np.round(as_num)):
        return as_num.to_numpy().astype(np.int64)
    return raw.astype(str).to_numpy()


def _needed(schema: PanelSchema) -> list[str]:
    cols = [schema.unit_id, *schema.covariates]
    cols += [c for c in (schema.z, schema.event_year, schema.year, schema.outcome,
                         schema.cluster_id, schema.weight) if c is not None]
    if not schema.is_long:
        cols += schema.outcomes
    return cols


def load_panel(path, schema: PanelSchema) -> PanelDataset | StaggeredPanel:
    """Read a panel CSV.

    Returns a :class:`PanelDataset` for treatment-indicator files and a
    :class:`StaggeredPanel` for event-year files. Long files are pivoted to one
    row per unit; covariates of a long treatment-indicator file are averaged
    over the pre-periods.
    """
    frame = _read_frame(path, _needed(schema))
    if not schema.covariates:
        raise UnsupportedConfig("at least one covariate column is required")
    if schema.is_long:
        return _load_long(frame, schema, path)
    ids = _ids(frame[schema.unit_id])
    if len(np.unique(ids)) != len(ids):
        dup = pd.Series(ids)[pd.Series(ids).duplicated()].iloc[0]
        raise UnbalancedPanel(f"{path}: unit {dup} appears on more than one row of a wide file")
    y = np.column_stack([_numeric(frame, c, path, allow_missing=True) for c in schema.outcomes])
    holes = np.isnan(y).any(axis=1)
    if holes.any():
        i = int(np.flatnonzero(holes)[0])
        col = schema.outcomes[int(np.flatnonzero(np.isnan(y[i]))[0])]
        raise UnbalancedPanel(f"{path}: unit {ids[i]} has no value for outcome '{col}'")
    return PanelDataset(
        unit_id=ids,
        z=_indicator(frame, schema.z, path),
        x=np.column_stack([_numeric(frame, c, path) for c in schema.covariates]),
        y=y,
        cluster_id=None if schema.cluster_id is None else _ids(frame[schema.cluster_id]),
        weight=None if schema.weight is None else _numeric(frame, schema.weight, path),
    )


def _indicator(frame, col, path) -> np.ndarray:
    z = _numeric(frame, col, path)
    bad = (z != 0) & (z != 1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ParseError(f"{path}: row {i + 2}, column '{col}': treatment must be 0 or 1")
    return z.astype(np.int8)


def _load_long(frame: pd.DataFrame, schema: PanelSchema, path):
    ids = _ids(frame[schema.unit_id])
    year = _numeric(frame, schema.year, path)
    if np.any(year != np.round(year)):
        i = int(np.flatnonzero(year != np.round(year))[0])
        raise ParseError(f"{path}: row {i + 2}, column '{schema.year}': year must be an integer")
    year = year.astype(np.int64)
    y = _numeric(frame, schema.outcome, path, allow_missing=True)
    if np.isnan(y).any():
        i = int(np.flatnonzero(np.isnan(y))[0])
        raise UnbalancedPanel(f"{path}: unit {ids[i]} has no outcome for year {year[i]}")
    x = np.column_stack([_numeric(frame, c, path) for c in schema.covariates])
    key = pd.DataFrame({"u": ids, "t": year})
    dup = key.duplicated()
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise UnbalancedPanel(f"{path}: unit {ids[i]} has more than one row for year {year[i]}")
    clusters = None if schema.cluster_id is None else _ids(frame[schema.cluster_id])
    if schema.event_year is not None:
        ev_year = _numeric(frame, schema.event_year, path, allow_missing=True)
        return StaggeredPanel(
            unit_id=ids,
            year=year,
            y=y,
            x=x,
            event=np.nan_to_num(ev_year, nan=-np.inf) == year,
            cluster_id=clusters,
        )
    years = np.unique(year)
    units, u_inv = np.unique(ids, return_inverse=True)
    t_inv = np.searchsorted(years, year)
    wide = np.full((len(units), len(years)), np.nan)
    wide[u_inv, t_inv] = y
    holes = np.isnan(wide).any(axis=1)
    if holes.any():
        u = int(np.flatnonzero(holes)[0])
        gap = years[np.isnan(wide[u])][0]
        raise UnbalancedPanel(f"{path}: unit {units[u]} has no row for year {gap}")
    z_row = _indicator(frame, schema.z, path)
    z = np.zeros(len(units), dtype=np.int8)
    post = t_inv == len(years) - 1
    z[u_inv[post]] = z_row[post]
    pre = ~post
    xsum = np.zeros((len(units), x.shape[1]))
    np.add.at(xsum, u_inv[pre], x[pre])
    first = np.unique(u_inv, return_index=True)[1]
    weight = None
    if schema.weight is not None:
        weight = _numeric(frame, schema.weight, path)[first]
    return PanelDataset(
        unit_id=units,
        z=z,
        x=xsum / (len(years) - 1),
        y=wide,
        cluster_id=None if clusters is None else clusters[first],
        weight=weight,
    )


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_panel(data: PanelDataset, path) -> PanelSchema:
    """Write a wide CSV with full float precision and return its schema."""
    schema = PanelSchema.wide(data.p, data.T, weight=data.weight is not None)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = [schema.unit_id, schema.cluster_id, schema.z, *schema.covariates, *schema.outcomes]
    if schema.weight:
        header.append(schema.weight)
    w.writerow(header)
    for i in range(data.n):
        row = [data.unit_id[i], data.cluster_id[i], data.z[i], *data.x[i], *data.y[i]]
        if schema.weight:
            row.append(data.weight[i])
        w.writerow([_fmt(v) for v in row])
    _write_text(path, buf.getvalue())
    return schema


def file_digest(paths: Sequence[str | Path]) -> str:
    """SHA-256 over the bytes of the given files, in the given order."""
    h = hashlib.sha256()
    for p in paths:
        try:
            h.update(Path(p).read_bytes())
        except OSError as exc:
            raise InputOutputError(f"cannot read {p}: {exc.strerror or exc}") from None
        h.update(b"\0")
    return h.hexdigest()


@dataclass
class ReportBundle:
    """Everything needed to reproduce and read one command's output."""

    kind: str
    payload: dict[str, Any]
    seed: int | None = None
    input_digest: str | None = None
    config: dict[str, Any] = field(default_factory=dict)
    version: str = ""
    timestamp: str | None = None
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))


def _plain(obj):
    """Convert to JSON-ready values; non-finite floats become null."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return _plain(obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _json(bundle: ReportBundle) -> str:
    return json.dumps(bundle.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _flatten(prefix: str, obj, out: list[tuple[str, Any]]) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], out)
    elif isinstance(obj, list) and obj and all(isinstance(v, (dict, list)) for v in obj):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}[{i}]", v, out)
    else:
        out.append((prefix, obj))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, list):
        return json.dumps(v)
    return _fmt(v)


def _csv(bundle: ReportBundle) -> str:
    data = bundle.to_dict()["payload"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    rows = data.get("rows")
    if isinstance(rows, list) and rows and isinstance(rows[0], dict):
        cols = list(data.get("columns") or rows[0].keys())
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in cols])
        return buf.getvalue()
    flat: list[tuple[str, Any]] = []
    _flatten("", data, flat)
    w.writerow(["field", "value"])
    for k, v in flat:
        w.writerow([k, _cell(v)])
    return buf.getvalue()


def _num(v, digits: int = 4) -> str:
    if v is None:
        return "NA"
    if isinstance(v, list):
        return "(" + ", ".join(_num(u, digits) for u in v) + ")"
    return f"{v:.{digits}g}" if abs(v) < 1e-3 and v != 0 else f"{v:.{digits}f}"


def _with_ci(value, ci: dict | None, name: str) -> str:
    text = _num(value)
    if ci and ci.get(name):
        lo, hi = ci[name]
        text += f" [{_num(lo)}, {_num(hi)}]"
    return text


def _guideline_text(rep: dict[str, Any], title: str = "") -> list[str]:
    boot = rep.get("bootstrap") or {}
    ci = boot.get("ci") if boot else None
    width = 30
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'':{width}}{'Covariates (X)':<34}Lagged outcomes (Y)")
    params_x = f"delta_x = {_num(rep['delta_x_hat'])}"
    params_y = "NA"
    if rep.get("r_hat") is not None:
        params_y = f"r = {_with_ci(rep['r_hat'], ci, 'r_hat')}; s = {_with_ci(rep['s_hat'], ci, 's_hat')}"
    lines.append(f"{'Estimated parameters':<{width}}{params_x:<34}{params_y}")
    extra = f"Delta_x = {_num(rep['Delta_x_hat'])}"
    if rep.get("sigma_e2_hat") is not None:
        extra_y = (
            f"sigma_e2 = {_with_ci(rep['sigma_e2_hat'], ci, 'sigma_e2_hat')}; "
            f"tilde_delta_theta = {_with_ci(rep.get('tilde_delta_theta_hat'), ci, 'tilde_delta_theta_hat')}"
        )
    else:
        extra_y = ""
    lines.append(f"{'':<{width}}{extra:<34}{extra_y}".rstrip())
    if rep.get("match_y") is None:
        match_y = "NA"
    elif rep["match_y"]:
        match_y = f"Yes, because r > 1 - |1 - s| ({_num(rep['r_hat'])} > {_num(rep['threshold'])})"
    else:
        match_y = f"No, because r <= 1 - |1 - s| ({_num(rep['r_hat'])} <= {_num(rep['threshold'])})"
    if boot and boot.get("match_y_vote_fraction") is not None:
        match_y += f"; bootstrap vote {boot['match_y_vote_fraction']:.3f}"
    lines.append(f"{'Match':<{width}}{'Yes':<34}{match_y}")
    red_x = _with_ci(rep["delta_tau_x_hat"], ci, "delta_tau_x_hat")
    red_y = _with_ci(rep.get("delta_tau_xy_hat"), ci, "delta_tau_xy_hat")
    lines.append(f"{'Estimated Reduction in Bias':<{width}}{red_x:<34}{red_y}")
    if rep.get("clamp_flags"):
        lines.append(f"{'Clamped loadings (periods)':<{width}}{rep['clamp_flags']}")
    if boot:
        lines.append(f"{'Bootstrap':<{width}}B = {boot['B']}, ok = {boot['n_ok']}, skipped = {boot['n_skipped']}")
    return lines


def _text_cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return _num(v, 6)
    return _cell(v)


def _text(bundle: ReportBundle) -> str:
    data = bundle.to_dict()
    pay = data["payload"]
    lines = [f"matchdid {data['kind']} report (version {data['version']})"]
    if data.get("seed") is not None:
        lines.append(f"seed: {data['seed']}")
    if data.get("input_digest"):
        lines.append(f"input sha256: {data['input_digest']}")
    lines.append("")
    if "report" in pay:
        lines += _guideline_text(pay["report"])
    if "aggregate" in pay:
        lines += _guideline_text(pay["aggregate"], "Aggregate over event years (weighted by treated count)")
        lines.append("")
        lines.append("Per-year match on lags: " + ", ".join(
            f"{y}: {'yes' if v else 'no'} (n_treated {pay['weights'][y]})" for y, v in pay["votes"].items()
        ))
        for y, msg in pay.get("failures", {}).items():
            lines.append(f"  year {y} skipped: {msg}")
    if "sensitivity" in pay:
        for rep in pay["sensitivity"]:
            lines += _guideline_text(rep, f"Assumed reliability {_num(rep['assumed_r'])}")
            lines.append("")
    if "bias" in pay:
        flat: list[tuple[str, Any]] = []
        _flatten("", pay["bias"], flat)
        for k, v in flat:
            lines.append(f"{k:<44}{_text_cell(v)}")
    if "estimates" in pay:
        lines.append(f"{'estimator':<10}{'tau_hat':>14}{'oracle bias':>14}{'unmatched':>11}")
        for e in pay["estimates"]:
            lines.append(
                f"{e['estimator']:<10}{_num(e.get('tau_hat')):>14}{_num(e.get('oracle_bias')):>14}"
                f"{_cell(e.get('unmatched_treated')):>11}"
            )
    if "summary" in pay:
        for k, v in pay["summary"].items():
            lines.append(f"{k:<36}{_text_cell(v)}")
    if "rows" in pay and "summary" not in pay:
        lines.append(f"{len(pay['rows'])} rows; use --format csv for the table")
    return "\n".join(lines).rstrip() + "\n"


def render_report(bundle: ReportBundle, fmt: str = "json") -> str:
    renderers = {"json": _json, "csv": _csv, "text": _text}
    if fmt not in renderers:
        raise ValidationError(f"unknown report format {fmt!r}")
    return renderers[fmt](bundle)


def emit_report(bundle: ReportBundle, fmt: str = "json", path=None) -> str:
    """Serialize ``bundle``; write it to ``path`` when given. Returns the text."""
    text = render_report(bundle, fmt)
    if path is not None:
        _write_text(path, text)
    return text
