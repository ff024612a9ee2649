"""Command line entry point.

Exit status: 0 success, 2 invalid input, 3 numerical failure, 4 file error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__, oracle, simlab
from .dataio import (
    PanelSchema,
    ReportBundle,
    emit_report,
    file_digest,
    load_json,
    load_panel,
    load_params,
    write_panel,
)
from .errors import InputOutputError, MatchDidError, ParseError, UnsupportedConfig
from .guidelines import (
    StaggeredPanel,
    bootstrap_guidelines,
    estimate_guideline_x,
    estimate_guideline_xy,
    sensitivity_t1,
    staggered_analysis,
)
from .model import sample_population, validate

EXTENSIONS = {".json": "json", ".csv": "csv", ".txt": "text"}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ParseError(f"cannot parse number list {text!r}") from None


def _pair(text: str | Sequence[int] | None) -> tuple[int, int] | None:
    if text is None:
        return None
    vals = [int(v) for v in (text.split(",") if isinstance(text, str) else text)]
    if len(vals) != 2:
        raise UnsupportedConfig("sigma pair needs exactly two periods")
    return vals[0], vals[1]


def _timestamp() -> str | None:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if not epoch:
        return None
    return _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc).isoformat()


def _finish(args, kind: str, payload: dict[str, Any], inputs: list, config: dict | None = None) -> None:
    bundle = ReportBundle(
        kind=kind,
        payload=payload,
        seed=getattr(args, "seed", None),
        input_digest=file_digest(inputs) if inputs else None,
        config=config or {},
        version=__version__,
        timestamp=_timestamp(),
    )
    fmt = args.format
    if fmt is None:
        fmt = EXTENSIONS.get(Path(args.out).suffix, "json") if args.out else "text"
    text = emit_report(bundle, fmt, args.out)
    if args.out is None:
        sys.stdout.write(text)


def cmd_bias(args) -> None:
    params = load_params(args.params)
    rep = oracle.bias_report(params)
    _finish(args, "bias", {"bias": rep.to_dict(), "model": params.to_dict()}, [args.params])


def cmd_simulate(args) -> None:
    params = load_params(args.params)
    vm = validate(params)
    data = sample_population(vm, args.n, args.seed)
    if args.write_panel:
        write_panel(data, args.write_panel)
    names = args.estimators.split(",") if args.estimators else list(simlab.ESTIMATORS)
    estimates = []
    for name in names:
        if name not in simlab.ESTIMATORS:
            raise UnsupportedConfig(f"unknown estimator {name!r}")
        row: dict[str, Any] = {"estimator": name}
        try:
            row.update(simlab.ESTIMATORS[name](data).to_dict())
            row["oracle_bias"] = simlab.ORACLES[name](vm)
            row["error"] = None
        except MatchDidError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        estimates.append(row)
    payload = {"n": args.n, "tau": params.tau, "estimates": estimates, "model": params.to_dict()}
    _finish(args, "simulate", payload, [args.params])


def _advise_config(args) -> tuple[dict[str, Any], list]:
    inputs = [args.panel]
    cfg: dict[str, Any] = {}
    if args.config:
        cfg = load_json(args.config)
        inputs.append(args.config)
    schema_doc = cfg.get("schema")
    if args.schema:
        schema_doc = load_json(args.schema)
        inputs.append(args.schema)
    if schema_doc is None:
        schema_doc = _infer_schema(args.panel)
    schema_doc = dict(schema_doc)
    if args.staggered:
        schema_doc["event_year"] = args.staggered
        schema_doc["z"] = None
    cfg["schema"] = schema_doc
    for key in ("bootstrap", "seed", "lags"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if args.sigma_pair:
        cfg["sigma_pair"] = list(_pair(args.sigma_pair))
    if args.sensitivity:
        cfg["sensitivity"] = _floats(args.sensitivity)
    return cfg, inputs


def _infer_schema(path) -> dict[str, Any]:
    """Column layout of files written by ``simulate --write-panel``."""
    try:
        with open(path) as fh:
            header = [h.strip() for h in fh.readline().strip().split(",")]
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc.strerror or exc}") from None
    xs = sorted((h for h in header if h[:1] == "x" and h[1:].isdigit()), key=lambda h: int(h[1:]))
    ys = sorted((h for h in header if h[:1] == "y" and h[1:].isdigit()), key=lambda h: int(h[1:]))
    return PanelSchema(
        unit_id="unit_id",
        z="z",
        covariates=xs,
        outcomes=ys,
        cluster_id="cluster_id" if "cluster_id" in header else None,
        weight="weight" if "weight" in header else None,
    ).to_dict()


def cmd_advise(args) -> None:
    cfg, inputs = _advise_config(args)
    schema = PanelSchema.from_dict(cfg["schema"])
    data = load_panel(args.panel, schema)
    pair = _pair(cfg.get("sigma_pair"))
    seed = int(cfg.get("seed", 0))
    args.seed = seed
    B = cfg.get("bootstrap")
    payload: dict[str, Any]
    if isinstance(data, StaggeredPanel):
        if "lags" not in cfg:
            raise UnsupportedConfig("staggered analysis needs the number of lags ('lags' or --lags)")
        rep = staggered_analysis(data, int(cfg["lags"]), pair)
        payload = rep.to_dict()
    elif cfg.get("sensitivity"):
        reps = sensitivity_t1(data, cfg["sensitivity"])
        payload = {"sensitivity": [r.to_dict() for r in reps]}
    else:
        report = estimate_guideline_xy(data, pair) if data.T >= 2 else estimate_guideline_x(data)
        if B:
            report.bootstrap = bootstrap_guidelines(data, int(B), seed, pair)
        payload = {"report": report.to_dict()}
    _finish(args, "advise", payload, inputs, cfg)


def cmd_sweep(args) -> None:
    doc = load_json(args.spec)
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = simlab.SweepSpec.from_dict(doc)
    args.seed = spec.seed
    rows = simlab.run_sweep(spec)
    payload = {"columns": list(simlab.SWEEP_COLUMNS), "rows": rows}
    _finish(args, "sweep", payload, [args.spec], simlab.spec_to_dict(spec))


def cmd_robustness(args) -> None:
    doc = load_json(args.spec)
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = simlab.RobustnessSpec.from_dict(doc)
    args.seed = spec.seed

    def progress(done, total):
        if args.progress:
            print(f"\r{done}/{total} cells", end="", file=sys.stderr, flush=True)

    rows = simlab.run_robustness(spec, progress)
    if args.progress:
        print(file=sys.stderr)
    payload = {
        "columns": list(simlab.ROBUSTNESS_COLUMNS),
        "rows": rows,
        "summary": simlab.summarize_robustness(rows),
    }
    _finish(args, "robustness", payload, [args.spec], simlab.spec_to_dict(spec))


def _output_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--format", choices=["json", "csv", "text"], help="report format; default from --out suffix")


def _advise_flags(p: argparse.ArgumentParser, default_b: int | None) -> None:
    p.add_argument("--panel", required=True, help="panel CSV")
    p.add_argument("--schema", help="JSON column mapping")
    p.add_argument("--config", help="JSON with schema, sigma_pair, lags, bootstrap, seed")
    p.add_argument("--bootstrap", type=int, default=default_b, metavar="B", help="cluster bootstrap replicates")
    p.add_argument("--seed", type=int)
    p.add_argument("--staggered", metavar="COL", help="event-year column; runs per-year analysis")
    p.add_argument("--lags", type=int, help="pre-periods per event year in staggered mode")
    p.add_argument("--sigma-pair", help="two pre-periods for the noise estimate, e.g. 1,2")
    p.add_argument("--sensitivity", metavar="R_LIST", help="assumed reliabilities for one pre-period")
    _output_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matchdid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"matchdid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bias", help="population biases from model parameters")
    p.add_argument("--params", required=True)
    _output_flags(p)
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("simulate", help="draw a panel and run the estimators")
    p.add_argument("--params", required=True)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimators", help="comma list from: " + ", ".join(simlab.ESTIMATORS))
    p.add_argument("--write-panel", metavar="CSV")
    _output_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("advise", help="matching guidelines for a panel")
    _advise_flags(p, None)
    p.set_defaults(func=cmd_advise)

    p = sub.add_parser("bootstrap", help="advise with a cluster bootstrap (default B = 1000)")
    _advise_flags(p, 1000)
    p.set_defaults(func=cmd_advise)

    p = sub.add_parser("sweep", help="oracle and simulated bias along one parameter")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int)
    _output_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("robustness", help="guideline decisions across the robustness grid")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--progress", action="store_true")
    _output_flags(p)
    p.set_defaults(func=cmd_robustness)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except MatchDidError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputOutputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
