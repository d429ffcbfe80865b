"""Command-line front end: ``lodc-sim {fit,analyze,sweep,montecarlo}``.

Every command reads one JSON run configuration (``--config``), validates it
against :data:`CONFIG_SCHEMA` before computing anything, and writes JSON or
CSV into ``--out``. Fields are in mV/cm, powers in (mV/cm)^2, SNRs in dB.

Exit codes: 0 ok, 2 input error, 3 fit failure, 4 convergence failure,
5 sweep degraded (fewer than 90% of rows succeeded).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from lodc_sim import bussgang, montecarlo
from lodc_sim.amam import AmAmModel
from lodc_sim.bussgang import ConvergenceError
from lodc_sim.ofdm import SUPPORTED_QAM, LinkConfig
from lodc_sim.physics import CurveFormatError, FitError, fit_amam, read_curve_csv

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_FIT = 3
EXIT_CONVERGENCE = 4
EXIT_SWEEP = 5
SWEEP_MIN_OK = 0.9

# Sensor constants used throughout the figure recipes
SENSOR_MODEL = {"a": 3.5609, "b": 55.1572, "x0": 0.0}
# Signal powers at x_LO=10, delta_x=5: two below and two above the 3 sigma_t = delta_x boundary
FOUR_POWERS = [0.5, 2.0163, 10.0813, 42.3413]

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}

_LINK_PROPS = {
    "n_half": {"type": "integer", "minimum": 32},
    "m_qam": {"enum": list(SUPPORTED_QAM)},
    "q0": _pos,
    "delta_x": _pos,
    "x_lo": _nonneg,
    "x0": _nonneg,
    "sigma_r2": _nonneg,
}

_GRID = {
    "oneOf": [
        {"type": "array", "items": _num},
        {
            "type": "object",
            "properties": {"start": _num, "stop": _num, "num": {"type": "integer", "minimum": 0}},
            "required": ["start", "stop", "num"],
            "additionalProperties": False,
        },
    ]
}

_SWEEP = {
    "type": "object",
    "properties": {
        "tag": {"type": "string", "pattern": "^[A-Za-z0-9_-]+$"},
        "axis": {"enum": list(montecarlo.AXES)},
        "grid": _GRID,
        "series": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {**_LINK_PROPS, "sigma_t2": _pos},
                "additionalProperties": False,
            },
        },
        "columns": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "empirical": {"type": "boolean"},
    },
    "required": ["tag", "axis", "grid"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "figure": {
            "oneOf": [
                {"enum": ["fig7", "fig8", "fig9", "fig10", "fig11", "fig12", "fig13"]},
                {
                    "type": "array",
                    "items": {"enum": ["fig7", "fig8", "fig9", "fig10", "fig11", "fig12", "fig13"]},
                },
            ]
        },
        "model": {
            "type": "object",
            "properties": {"a": _pos, "b": _pos, "x0": _nonneg},
            "required": ["a", "b"],
            "additionalProperties": False,
        },
        "link": {"type": "object", "properties": _LINK_PROPS, "additionalProperties": False},
        "analysis": {
            "type": "object",
            "properties": {"max_order": {"type": "integer", "minimum": 2, "maximum": 200}},
            "additionalProperties": False,
        },
        "montecarlo": {
            "type": "object",
            "properties": {
                "n_frames": {"type": "integer", "minimum": 1},
                "gain": {"enum": ["sensor", "identity"]},
            },
            "additionalProperties": False,
        },
        "sweeps": {"type": "array", "items": _SWEEP},
        "input": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "threads": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}


class InputError(Exception):
    """Bad configuration or data; maps to exit code 2."""


# --- figure recipes ------------------------------------------------------------


def _arange(start, stop, step):
    n = int(round((stop - start) / step)) + 1
    return [round(start + k * step, 10) for k in range(n)]


def figure_recipe(tag: str) -> dict:
    """Full sweep definition behind a ``figure`` tag."""
    x_lo_grid = _arange(5.0, 20.0, 0.5)
    recipes = {
        "fig7": {
            "axis": "taylor_order",
            "grid": list(range(0, 21)),
            "series": [{"sigma_t2": p} for p in FOUR_POWERS],
            "columns": ["taylor_order", "sigma_t2", "alpha"],
        },
        "fig8": {
            "axis": "taylor_order",
            "grid": list(range(0, 21)),
            "series": [{"sigma_t2": p} for p in FOUR_POWERS],
            "columns": ["taylor_order", "sigma_t2", "sigma_d2"],
        },
        "fig9": {
            "axis": "sigma_t2",
            "grid": [10 ** (db / 10) for db in _arange(-10.0, 20.0, 0.5)],
            "series": [{"x_lo": x} for x in (5.0, 10.0, 15.0)],
            "columns": ["sigma_t2_db", "x_lo", "snr_d_db", "alpha", "sigma_d2"],
        },
        "fig10": {
            "axis": "x_lo",
            "grid": _arange(5.0, 20.0, 1.0),
            "series": [{"m_qam": m} for m in (4, 16, 64)],
            "columns": ["x_lo", "m_qam", "ber_theory", "ber_mc", "stderr"],
            "empirical": True,
        },
        "fig11": {
            "axis": "x_lo",
            "grid": x_lo_grid,
            "series": [{"sigma_t2": p, "sigma_r2": r} for r in (0.0, 1e-6) for p in FOUR_POWERS],
            "columns": ["x_lo", "sigma_t2", "sigma_r2", "snr_d_db", "snr_r_db"],
        },
        "fig12": {
            "axis": "x_lo",
            "grid": _arange(5.0, 20.0, 1.0),
            "series": [{"m_qam": 4, "sigma_r2": r} for r in (0.0, 1e-7, 1e-6, 1e-5)],
            "columns": ["x_lo", "sigma_r2", "ber_theory", "ber_mc", "stderr"],
            "empirical": True,
        },
        "fig13": {
            "axis": "eb_n0_db",
            "grid": _arange(20.0, 80.0, 5.0),
            "series": [{"m_qam": m, "x_lo": x} for m in (4, 16, 64) for x in (5.0, 10.0, 15.0)],
            "columns": ["eb_n0_db", "m_qam", "x_lo", "ber_theory", "ber_mc", "stderr"],
            "empirical": True,
        },
    }
    if tag not in recipes:
        raise InputError(f"unknown figure tag {tag!r}")
    return {"tag": tag, **recipes[tag]}


# --- configuration ---------------------------------------------------------------


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: line {exc.lineno}: {exc.msg}") from exc
    validate_config(doc)
    return doc


def validate_config(doc) -> None:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config invalid at {where}: {exc.message}") from exc


def _model(doc) -> AmAmModel:
    return AmAmModel(**{**SENSOR_MODEL, **doc.get("model", {})})


def _link(doc, overrides=None) -> LinkConfig:
    fields = {**doc.get("link", {}), **(overrides or {})}
    power = fields.pop("sigma_t2", None)
    try:
        cfg = LinkConfig(**fields)
        if power is not None:
            # express the requested power through q0 so link and analysis agree
            q0 = math.sqrt(3 * power / (2 * (cfg.m_qam - 1) * (2 * cfg.n_half - 2)))
            cfg = replace(cfg, q0=q0)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    return cfg


def _grid(spec) -> list[float]:
    if isinstance(spec, dict):
        grid = np.linspace(spec["start"], spec["stop"], spec["num"]).tolist()
    else:
        grid = [float(v) for v in spec]
    if not grid:
        raise InputError("sweep grid is empty")
    diffs = np.diff(grid)
    if len(grid) > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise InputError("sweep grid must be strictly monotone")
    return grid


def _sweeps(doc) -> list[dict]:
    out = []
    figs = doc.get("figure", [])
    for tag in [figs] if isinstance(figs, str) else figs:
        out.append(figure_recipe(tag))
    out.extend(doc.get("sweeps", []))
    if not out:
        raise InputError("no sweep declared: give `figure` or `sweeps`")
    tags = [s["tag"] for s in out]
    if len(set(tags)) != len(tags):
        raise InputError(f"duplicate sweep tags: {tags}")
    return out


# --- serialization -----------------------------------------------------------------


def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def dump_json(doc: dict) -> str:
    return json.dumps(_clean({"schema_version": SCHEMA_VERSION, **doc}), indent=2, sort_keys=True) + "\n"


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def _write(out_dir: Path, name: str, text: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(text, encoding="utf-8")
    return path


# --- commands ---------------------------------------------------------------------


def cmd_fit(args, doc) -> int:
    src = args.input or doc.get("input")
    if not src:
        raise InputError("fit needs an input curve: --input or config `input`")
    try:
        curve = read_curve_csv(src)
    except CurveFormatError as exc:
        raise InputError(f"{src}: {exc}") from exc
    except OSError as exc:
        raise InputError(f"cannot read {src}: {exc}") from exc
    try:
        res = fit_amam(curve)
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    m = res.model
    out = {
        "model": {"a": m.a, "b": m.b, "x0": m.x0},
        "residual_rms": res.residual_rms,
        "iterations": res.iterations,
        "n_points": res.n_points,
        "x0_initial": res.x0_initial,
        "source": str(src),
    }
    path = _write(Path(args.out), "fit.json", dump_json(out))
    print(f"fit a={m.a:.6g} b={m.b:.6g} x0={m.x0:.6g} rms={res.residual_rms:.3g} -> {path}")
    return EXIT_OK


def _analysis_doc(model, cfg, max_order) -> dict:
    op = cfg.operating_point()
    an = bussgang.analyze(model, op, max_order)
    s = bussgang.snr(an, op, cfg.n_half, cfg.sigma_r2)
    ber_d, ber_r = bussgang.theoretical_ber(an, op, cfg.m_qam, cfg.q0, cfg.n_half, cfg.sigma_r2)
    return {
        "alpha": an.alpha,
        "e_nd": an.e_nd,
        "e_sd2": an.e_sd2,
        "sigma_d2": an.sigma_d2,
        "order_used": an.order_used,
        "converged": an.converged,
        "max_order": max_order,
        "sigma_t2": op.sigma_t2,
        "snr_d_db": montecarlo._db(s.snr_d),
        "snr_r_db": montecarlo._db(s.snr_r),
        "snr_d_k_db": montecarlo._db(s.snr_d_k),
        "snr_r_k_db": montecarlo._db(s.snr_r_k),
        "ber_d_theory": ber_d,
        "ber_theory": ber_r,
        "eb_n0_db": bussgang.eb_over_n0(op.sigma_t2, cfg.m_qam, cfg.sigma_r2) if cfg.sigma_r2 > 0 else math.inf,
    }


def _link_doc(cfg: LinkConfig) -> dict:
    return {k: getattr(cfg, k) for k in _LINK_PROPS}


def cmd_analyze(args, doc) -> int:
    model, cfg = _model(doc), _link(doc)
    max_order = doc.get("analysis", {}).get("max_order", bussgang.DEFAULT_MAX_ORDER)
    try:
        res = _analysis_doc(model, cfg, max_order)
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        for name, vals in exc.partial_sums.items():
            print(f"{name} partial sums: " + " ".join(repr(float(v)) for v in vals[-5:]), file=sys.stderr)
        return EXIT_CONVERGENCE
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = {"model": {"a": model.a, "b": model.b, "x0": model.x0}, "link": _link_doc(cfg), "analysis": res}
    path = _write(Path(args.out), "analysis.json", dump_json(out))
    print(
        f"alpha={res['alpha']:.6g} sigma_d2={res['sigma_d2']:.6g} snr_d={res['snr_d_db']:.3f} dB "
        f"ber={res['ber_theory']:.4g} (order {res['order_used']}) -> {path}"
    )
    return EXIT_OK


def _extra_columns(row: dict) -> None:
    p = row.get("sigma_t2")
    row["sigma_t2_db"] = 10 * math.log10(p) if p else None


def run_sweep(doc, seed, threads, sweep_def) -> tuple[list[dict], list[str]]:
    model = _model(doc)
    grid = _grid(sweep_def["grid"])
    axis = sweep_def["axis"]
    if axis == "taylor_order":
        grid = [int(v) if float(v).is_integer() else v for v in grid]
    empirical = sweep_def.get("empirical", False)
    n_frames = doc.get("montecarlo", {}).get("n_frames", 10000)
    rows = []
    for k, ov in enumerate(sweep_def.get("series", [{}])):
        cfg = _link(doc, ov)
        plan = montecarlo.TrialPlan(
            cfg, model, n_frames=n_frames, base_seed=(seed + 1_000_003 * k) % 2**64, sweep_axis=(axis, grid)
        )
        for row in montecarlo.sweep(plan, analytic=True, empirical=empirical, threads=threads):
            if "sigma_t2" in ov and axis != "sigma_t2":
                row["sigma_t2"] = ov["sigma_t2"]  # nominal value, not its q0 round trip
            _extra_columns(row)
            rows.append(row)
    cols = list(sweep_def.get("columns") or [axis, "alpha", "sigma_d2", "snr_d_db", "snr_r_db", "ber_theory"])
    cols.append("status")
    return rows, cols


def cmd_sweep(args, doc) -> int:
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    threads = _threads(args, doc)
    worst = 1.0
    for sweep_def in _sweeps(doc):
        rows, cols = run_sweep(doc, seed, threads, sweep_def)
        ok = sum(r["status"] == "ok" for r in rows)
        frac = ok / len(rows)
        worst = min(worst, frac)
        path = _write(Path(args.out), f"{sweep_def['tag']}.csv", dump_csv(rows, cols))
        print(f"{sweep_def['tag']}: {ok}/{len(rows)} rows ok -> {path}")
    return EXIT_OK if worst >= SWEEP_MIN_OK else EXIT_SWEEP


def cmd_montecarlo(args, doc) -> int:
    model, cfg = _model(doc), _link(doc)
    mc = doc.get("montecarlo", {})
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    identity = mc.get("gain", "sensor") == "identity"
    plan = montecarlo.TrialPlan(cfg, model, n_frames=mc.get("n_frames", 10000), base_seed=seed)
    try:
        analytic = None if identity else _analysis_doc(model, cfg, bussgang.DEFAULT_MAX_ORDER)
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    res = montecarlo.run_link_trials(plan, gain=(lambda s: s) if identity else None, threads=_threads(args, doc))
    result = res.to_dict()
    wall = result.pop("wall_time")  # kept off the file so reruns are byte-identical
    out = {
        "seed": seed,
        "gain": "identity" if identity else "sensor",
        "model": {"a": model.a, "b": model.b, "x0": model.x0},
        "link": _link_doc(cfg),
        "result": result,
        "analytic": analytic,
    }
    if analytic is not None:
        out["comparison"] = {
            "alpha": [analytic["alpha"], res.alpha_hat],
            "sigma_d2": [analytic["sigma_d2"], res.sigma_d2_hat],
            "ber": [analytic["ber_theory"], res.ber_empirical],
            "ber_z": (res.ber_empirical - analytic["ber_theory"]) / res.ber_stderr if res.ber_stderr > 0 else None,
        }
    path = _write(Path(args.out), "montecarlo.json", dump_json(out))
    print(f"ber={res.ber_empirical:.4e} ({res.bit_errors}/{res.bits_total}) in {wall:.2f} s -> {path}")
    return EXIT_OK


def _threads(args, doc) -> int:
    if args.threads is not None:
        return args.threads
    if "threads" in doc:
        return doc["threads"]
    return montecarlo.default_threads()


COMMANDS = {"fit": cmd_fit, "analyze": cmd_analyze, "sweep": cmd_sweep, "montecarlo": cmd_montecarlo}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lodc-sim", description="LODC-OFDM link simulator over an atomic sensor.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--input", help="AM-AM curve CSV (fit only; overrides config `input`)")
    p.add_argument("--seed", type=int, help="base seed (overrides config)")
    p.add_argument("--threads", type=int, help="worker threads (default: $LODC_SIM_THREADS or CPU count)")
    p.add_argument("--out", default=".", help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise InputError("--seed must be an unsigned 64-bit integer")
        if args.threads is not None and args.threads < 1:
            raise InputError("--threads must be >= 1")
        if args.config:
            doc = load_config(args.config)
        elif args.command == "fit":
            doc = {}
        else:
            raise InputError(f"{args.command} needs --config")
        return COMMANDS[args.command](args, doc)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
