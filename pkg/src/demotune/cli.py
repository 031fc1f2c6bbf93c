"""Command-line front end: ``demotune gen-demo | tune | simulate | grad-check``.

Exit codes: 0 ok, 2 config or usage error, 3 I/O or unreadable input,
4 numerical failure. ``DEMO_TUNE_THREADS`` overrides ``--threads``.
"""

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import secrets
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from demotune import __version__
from demotune.data import ScenarioSpec, generate_demo, load_demo, resample, save_demo
from demotune.errors import (
    DemoTuneError,
    InvalidConfigError,
    InvalidInputError,
    NumericalFailure,
    ParseError,
)
from demotune.model import Bounds
from demotune.planner import P0_DEFAULT, PARAM_NAMES, PlannerConfig, PlannerParams
from demotune.qp import QpSettings
from demotune.simloop import CostWeights, deviation_report, simulate
from demotune.tuners import TuneConfig, tune
from demotune.tuners.common import (
    THREADS_ENV,
    ClosedLoopCost,
    richardson_check,
    resolve_workers,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

MIN_FD_STEP = 1e-12
RICHARDSON_TOL = 1e-2

CONFIG_KEYS = ("bounds", "planner", "cost_weights", "tune", "scenario", "initial_params")
REPORT_COLUMNS = ("sum_dd2", "sum_dtheta2", "sum_dkappa2", "cost")
REPORT_HEADERS = ("", "sum(dd^2)", "sum(dtheta^2)", "sum(dkappa^2)", "cost")
METHOD_LABELS = {"gd": "GD", "ukf": "KF", "ml": "ML"}


class UsageError(DemoTuneError):
    pass


# -- configuration -----------------------------------------------------------


def _build(cls, data, what):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidConfigError(f"{what} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfigError(f"unknown {what} key(s): {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfigError(f"{what}: {exc}") from None


@dataclasses.dataclass
class RunConfig:
    """Everything a command needs, resolved from one JSON document."""

    bounds: Bounds
    planner: PlannerConfig
    weights: CostWeights
    tune: TuneConfig
    scenario: ScenarioSpec
    initial_params: PlannerParams
    raw: dict

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise InvalidConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(CONFIG_KEYS))
        if unknown:
            raise InvalidConfigError(f"unknown config key(s): {', '.join(unknown)}")
        bounds = _build(Bounds, doc.get("bounds"), "bounds")
        planner_doc = dict(doc.get("planner") or {})
        if "bounds" in planner_doc:
            raise InvalidConfigError("bounds belong at the top level, not under planner")
        qp = _build(QpSettings, planner_doc.pop("qp", None), "planner.qp")
        planner = _build(PlannerConfig, {**planner_doc, "bounds": bounds, "qp": qp}, "planner")
        weights = _build(CostWeights, doc.get("cost_weights"), "cost_weights")
        tune_cfg = _build(TuneConfig, doc.get("tune"), "tune")
        scenario = _build(ScenarioSpec, doc.get("scenario"), "scenario")
        p0 = doc.get("initial_params")
        initial = P0_DEFAULT if p0 is None else read_params_doc(p0)
        if not initial.within(bounds):
            raise InvalidConfigError("initial_params outside the weight bounds")
        return cls(bounds, planner, weights, tune_cfg, scenario, initial, doc)

    def resolved(self):
        """Fully expanded config (defaults filled in) for hashing and manifests."""
        planner = {
            "N": self.planner.N,
            "Ts": self.planner.Ts,
            "reference_kappa_dot": self.planner.reference_kappa_dot,
            "qp": dataclasses.asdict(self.planner.qp),
        }
        tune_cfg = dataclasses.asdict(self.tune)
        return {
            "bounds": self.bounds.to_dict(),
            "planner": planner,
            "cost_weights": {"Q": list(self.weights.Q)},
            "tune": tune_cfg,
            "scenario": self.scenario.to_dict(),
            "initial_params": self.initial_params.to_dict(),
        }


def read_json(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def load_config(path):
    return RunConfig.from_dict({} if path is None else read_json(path))


def read_params_doc(doc):
    if isinstance(doc, dict) and "params" in doc and isinstance(doc["params"], dict):
        doc = doc["params"]
    if isinstance(doc, list):
        return PlannerParams.from_array(doc)
    if not isinstance(doc, dict):
        raise InvalidConfigError("parameters must be an object of weights or a list of 5 values")
    unknown = sorted(set(doc) - set(PARAM_NAMES))
    if unknown:
        raise InvalidConfigError(f"unknown weight(s): {', '.join(unknown)}")
    return PlannerParams.from_dict(doc)


def load_params(path, bounds):
    params = read_params_doc(read_json(path))
    if not params.within(bounds):
        raise InvalidConfigError("parameters outside the weight bounds")
    return params


def prepare_demo(path, cfg):
    demo = load_demo(path)
    if len(demo) > 1 and abs(demo.ts_grid - cfg.Ts) > 1e-9:
        demo = resample(demo, cfg.Ts)
    return demo


# -- output helpers ------------------------------------------------------------


def _canonical(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, doc):
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    atomic_write(path, buf.getvalue())


def _fmt(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def aligned_table(headers, rows):
    """Plain-text table with right-aligned numeric columns."""
    cells = [list(headers)] + [[r[0]] + [f"{float(v):.6g}" for v in r[1:]] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for j, row in enumerate(cells):
        parts = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_manifest(out_path, command, config_hash, inputs, seed, wall_time, extra=None):
    doc = {
        "command": command,
        "config_hash": config_hash,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "seed": seed,
        "version": __version__,
        "wall_time": wall_time,
    }
    if extra:
        doc.update(extra)
    write_json(out_path, doc)


def _ensure_dir(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror or exc}") from None
    return path


def report_rows(entries):
    return [[label] + [rep.to_dict()[c] for c in REPORT_COLUMNS] for label, rep in entries]


def params_rows(entries):
    return [[label] + list(p.as_array()) for label, p in entries]


# -- commands ------------------------------------------------------------------


def cmd_gen_demo(args):
    start = time.perf_counter()
    cfg = load_config(args.config)
    scenario_doc = read_json(args.scenario)
    if isinstance(scenario_doc, dict) and "scenario" in scenario_doc:
        scenario_doc = scenario_doc["scenario"]
    scenario_doc = dict(scenario_doc) if isinstance(scenario_doc, dict) else scenario_doc
    if not isinstance(scenario_doc, dict):
        raise InvalidConfigError("scenario must be a JSON object")
    # --seed wins; otherwise draw one so the run stays reproducible from its manifest
    if args.seed is not None:
        seed = args.seed
    else:
        seed = secrets.randbits(63)
    scenario_doc.pop("seed", None)
    spec = _build(ScenarioSpec, {**scenario_doc, "seed": seed}, "scenario")
    params = load_params(args.params, cfg.bounds) if args.params else P0_DEFAULT
    demo = generate_demo(spec, params, cfg.planner)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        _ensure_dir(out.parent)
    buf = out.with_name(f".{out.name}.tmp")
    save_demo(demo, buf)
    os.replace(buf, out)
    doc = cfg.resolved()
    doc["scenario"] = spec.to_dict()
    doc["params_true"] = params.to_dict()
    inputs = [args.scenario] + ([args.params] if args.params else [])
    inputs += [args.config] if args.config else []
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "gen-demo",
        hashlib.sha256(_canonical(doc).encode()).hexdigest(),
        inputs,
        seed,
        time.perf_counter() - start,
        {"outputs": [out.name]},
    )
    print(f"wrote {out} ({len(demo)} samples, seed {seed})")
    return EXIT_OK


def _trajectory_rows(demo, sim):
    u = np.append(sim.inputs, np.nan)
    for t in range(len(demo)):
        yield [demo.t[t], *sim.states[t], u[t]]


def cmd_tune(args):
    start = time.perf_counter()
    cfg = load_config(args.config)
    method = args.method
    tune_cfg = dataclasses.replace(cfg.tune, method=method)
    if args.threads is not None:
        tune_cfg.workers = args.threads
    tune_cfg.workers = resolve_workers(tune_cfg.workers)
    out = _ensure_dir(args.out)
    demo = prepare_demo(args.demo, cfg.planner)
    p0 = cfg.initial_params
    trace = tune(demo, p0, tune_cfg, cfg.planner, cfg.weights)

    header = ["k", *PARAM_NAMES, "J"]
    write_csv(out / "trace.csv", header, ([e.k, *e.params, e.cost] for e in trace.iterations))
    final = trace.final_params
    write_json(
        out / "final_params.json",
        {"method": method, "params": final.to_dict(), "termination": trace.termination},
    )

    status = EXIT_OK if trace.termination != "numerical-failure" else EXIT_NUMERICAL
    label = METHOD_LABELS[method]
    try:
        sim0 = simulate(demo, p0, cfg.planner)
        sim1 = simulate(demo, final, cfg.planner)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        sim0 = sim1 = None
        status = EXIT_NUMERICAL
    if sim0 is not None:
        rep0 = deviation_report(sim0, demo, cfg.weights)
        rep1 = deviation_report(sim1, demo, cfg.weights)
        report = {
            "method": method,
            "columns": list(REPORT_COLUMNS),
            "rows": [
                {"label": "init", **rep0.to_dict()},
                {"label": label, **rep1.to_dict()},
            ],
            "params": [
                {"label": "p0", **p0.to_dict()},
                {"label": f"p:{label}", **final.to_dict()},
            ],
            "termination": trace.termination,
            "message": trace.message,
            "iterations": len(trace.iterations),
        }
        if "residual_covariance" in trace.extras:
            report["residual_covariance"] = trace.extras["residual_covariance"]
        if "param_covariance" in trace.extras:
            report["param_covariance"] = trace.extras["param_covariance"]
        write_json(out / "report.json", report)
        text = aligned_table(("", *PARAM_NAMES), params_rows([("p0", p0), (f"p:{label}", final)]))
        text += "\n" + aligned_table(REPORT_HEADERS, report_rows([("init", rep0), (label, rep1)]))
        atomic_write(out / "report.txt", text)
        for name, col in (("d", 0), ("kappa", 2)):
            rows = zip(demo.t, demo.y_d[:, col], sim0.states[:, col], sim1.states[:, col])
            write_csv(out / f"plot_{name}.csv", ["t", "demo", "init", "tuned"], rows)
        print(text, end="")

    write_manifest(
        out / "manifest.json",
        "tune",
        hashlib.sha256(_canonical(cfg.resolved() | {"method": method}).encode()).hexdigest(),
        [args.demo] + ([args.config] if args.config else []),
        None,
        time.perf_counter() - start,
        {
            "method": method,
            "workers": tune_cfg.workers,
            "termination": trace.termination,
            "tuner_wall_time": trace.wall_time,
        },
    )
    if trace.termination == "numerical-failure":
        print(f"error: tuning stopped: {trace.message}", file=sys.stderr)
    return status


def cmd_simulate(args):
    start = time.perf_counter()
    cfg = load_config(args.config)
    params = load_params(args.params, cfg.bounds)
    out = _ensure_dir(args.out)
    demo = prepare_demo(args.demo, cfg.planner)
    sim = simulate(demo, params, cfg.planner)
    header = ["t", "d", "theta", "kappa", "kappa_dot", "u"]
    write_csv(out / "trajectory.csv", header, _trajectory_rows(demo, sim))
    rep = deviation_report(sim, demo, cfg.weights)
    write_json(
        out / "report.json",
        {"params": params.to_dict(), "relax_count": sim.relax_count, **rep.to_dict()},
    )
    text = aligned_table(REPORT_HEADERS, report_rows([("sim", rep)]))
    atomic_write(out / "report.txt", text)
    write_manifest(
        out / "manifest.json",
        "simulate",
        hashlib.sha256(_canonical(cfg.resolved()).encode()).hexdigest(),
        [args.demo, args.params] + ([args.config] if args.config else []),
        None,
        time.perf_counter() - start,
    )
    print(text, end="")
    return EXIT_OK


def cmd_grad_check(args):
    cfg = load_config(args.config)
    h = cfg.tune.fd_step if args.fd_step is None else args.fd_step
    if not (h > 0):
        raise InvalidConfigError(f"fd_step must be positive, got {h!r}")
    if h < MIN_FD_STEP:
        print(
            f"warning: fd_step={h:g} is below {MIN_FD_STEP:g}; central differences "
            "are dominated by floating-point cancellation at this step",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    params = load_params(args.params, cfg.bounds)
    demo = prepare_demo(args.demo, cfg.planner)
    cost = ClosedLoopCost(demo, cfg.planner, cfg.weights)
    g1, g2, rel = richardson_check(cost, cost.space.to_tilde(params), h)
    rows = [[name, a, b, r] for name, a, b, r in zip(PARAM_NAMES, g1, g2, rel)]
    print(aligned_table(("param", f"g(h={h:g})", f"g(h/2)", "rel.diff"), rows), end="")
    worst = float(np.max(rel))
    if worst > RICHARDSON_TOL:
        print(f"fail: relative disagreement {worst:.3g} > {RICHARDSON_TOL:g}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"ok: max relative disagreement {worst:.3g}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="demotune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"demotune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-demo", help="synthesize a demonstration CSV")
    p.add_argument("--scenario", required=True, help="scenario JSON")
    p.add_argument("--params", help="true planner weights JSON (default: built-in p0)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, help="noise seed (drawn and recorded if omitted)")
    p.add_argument("--config", help="config JSON (planner and bounds)")
    p.set_defaults(func=cmd_gen_demo)

    p = sub.add_parser("tune", help="tune planner weights against a demonstration")
    p.add_argument("--demo", required=True)
    p.add_argument("--method", required=True, choices=("gd", "ukf", "ml"))
    p.add_argument("--config", help="config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, help=f"worker processes ({THREADS_ENV} overrides)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("simulate", help="closed-loop resimulation with given weights")
    p.add_argument("--demo", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("grad-check", help="Richardson check of the numerical gradient")
    p.add_argument("--demo", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--fd-step", type=float, help="finite-difference step (default from config)")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, ArithmeticError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DemoTuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
