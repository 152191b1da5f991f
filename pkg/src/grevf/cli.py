"""Experiment harness: config parsing, data I/O, dispatch by mode, reports.

Config files are INI documents::

    [experiment]
    mode = equivalence          ; exact | variational-closed | variational-opt
                                ; nystrom | equivalence | elbo-trace
    data = data.csv
    noise_variance = 0.1
    reg = 0.005                 ; nystrom only
    output = report.json
    predictions = preds.csv     ; optional

    [kernel]
    family = se
    lengthscale = 1.0
    variance = 1.0

    [domain]
    lower = 0
    upper = 5
    nodes = 128

    [features]
    family = dirac              ; dirac | bump | eigen | custom-table
    count = 6
    locations = 0.5, 1.5        ; dirac (optional)
    centers = 1, 2              ; bump (optional)
    width = 0.2                 ; bump
    tables = g1.csv, g2.csv     ; custom-table, each with header x,g

    [optimizer]
    step = 0.01
    iters = 2000
    batch = 5
    seed = 0
    tol = 1e-4

    [grid]
    lower = 0
    upper = 5
    count = 50                  ; or: points = 0.1, 0.2
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import DomainError, GrevfError
from .exact import Dataset, fit_exact, log_marginal_from, predict_exact_points
from .features import (
    Dirac,
    FeatureSet,
    make_bump_interdomain,
    make_eigen_features,
    tabulated_interdomain,
)
from .kernels import Kernel
from .numerics import gauss_legendre_rule
from .nystrom import equivalence_gap, krr_nystrom_fit, krr_predict
from .variational import (
    OptimizerConfig,
    elbo,
    optimal_predict,
    optimal_state,
    optimize_elbo,
    q_moments,
)

log = logging.getLogger("grevf")

MODES = ("exact", "variational-closed", "variational-opt", "nystrom", "equivalence", "elbo-trace")
FEATURE_FAMILIES = ("dirac", "bump", "eigen", "custom-table")
DEFAULT_NODES = 128
NODES_ENV = "GREVF_DEFAULT_NODES"

EXIT_CODES = {"config": 2, "parse": 3, "io": 3, "domain": 4}


class ExperimentError(GrevfError):
    """Failure attributed to a module and, when known, the config field behind it."""

    def __init__(self, category: str, module: str, field_: Optional[str], message: str):
        super().__init__(message)
        self.category = category
        self.module = module
        self.field = field_

    def one_line(self) -> str:
        where = self.module + (f" [{self.field}]" if self.field else "")
        msg = " ".join(str(self).split())
        return f"error category={self.category} module={where}: {msg}"


class ConfigError(ExperimentError):
    def __init__(self, field_: str, message: str):
        super().__init__("config", "cli", field_, message)


class DataError(ExperimentError):
    def __init__(self, message: str, line: Optional[int] = None, field_: str = "experiment.data"):
        super().__init__("parse", "cli", field_, message)
        self.line = line


# --------------------------------------------------------------------------
# data I/O
# --------------------------------------------------------------------------


def _read_table(path, value_columns: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Read ``x`` and the first available column of ``value_columns``."""
    try:
        text = Path(path).read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise ExperimentError("io", "cli", None, f"cannot read {path}: {exc.strerror}") from exc
    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows or not rows[0]:
        raise DataError(f"{path}: missing header")
    header = [h.strip().lower() for h in rows[0]]
    if header[0] != "x":
        raise DataError(f"{path}: header must start with 'x', got {rows[0][0]!r}", 1)
    try:
        col = next(header.index(c) for c in value_columns if c in header)
    except StopIteration:
        raise DataError(f"{path}: header needs one of {', '.join(value_columns)}", 1) from None
    xs, vs = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            x, v = float(row[0]), float(row[col])
        except (ValueError, IndexError):
            raise DataError(f"{path}: malformed row at line {lineno}: {','.join(row)!r}", lineno) from None
        if not (math.isfinite(x) and math.isfinite(v)):
            raise DataError(f"{path}: non-finite value at line {lineno}", lineno)
        xs.append(x)
        vs.append(v)
    if not xs:
        raise DataError(f"{path}: no observations")
    return np.array(xs), np.array(vs)


def load_dataset(path, noise_variance: float, domain=None) -> Dataset:
    """Read a CSV with header ``x,y``; prediction files (``x,mean,...``) are accepted too."""
    X, y = _read_table(path, ("y", "mean"))
    if domain is not None:
        outside = X[(X < domain[0]) | (X > domain[1])]
        if outside.size:
            shown = ", ".join(f"{v:g}" for v in outside)
            raise DomainError(f"{path}: x outside [{domain[0]:g}, {domain[1]:g}]: {shown}")
    return Dataset(X, y, noise_variance, tuple(domain) if domain is not None else None)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def predictions_csv(rows: list[dict]) -> str:
    with_method = len({r["method"] for r in rows}) > 1
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "mean", "variance"] + (["method"] if with_method else []))
    for r in rows:
        var = "" if r["variance"] is None else repr(r["variance"])
        writer.writerow([repr(r["x"]), repr(r["mean"]), var] + ([r["method"]] if with_method else []))
    return buf.getvalue()


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


def default_nodes() -> int:
    raw = os.environ.get(NODES_ENV)
    if raw is None:
        return DEFAULT_NODES
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(NODES_ENV, f"environment variable must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(NODES_ENV, "environment variable must be positive")
    return value


@dataclass
class FeatureSpec:
    family: str = "dirac"
    count: int = 0
    locations: Optional[list] = None
    centers: Optional[list] = None
    width: Optional[float] = None
    tables: Optional[list] = None


@dataclass
class ExperimentConfig:
    mode: str
    data: str
    noise_variance: float
    kernel: dict
    domain: tuple
    nodes: int
    features: Optional[FeatureSpec]
    grid: list
    output: str
    predictions: Optional[str] = None
    reg: Optional[float] = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def echo(self) -> dict:
        d = asdict(self)
        d["domain"] = list(self.domain)
        return d


def _floats(section, key, name) -> Optional[list]:
    raw = section.get(key)
    if raw is None or not raw.strip():
        return None
    try:
        return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name}.{key}", f"expected comma-separated numbers, got {raw!r}") from None


def _get(parser, sect, key, conv, default=None, required=False):
    name = f"{sect}.{key}"
    if not parser.has_section(sect) or parser.get(sect, key, fallback=None) in (None, ""):
        if required:
            raise ConfigError(name, "required field missing")
        return default
    raw = parser.get(sect, key)
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(name, f"invalid value {raw!r}") from None


def parse_config(path, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ExperimentError("io", "cli", None, f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from exc
    base = path.parent

    def resolve(p):
        return str(p if Path(p).is_absolute() else base / p)

    mode = _get(parser, "experiment", "mode", str, required=True).strip().lower()
    if mode not in MODES:
        raise ConfigError("experiment.mode", f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    data = resolve(_get(parser, "experiment", "data", str, required=True).strip())
    noise = _get(parser, "experiment", "noise_variance", float, required=True)
    if not noise > 0:
        raise ConfigError("experiment.noise_variance", "must be positive")
    reg = _get(parser, "experiment", "reg", float, required=(mode == "nystrom"))
    if reg is not None and not reg > 0:
        raise ConfigError("experiment.reg", "must be positive")

    kernel = {
        "family": _get(parser, "kernel", "family", str, "se").strip(),
        "lengthscale": _get(parser, "kernel", "lengthscale", float, 1.0),
        "variance": _get(parser, "kernel", "variance", float, 1.0),
    }
    try:
        Kernel(**kernel)
    except ValueError as exc:
        raise ConfigError("kernel", str(exc)) from None

    a = _get(parser, "domain", "lower", float, required=True)
    b = _get(parser, "domain", "upper", float, required=True)
    if not a < b:
        raise ConfigError("domain", f"need lower < upper, got [{a}, {b}]")
    nodes = _get(parser, "domain", "nodes", int, None)
    nodes = default_nodes() if nodes is None else nodes
    if nodes < 1:
        raise ConfigError("domain.nodes", "must be positive")

    features = None
    if mode != "exact":
        if not parser.has_section("features"):
            raise ConfigError("features", f"mode {mode} needs a [features] section")
        sec = parser["features"]
        fam = sec.get("family", "dirac").strip().lower()
        if fam not in FEATURE_FAMILIES:
            raise ConfigError("features.family", f"unknown family {fam!r}; choose from {', '.join(FEATURE_FAMILIES)}")
        spec = FeatureSpec(
            family=fam,
            count=_get(parser, "features", "count", int, 0),
            locations=_floats(sec, "locations", "features"),
            centers=_floats(sec, "centers", "features"),
            width=_get(parser, "features", "width", float, None),
        )
        if sec.get("tables"):
            spec.tables = [resolve(t.strip()) for t in sec["tables"].split(",") if t.strip()]
        explicit = spec.locations if fam == "dirac" else spec.centers if fam == "bump" else spec.tables
        if explicit is not None:
            if spec.count and spec.count != len(explicit):
                raise ConfigError("features.count", f"count {spec.count} disagrees with {len(explicit)} listed entries")
            spec.count = len(explicit)
        if spec.count < 1:
            raise ConfigError("features.count", "need at least one feature")
        if fam == "bump" and not (spec.width and spec.width > 0):
            raise ConfigError("features.width", "bump features need a positive width")
        if fam == "custom-table" and not spec.tables:
            raise ConfigError("features.tables", "custom-table features need table paths")
        features = spec

    opt = OptimizerConfig(
        step=_get(parser, "optimizer", "step", float, 0.01),
        iters=_get(parser, "optimizer", "iters", int, 2000),
        batch_size=_get(parser, "optimizer", "batch", int, None),
        seed=_get(parser, "optimizer", "seed", int, 0),
        tol=_get(parser, "optimizer", "tol", float, 1e-4),
    )
    if seed is not None:
        opt.seed = int(seed)
    if opt.batch_size is not None and opt.batch_size < 1:
        raise ConfigError("optimizer.batch", "must be positive")

    if parser.has_section("grid") and parser["grid"].get("points"):
        grid = _floats(parser["grid"], "points", "grid")
    else:
        ga = _get(parser, "grid", "lower", float, a)
        gb = _get(parser, "grid", "upper", float, b)
        count = _get(parser, "grid", "count", int, 50)
        if count < 1:
            raise ConfigError("grid.count", "must be positive")
        grid = list(np.linspace(ga, gb, count))
    outside = [g for g in grid if g < a or g > b]
    if outside:
        raise ConfigError("grid", f"grid points outside domain: {', '.join(f'{g:g}' for g in outside[:5])}")

    output = out or _get(parser, "experiment", "output", str, None)
    output = resolve(output) if output else str(base / f"{path.stem}.report.json")
    predictions = _get(parser, "experiment", "predictions", str, None)
    predictions = resolve(predictions) if predictions else str(Path(output).with_suffix(".predictions.csv"))

    return ExperimentConfig(
        mode=mode,
        data=data,
        noise_variance=noise,
        kernel=kernel,
        domain=(a, b),
        nodes=nodes,
        features=features,
        grid=[float(g) for g in grid],
        output=output,
        predictions=predictions,
        reg=reg,
        optimizer=opt,
    )


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------


@contextlib.contextmanager
def _stage(module: str, field_: Optional[str] = None):
    try:
        yield
    except ExperimentError:
        raise
    except GrevfError as exc:
        raise ExperimentError(exc.category, module, field_, str(exc)) from exc
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        raise ExperimentError("numeric" if isinstance(exc, ArithmeticError) else "value", module, field_, str(exc)) from exc


def build_features(cfg: ExperimentConfig, kernel: Kernel) -> FeatureSet:
    spec = cfg.features
    a, b = cfg.domain
    rule = gauss_legendre_rule(cfg.domain, cfg.nodes)
    if spec.family == "dirac":
        locs = spec.locations if spec.locations is not None else np.linspace(a, b, spec.count)
        return FeatureSet([Dirac(z) for z in locs], kernel, rule)
    if spec.family == "bump":
        h = spec.width
        centers = spec.centers if spec.centers is not None else np.linspace(a + h, b - h, spec.count)
        return FeatureSet([make_bump_interdomain(c, h, cfg.domain) for c in centers], kernel, rule)
    if spec.family == "eigen":
        return make_eigen_features(kernel, rule, spec.count)
    elements = []
    for path in spec.tables:
        xs, gs = _read_table(path, ("g",))
        elements.append(tabulated_interdomain(xs, gs, label=Path(path).stem))
    return FeatureSet(elements, kernel, rule)


def _rows(grid, mean, var, method) -> list[dict]:
    return [
        {"x": float(x), "mean": float(m), "variance": None if var is None else float(v), "method": method}
        for x, m, v in zip(grid, mean, var if var is not None else [None] * len(grid))
    ]


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> dict:
    """Execute ``cfg`` and return the report; writes report and predictions atomically."""
    t0 = time.perf_counter()
    with _stage("cli", "experiment.data"):
        ds = load_dataset(cfg.data, cfg.noise_variance, cfg.domain)
    with _stage("kernels", "kernel"):
        kernel = Kernel(**cfg.kernel)
    grid = np.asarray(cfg.grid)
    gpoints = [Dirac(x) for x in grid]
    results: dict = {"N": ds.N}
    rows: list[dict] = []
    trace: list = []
    timing: dict = {}

    fs = None
    if cfg.features is not None:
        with _stage("features", "features"):
            fs = build_features(cfg, kernel)
        results["M"] = fs.M

    need_exact = cfg.mode in ("exact", "variational-closed", "variational-opt", "equivalence", "elbo-trace")
    if need_exact:
        t = time.perf_counter()
        with _stage("exact_gre", "experiment.noise_variance"):
            post = fit_exact(ds, kernel)
            results["log_marginal"] = log_marginal_from(post)
            if cfg.mode in ("exact", "equivalence"):
                m_ex, v_ex = predict_exact_points(post, grid)
                rows += _rows(grid, m_ex, v_ex, "exact")
        timing["exact_seconds"] = time.perf_counter() - t

    if cfg.mode in ("variational-closed", "equivalence"):
        t = time.perf_counter()
        with _stage("variational", "features"):
            state = optimal_state(fs, ds)
            results["elbo"] = elbo(state, ds)
            results["kl_to_posterior"] = results["log_marginal"] - results["elbo"]
            m_var, c_var = optimal_predict(fs, ds, gpoints)
            rows += _rows(grid, m_var, np.diag(c_var), "variational")
        timing["variational_seconds"] = time.perf_counter() - t

    if cfg.mode in ("variational-opt", "elbo-trace"):
        t = time.perf_counter()
        with _stage("variational", "optimizer"):
            res = optimize_elbo(fs, ds, cfg.optimizer)
            results["elbo"] = elbo(res.state, ds)
            results["kl_to_posterior"] = results["log_marginal"] - results["elbo"]
            results["iterations"] = res.iterations
            trace = [{"iteration": int(i), "elbo": float(v)} for i, v in res.trace]
            if cfg.mode == "elbo-trace":
                results["elbo_optimal"] = elbo(optimal_state(fs, ds), ds)
                results["elbo_gap"] = results["elbo_optimal"] - results["elbo"]
            m_q, c_q = q_moments(res.state, gpoints)
            rows += _rows(grid, m_q, np.diag(c_q), "variational-opt")
        timing["optimizer_seconds"] = time.perf_counter() - t

    if cfg.mode in ("nystrom", "equivalence"):
        t = time.perf_counter()
        reg = cfg.reg if cfg.mode == "nystrom" else ds.noise_variance / ds.N
        with _stage("nystrom", "experiment.reg" if cfg.mode == "nystrom" else "features"):
            model = krr_nystrom_fit(fs, ds, reg)
            results["reg"] = reg
            results["krr_objective"] = model.objective
            rows += _rows(grid, krr_predict(model, grid), None, "nystrom")
            if cfg.mode == "equivalence":
                results["equivalence_gap"] = equivalence_gap(fs, ds, grid)
                results["variational_exact_mean_gap"] = float(np.max(np.abs(m_var - m_ex)))
                results["variational_exact_variance_gap"] = float(np.max(np.abs(np.diag(c_var) - v_ex)))
        timing["nystrom_seconds"] = time.perf_counter() - t

    timing["total_seconds"] = time.perf_counter() - t0
    for key, value in results.items():
        if not math.isfinite(value):
            raise ExperimentError("numeric", "cli", None, f"result {key} is not finite ({value})")

    report = {
        "version": __version__,
        "config": cfg.echo(),
        "results": results,
        "summary": {k: f"{v:.6g}" for k, v in results.items()},
        "predictions": rows,
        "trace": trace,
        "timing": timing,
    }
    if write:
        with _stage("cli", "experiment.output"):
            try:
                _atomic_write(Path(cfg.predictions), predictions_csv(rows))
                _atomic_write(Path(cfg.output), json.dumps(report, indent=2) + "\n")
            except OSError as exc:
                raise ExperimentError("io", "cli", "experiment.output", f"cannot write report: {exc}") from exc
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="grevf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"grevf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fit = sub.add_parser("fit", help="run the experiment described by a config file")
    fit.add_argument("config")
    fit.add_argument("--out", help="report path (overrides experiment.output)")
    fit.add_argument("--seed", type=int, help="optimizer seed (overrides optimizer.seed)")
    fit.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.seed is not None and args.seed < 0:
        print("error category=config module=cli [--seed]: seed must be non-negative", file=sys.stderr)
        return EXIT_CODES["config"]
    try:
        cfg = parse_config(args.config, seed=args.seed, out=args.out)
        report = run_experiment(cfg)
    except ExperimentError as exc:
        print(exc.one_line(), file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except GrevfError as exc:
        print(f"error category={exc.category} module=cli: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    log.info("wrote %s", cfg.output)
    if args.verbose:
        for k, v in report["summary"].items():
            print(f"{k} = {v}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
