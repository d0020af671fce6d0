"""Command line: ``superou {oracle,simulate,verify,crosscheck}``.

Exit codes: 0 pass, 2 statistical fail, 3 insufficient data, 4 invalid
config, 5 population cap exceeded.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .branching import BranchingMechanism, DiscretizationError, derive, discretize, validate
from .engine import DEFAULT_CAP, PopulationCapError
from .harness import (
    ENGINES,
    ConditioningError,
    ExperimentSpec,
    InsufficientDataError,
    RegimeMismatchError,
    crosscheck,
    run_ensemble,
    verify,
)
from .moments import (
    AtomicMeasure,
    Law,
    Regime,
    extinction_probability,
    limit_constants,
    mean_functional,
    variance_measure,
)
from .spectral import OUParams, SpectralFunction, _num_to_json, parse_real

EXIT_PASS, EXIT_FAIL, EXIT_INSUFFICIENT, EXIT_CONFIG, EXIT_CAP = 0, 2, 3, 4, 5
THEOREM_FLAGS = {"t13": "T1.3", "t14": "T1.4", "t15": "T1.5", "t21": "T2.1", "t23": "T2.3"}


class ConfigError(ValueError):
    pass


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    params: OUParams
    mechanism: BranchingMechanism
    mu: AtomicMeasure
    f: SpectralFunction
    eps: float
    t_grid: tuple
    replicates: int
    seed: int
    engine: str
    t_eval: float
    delta: float
    regime: Regime | None
    cap: int
    config_hash: str
    raw: dict

    def experiment(self, seed: int | None = None, replicates: int | None = None) -> ExperimentSpec:
        return ExperimentSpec(self.mechanism, self.params, self.mu, self.f, self.eps, self.t_eval,
                              self.delta, self.replicates if replicates is None else replicates,
                              self.seed if seed is None else seed, self.engine, self.t_grid,
                              self.regime, self.cap)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def _field(raw: dict, key: str, kind=None):
    if key not in raw:
        raise ConfigError(f"missing required key '{key}'")
    value = raw[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"'{key}' must be of type {kind.__name__ if isinstance(kind, type) else kind}")
    return value


def parse_config(raw: dict, engines=None) -> RunConfig:
    """Validate a config mapping; every problem is a :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    try:
        ou = _field(raw, "ou", dict)
        d = int(ou.get("d", 1))
        b = parse_real(_field(ou, "b"))
        sigma = float(ou.get("sigma", 1.0))
    except (TypeError, ValueError, ZeroDivisionError) as err:
        raise ConfigError(f"bad 'ou' block: {err}") from None
    if d < 1:
        raise ConfigError("ou.d must be at least 1")
    if not b > 0:
        raise ConfigError(f"OU mean reversion b > 0 fails: b={b}")
    if not sigma > 0:
        raise ConfigError(f"OU diffusion sigma > 0 fails: sigma={sigma}")
    params = OUParams(d, b, sigma)

    try:
        mech = BranchingMechanism.from_dict(_field(raw, "mechanism", dict), parse=parse_real)
    except (KeyError, TypeError, ValueError, ZeroDivisionError) as err:
        raise ConfigError(f"bad 'mechanism' block: {err}") from None
    problem = validate(mech)
    if problem is not None:
        raise ConfigError(problem)

    try:
        mu = AtomicMeasure.from_json(raw.get("mu", [{"x": [0.0] * d, "m": 1.0}]), d)
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"bad 'mu' block: {err}") from None
    if np.any(mu.masses < 0):
        raise ConfigError("mu masses must be nonnegative")

    try:
        f = SpectralFunction.from_json(raw.get("f", {"indices": [[0] * d], "coeffs": [1.0]}), params)
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"bad 'f' block: {err}") from None
    if any(len(p) != d for p in f.support):
        raise ConfigError("f multi-indices must have length ou.d")

    try:
        eps = float(_field(raw, "eps"))
        t_grid = tuple(float(t) for t in raw.get("t_grid", ()))
        replicates = int(raw.get("replicates", 100))
        seed = int(raw.get("seed", 0))
        t_eval = float(raw.get("t_eval", max(t_grid) if t_grid else 1.0))
        delta = float(raw.get("delta", 0.0))
        cap = int(raw.get("cap", DEFAULT_CAP))
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad numeric field: {err}") from None
    engine = raw.get("engine", "direct")
    if engine not in ENGINES:
        raise ConfigError(f"engine must be one of {ENGINES}, got {engine!r}")
    if any(t < 0 for t in t_grid) or any(u <= t for t, u in zip(t_grid, t_grid[1:])):
        raise ConfigError("t_grid must be increasing and nonnegative")
    if t_eval < 0 or delta < 0:
        raise ConfigError("t_eval and delta must be nonnegative")
    if replicates < 0:
        raise ConfigError("replicates must be nonnegative")
    if seed < 0 or seed >= 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    regime = raw.get("regime")
    if regime is not None:
        try:
            regime = Regime(regime)
        except ValueError:
            raise ConfigError(f"regime must be one of {[r.value for r in Regime]}") from None

    if not eps > 0:
        raise ConfigError("eps > 0 fails")
    dm = derive(mech)
    for eng in engines or (engine,):
        try:
            discretize(mech if eng == "direct" else dm.dual, eps)
        except DiscretizationError as err:
            raise ConfigError(f"eps={eps:g} exceeds the maximal admissible eps {err.max_eps:.6g} "
                              f"for the {eng} engine") from None
    return RunConfig(params, mech, mu, f, eps, t_grid, replicates, seed, engine, t_eval, delta, regime, cap,
                     config_hash(raw), raw)


def load_config(path, engines=None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    return parse_config(raw, engines)


def _nonfinite_path(obj, path="$"):
    if isinstance(obj, float) and not math.isfinite(obj):
        return path
    if isinstance(obj, dict):
        for k, v in obj.items():
            hit = _nonfinite_path(v, f"{path}.{k}")
            if hit:
                return hit
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            hit = _nonfinite_path(v, f"{path}[{i}]")
            if hit:
                return hit
    return None


def _plain(obj):
    """Convert numpy scalars and arrays to JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def render_report(report, fmt: str = "json") -> str:
    """Serialize a report: JSON with sorted keys, or CSV from {"columns", "rows", "meta"}."""
    report = _plain(report)
    bad = _nonfinite_path(report)
    if bad:
        raise ReportError(f"non-finite value at {bad}; refusing to serialize")
    if fmt == "json":
        return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        for k, v in sorted(report.get("meta", {}).items()):
            buf.write(f"# {k}={v}\n")
        buf.write(",".join(report["columns"]) + "\n")
        for row in report["rows"]:
            buf.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
        return buf.getvalue()
    raise ValueError("format must be 'json' or 'csv'")


def _write_atomic(files: dict):
    """Write all ``{path: text}`` to temporaries first, then move them into place."""
    staged = []
    try:
        for path, text in files.items():
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, path))
        for tmp, path in staged:
            os.replace(tmp, path)
    except OSError as err:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise ReportError(f"cannot write {err.filename}: {err.strerror}") from None


def emit_report(report, fmt: str, dest) -> None:
    """Write one report to ``dest`` (a path, or ``None``/``"-"`` for stdout)."""
    text = render_report(report, fmt)
    if dest is None or str(dest) == "-":
        sys.stdout.write(text)
    else:
        _write_atomic({dest: text})


def _meta(cfg: RunConfig, seed: int) -> dict:
    return {"config_hash": cfg.config_hash, "seed": seed, "version": __version__,
            "seed_scheme": "SeedSequence(entropy=seed, spawn_key=(replicate,))"}


def cmd_oracle(cfg: RunConfig, args) -> tuple[dict, int]:
    dm = derive(cfg.mechanism)
    times = list(cfg.t_grid) or [cfg.t_eval]
    moments = []
    for t in times:
        moments.append({"t": t, "mean": mean_functional(cfg.f, cfg.mu, t, dm, Law.X),
                        "variance": variance_measure(cfg.f, cfg.mu, t, dm, Law.X)})
    report = {"mechanism": cfg.mechanism.to_dict(), "lambda_star": dm.lambda_star, "alpha_star": dm.alpha_star,
              "A": dm.A, "A_star": dm.A_star, "extinction_probability": extinction_probability(cfg.mu, dm),
              "limit": limit_constants(cfg.f, dm, cfg.mechanism.alpha, cfg.params.b).to_dict(),
              "moments": moments, "b": _num_to_json(cfg.params.b), **_meta(cfg, args.seed)}
    return report, EXIT_PASS


def cmd_simulate(cfg: RunConfig, args):
    spec = cfg.experiment(args.seed, args.replicates)
    samples = run_ensemble(spec, args.threads)
    support = [list(p) for p in cfg.f.support]
    k = 1 + len(support)
    columns = ["replicate", "t", "total_mass", "n_particles"] + [f"functional_{i}" for i in range(1, k + 1)]
    meta = _meta(cfg, spec.seed)
    table = {"columns": columns, "rows": list(samples.rows()), "meta": meta}
    manifest = {**meta, "replicates": spec.replicates, "engine": spec.engine, "eps": spec.eps,
                "times": samples.times.tolist(), "config": cfg.raw,
                "functionals": {"functional_1": "<f, X_t>",
                                **{f"functional_{i + 2}": {"phi": p} for i, p in enumerate(support)}},
                "versions": {"artifact": __version__, "numpy": np.__version__, "python": sys.version.split()[0]}}
    out = Path(args.out or ".")
    _write_atomic({out / "samples.csv": render_report(table, "csv"),
                   out / "manifest.json": render_report(manifest, "json")})
    return None, EXIT_PASS


def cmd_verify(cfg: RunConfig, args):
    spec = cfg.experiment(args.seed, args.replicates)
    rep = verify(spec, THEOREM_FLAGS[args.theorem], args.threads)
    report = {**rep.to_dict(), **_meta(cfg, spec.seed)}
    return report, EXIT_PASS if rep.passed else EXIT_FAIL


def cmd_crosscheck(cfg: RunConfig, args):
    spec = cfg.experiment(args.seed, args.replicates)
    rep = crosscheck(spec, args.threads)
    report = {**rep.to_dict(), **_meta(cfg, spec.seed)}
    return report, EXIT_PASS if rep.passed else EXIT_FAIL


COMMANDS = {"oracle": cmd_oracle, "simulate": cmd_simulate, "verify": cmd_verify, "crosscheck": cmd_crosscheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superou", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--out", default=None,
                       help="output directory for simulate, report file otherwise (default stdout)")
        p.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
        if name != "oracle":
            p.add_argument("--replicates", type=int, default=None, help="overrides the config")
        if name == "verify":
            p.add_argument("--theorem", required=True, choices=sorted(THEOREM_FLAGS))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    engines = ENGINES if args.command == "crosscheck" else None
    try:
        cfg = load_config(args.config, engines)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is None:
        args.seed = cfg.seed
    if args.seed < 0 or args.seed >= 2 ** 64:
        print("config error: seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.command != "oracle":
        n = cfg.replicates if args.replicates is None else args.replicates
        if n < 1:
            print("insufficient data: the ensemble is empty", file=sys.stderr)
            return EXIT_INSUFFICIENT
    try:
        report, code = COMMANDS[args.command](cfg, args)
        if report is not None:
            emit_report(report, "json", args.out)
    except RegimeMismatchError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (InsufficientDataError, ConditioningError) as err:
        print(f"insufficient data: {err}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except PopulationCapError as err:
        print(f"resource cap: {err}", file=sys.stderr)
        return EXIT_CAP
    except ReportError as err:
        print(f"report error: {err}", file=sys.stderr)
        return EXIT_FAIL
    return code


if __name__ == "__main__":
    sys.exit(main())
