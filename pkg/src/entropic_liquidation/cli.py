"""Command-line front end: ``coeffs``, ``schedule``, ``simulate`` and ``verify``.

Configuration files are flat ``key = value`` text with ``#`` comments. Keys are
the model parameter names plus the run settings in :data:`RUN_KEYS`; risk
aversion is given as a list ``rho = 0.1, 0.5`` of ``kappa * lambda2`` values, or
as an absolute ``lambda2`` instead.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, closed_form, dynamics, risk, verify
from .errors import ConfigError, DegenerateRegime, InadmissibleParams
from .params import ModelParams, illustration_params, validate

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

PARAM_KEYS = tuple(f.name for f in dataclasses.fields(ModelParams) if f.name != "lambda2")
RUN_KEYS = (
    "rho", "lambda2", "time_points", "x_points", "paths", "steps", "seed", "workers",
    "out", "formats", "keep_paths", "level",
)

COEFF_COLUMNS = ("rho", "t", "a", "b", "c", "a_minus_gamma", "ell", "minus_a")
SCHEDULE_COLUMNS = ("rho", "t", "t_scaled", "schedule")


@dataclass(frozen=True)
class ExperimentConfig:
    base: ModelParams
    rhos: tuple[float, ...] = (0.1, 0.5, 0.9)
    lambda2: Optional[float] = None
    time_points: int = 501
    x_points: int = 200
    paths: int = 10_000
    steps: int = 4096
    seed: int = dynamics.DEFAULT_SEED
    workers: int = 1
    out: str = "out"
    formats: tuple[str, ...] = ("csv", "json")
    keep_paths: int = 4
    level: float = risk.DEFAULT_LEVEL

    def param_sets(self) -> list[tuple[float, ModelParams]]:
        """(rho, params) for every requested risk aversion, validated.

        The relaxed checks apply so that noiseless (sigma = 0) or frictionless
        (eta = 0) runs can be configured; beta > gamma/2 and lambda2 < 1/kappa
        are always enforced.
        """
        if self.lambda2 is not None:
            p = validate(self.base.replace(lambda2=self.lambda2), strict=False)
            return [(p.rho, p)]
        out = []
        for r in self.rhos:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"rho must lie in [0, 1), got {r!r}")
            out.append((r, validate(self.base.with_rho(r), strict=False)))
        return out

    def echo(self) -> dict:
        d = {k: getattr(self, k) for k in RUN_KEYS if k != "rho"}
        d["rho"] = list(self.rhos)
        d["formats"] = list(self.formats)
        d["params"] = self.base.to_dict()
        return d


def _number(key: str, text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{key}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: must be finite")
    return v


def _integer(key: str, text: str, minimum: int = 0) -> int:
    v = _number(key, text)
    if v != int(v) or v < minimum:
        raise ConfigError(f"{key}: expected an integer >= {minimum}, got {text!r}")
    return int(v)


def parse_config(text: str) -> ExperimentConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in PARAM_KEYS and key not in RUN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value

    if "rho" in raw and "lambda2" in raw:
        raise ConfigError("give either rho or lambda2, not both")
    base = illustration_params().replace(**{k: _number(k, raw[k]) for k in PARAM_KEYS if k in raw})
    kw: dict = {}
    if "rho" in raw:
        kw["rhos"] = tuple(_number("rho", s) for s in raw["rho"].split(",") if s.strip())
        if not kw["rhos"]:
            raise ConfigError("rho: empty list")
    if "lambda2" in raw:
        kw["lambda2"] = _number("lambda2", raw["lambda2"])
    for key, minimum in (("time_points", 1), ("x_points", 2), ("paths", 1), ("steps", 2), ("seed", 0),
                         ("workers", 1), ("keep_paths", 0)):
        if key in raw:
            kw[key] = _integer(key, raw[key], minimum)
    if "out" in raw:
        kw["out"] = raw["out"]
    if "formats" in raw:
        fmts = tuple(s.strip() for s in raw["formats"].split(",") if s.strip())
        if not fmts or any(f not in ("csv", "json") for f in fmts):
            raise ConfigError("formats: allowed values are csv, json")
        kw["formats"] = fmts
    if "level" in raw:
        kw["level"] = _number("level", raw["level"])
        if not 0.0 < kw["level"] < 1.0:
            raise ConfigError("level must lie in (0, 1)")
    cfg = ExperimentConfig(base=base, **kw)
    cfg.param_sets()
    return cfg


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig(base=illustration_params())
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    workers: int
    version: str = __version__
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def add(self, path: Path) -> None:
        self.outputs[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def write(self, out: Path) -> Path:
        target = out / "manifest.json"
        target.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return target


def _fmt(x: float) -> str:
    return "%.17g" % x


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(float(v)) for v in row) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(verify._jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _time_grid(p: ModelParams, points: int) -> np.ndarray:
    if points == 1:
        return np.array([p.T])
    t = np.linspace(0.0, p.T, points)
    t[-1] = p.T
    return t


# ---------------------------------------------------------------------------
# commands


def cmd_coeffs(cfg: ExperimentConfig, out: Path, manifest: RunManifest) -> int:
    rows = []
    for rho, p in cfg.param_sets():
        t = _time_grid(p, cfg.time_points)
        g = closed_form.coefficient_grid(p, t)
        for k in range(len(t)):
            rows.append((rho, t[k], g.a[k], g.b[k], g.c[k], g.a_minus_gamma[k], g.ell[k], -g.a[k]))
    path = out / "coeffs.csv"
    _write_csv(path, COEFF_COLUMNS, rows)
    manifest.add(path)
    if "json" in cfg.formats:
        jpath = out / "coeffs.json"
        _write_json(jpath, [dict(zip(COEFF_COLUMNS, r)) for r in rows])
        manifest.add(jpath)
    return EXIT_OK


def normalized_schedule(p: ModelParams, points: int) -> tuple[np.ndarray, np.ndarray]:
    """(t, ell(T - t) / ell(T)): the target position scaled to start at 1.

    For long horizons ell(T) is the early-stage level, so this matches a
    normalization of the early-stage position to 1.
    """
    if p.rho > 0 and p.gamma * p.m == 0.0:
        raise DegenerateRegime("schedule normalization needs gamma * m > 0 when rho > 0")
    t = _time_grid(p, max(points, 2))
    ell = closed_form.coefficient_grid(p, t).ell
    if not ell[0] > 0:
        raise DegenerateRegime("schedule normalization undefined: ell(T) = 0")
    sched = ell / ell[0]
    sched[0] = 1.0
    return t, sched


def cmd_schedule(cfg: ExperimentConfig, out: Path, manifest: RunManifest) -> int:
    sets = cfg.param_sets()
    omega_ref = max(p.derived.rate_arg for _, p in sets)
    scale = omega_ref if omega_ref > 0 else 1.0 / cfg.base.T
    rows = []
    for rho, p in sets:
        t, sched = normalized_schedule(p, cfg.time_points)
        rows.extend((rho, t[k], t[k] * scale, sched[k]) for k in range(len(t)))
    path = out / "schedule.csv"
    _write_csv(path, SCHEDULE_COLUMNS, rows)
    manifest.add(path)
    return EXIT_OK


def _summary_stats(x: np.ndarray) -> dict:
    n = x.size
    return {"mean": float(np.mean(x)), "stderr": float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else 0.0}


def cmd_simulate(cfg: ExperimentConfig, out: Path, manifest: RunManifest) -> int:
    summary = {}
    for k, (rho, p) in enumerate(cfg.param_sets()):
        deterministic = p.m == 0.0 and p.sigma == 0.0
        paths = 1 if deterministic else cfg.paths
        keep = range(min(cfg.keep_paths, paths))
        b = dynamics.simulate_batch(p, None, cfg.steps, cfg.seed, paths, closed_loop=True, workers=cfg.workers, keep=keep)
        est = risk.objective_from_costs(p, b.cost, cfg.level)
        w = closed_form.value_function(p, 0.0, p.x0)
        path = out / f"paths_{k}.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            dynamics.write_paths_csv(fh, b.kept)
        manifest.add(path)
        summary[_rho_key(rho)] = {
            "rho": rho,
            "paths": paths,
            "steps": cfg.steps,
            "X_T": _summary_stats(b.X_T),
            "Pi0_T": _summary_stats(b.Pi_closed),
            "eps_T": _summary_stats(b.eps_T),
            "eps_T_max_abs": float(np.max(np.abs(b.eps_T))),
            "J": est.to_dict(),
            "w": w,
            "J_within_halfwidth": abs(est.estimate - w) <= est.halfwidth,
            "paths_file": path.name,
        }
    spath = out / "summary.json"
    _write_json(spath, summary)
    manifest.add(spath)
    return EXIT_OK


def _rho_key(rho: float) -> str:
    return f"rho={rho:g}"


def cmd_verify(cfg: ExperimentConfig, out: Path, manifest: RunManifest) -> int:
    sets = cfg.param_sets()
    rhos = [r for r, _ in sets]

    def progress(res):
        print(res.line(), flush=True)

    results = verify.run_all(cfg.base, rhos, seed=cfg.seed, workers=cfg.workers, progress=progress)
    report = {
        "passed": all(r.passed for r in results),
        "boundary": verify._boundary(rhos),
        "checks": [r.to_dict() for r in results],
    }
    path = out / "verify.json"
    _write_json(path, report)
    manifest.add(path)
    return EXIT_OK if report["passed"] else EXIT_FAIL


COMMANDS = {"coeffs": cmd_coeffs, "schedule": cmd_schedule, "simulate": cmd_simulate, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="entropic-liquidation", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--paths", type=int)
        sp.add_argument("--steps", type=int)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        overrides = {k: getattr(args, k) for k in ("out", "seed", "workers", "paths", "steps") if getattr(args, k) is not None}
        for k in ("seed", "workers", "paths", "steps"):
            if k in overrides and overrides[k] < (0 if k == "seed" else 1):
                raise ConfigError(f"--{k} out of range")
        cfg = dataclasses.replace(cfg, **overrides)
    except (ConfigError, InadmissibleParams) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out)
    manifest = RunManifest(command=args.command, config=cfg.echo(), seed=cfg.seed, workers=cfg.workers)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, out, manifest)
    except (ConfigError, InadmissibleParams) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, DegenerateRegime, OSError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.timings[args.command] = round(time.perf_counter() - t0, 3)
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
