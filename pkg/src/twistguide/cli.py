"""Command-line front end.

Configuration is flat ``key = value`` text (``--config FILE``) overridden by
``--key value`` flags.  Reports are written as CSV or JSON with floats at 17
significant digits.  Per-point spectra and whole-command results are cached
under a content hash of the command, the canonical configuration and the
package version.

Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import enum
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("twistguide")

CACHE_FORMAT = 1
CACHE_ENV = "TWISTGUIDE_CACHE_DIR"


class ConfigError(ValueError):
    """Invalid or unknown configuration (exit code 2)."""


# ----------------------------------------------------------------------------
# serialisation


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _plain(obj):
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps(obj, indent: int = 0) -> str:
    """JSON with floats at 17 significant digits; non-finite floats become null."""
    obj = _plain(obj)
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return fmt_float(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(_plain(v), (int, float)) or v is None for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if v is None else fmt_float(v) if isinstance(v, float) else _plain(v)
                    for v in (_plain(x) for x in row)])
    return buf.getvalue()


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------------------
# cache


class Cache:
    """Content-addressed JSON payload store with atomic write-then-rename."""

    def __init__(self, root, enabled: bool = True):
        self.root = Path(root)
        self.enabled = enabled
        self.hits = 0
        self.lookups = 0

    @staticmethod
    def key(command: str, config: dict) -> str:
        blob = dumps({"command": command, "config": config, "version": __version__,
                      "format": CACHE_FORMAT})
        return hashlib.sha256(blob.encode()).hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str):
        if not self.enabled:
            return None
        self.lookups += 1
        try:
            entry = json.loads(self._path(key).read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return None
        if (not isinstance(entry, dict) or entry.get("format") != CACHE_FORMAT
                or entry.get("version") != __version__ or entry.get("key") != key):
            return None
        self.hits += 1
        return entry["payload"]

    def put(self, key: str, payload) -> None:
        if not self.enabled:
            return
        entry = {"format": CACHE_FORMAT, "version": __version__, "key": key,
                 "created_at": time.time(), "payload": payload}
        atomic_write(self._path(key), dumps(entry))

    def normalise(self, payload):
        """Payload as it reads back from the cache (bit-identical on re-emission)."""
        return json.loads(dumps(payload))


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(base) / "twistguide"


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Key:
    kind: type
    default: object
    check: object = None
    message: str = ""
    help: str = ""


def _pos(x):
    return x > 0


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).replace(",", " ").split())


KEYS = {
    "d": Key(float, 1.0, _pos, "d must be > 0", "strip width"),
    "ell": Key(float, 0.0, lambda x: x >= 0, "ell must be ≥ 0", "window half-length"),
    "variant": Key(str, "twisted", lambda x: x in ("twisted", "auxiliary"),
                   "variant must be twisted or auxiliary", "boundary variant"),
    "ell_min": Key(float, 0.0, lambda x: x >= 0, "ell_min must be ≥ 0", "sweep start"),
    "ell_max": Key(float, 3.0, lambda x: x >= 0, "ell_max must be ≥ 0", "sweep end"),
    "ell_step": Key(float, 0.5, _pos, "ell_step must be > 0", "sweep step"),
    "ells": Key(_floats, None, lambda v: len(v) > 0 and all(x >= 0 for x in v),
                "ells must be a non-empty list of values ≥ 0", "explicit sweep values"),
    "L": Key(float, None, _pos, "L must be > 0", "truncation half-length"),
    "L_margin": Key(float, 3.0, lambda x: x >= 3.0, "L_margin must be ≥ 3", "L - ell in units of d"),
    "nx": Key(int, None, lambda x: 4 <= x <= 200000, "nx must be in [4, 200000]",
              "coarsest cell count along x1 (sets the aspect ratio)"),
    "ny": Key(int, 16, lambda x: 4 <= x <= 4096, "ny must be in [4, 4096]",
              "coarsest cell count across the strip"),
    "levels": Key(int, None, lambda x: 1 <= x <= 8, "levels must be in [1, 8]",
                  "number of grid levels (depth of the family)"),
    "aspect": Key(float, None, lambda x: 0 < x <= 16, "aspect must be in (0, 16]", "hx / hy"),
    "tol": Key(float, 1e-9, lambda x: 0 < x <= 1e-3, "tol must be in (0, 1e-3]",
               "relative eigen-solve tolerance"),
    "n_modes": Key(int, None, lambda x: x >= 1, "n_modes must be ≥ 1",
                   "transverse modes kept in the transparent closure (default all)"),
    "seed": Key(int, 0, lambda x: 0 <= x < 2**32, "seed must be in [0, 2^32)", "solver seed"),
    "n": Key(int, 1, lambda x: 1 <= x <= 20, "n must be in [1, 20]", "state index"),
    "method": Key(str, "indicator_zero",
                  lambda x: x in ("indicator_zero", "count_bisection", "both"),
                  "method must be indicator_zero, count_bisection or both", "root finder"),
    "eps_factors": Key(_floats, (0.02, 0.04, 0.08, 0.16),
                       lambda v: len(v) >= 4 and all(0 < x <= 0.2 for x in v),
                       "eps_factors needs at least 4 values in (0, 0.2]", "eps / ell_n"),
    "quick": Key(_bool, False, None, "", "reduced validation suite"),
    "jobs": Key(int, 1, lambda x: 1 <= x <= 256, "jobs must be in [1, 256]", "worker processes"),
    "cache": Key(_bool, True, None, "", "use the result cache"),
    "cache_dir": Key(str, None, None, "", f"cache directory (env {CACHE_ENV})"),
    "output": Key(str, None, None, "", "report path (default <command>.<format>)"),
    "format": Key(str, None, lambda x: x in ("csv", "json"), "format must be csv or json",
                  "report format"),
    "dump_matrix": Key(str, None, None, "", "write the level-0 operator as COO triplets"),
}

EXECUTION = ("jobs", "cache", "cache_dir", "output", "format", "dump_matrix")
GRID = ("d", "variant", "L", "L_margin", "nx", "ny", "levels", "aspect", "tol", "n_modes", "seed")

COMMANDS = {
    "spectrum": (("ell",) + GRID + EXECUTION, {"levels": 2, "aspect": 1.0, "format": "csv"}),
    "sweep": (("ell_min", "ell_max", "ell_step", "ells") + GRID + EXECUTION,
              {"levels": 2, "aspect": 1.0, "format": "csv"}),
    "critical": (("n", "method") + GRID + EXECUTION, {"levels": 3, "aspect": 1.0, "format": "json"}),
    "threshold-mode": (("n",) + GRID + EXECUTION, {"levels": 3, "aspect": 1.0, "format": "json"}),
    "emerge": (("n", "eps_factors") + GRID + EXECUTION,
               {"levels": 3, "aspect": 0.125, "format": "json"}),
    "validate": (("quick", "seed", "output", "format"), {"format": "json"}),
}


def parse_config_file(path) -> dict:
    """Flat ``key = value`` (or ``key value``) lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"{path}:{no}: expected 'key = value'")
            k, v = parts
        out[k.replace("-", "_")] = v
    return out


def build_config(command: str, file_values: dict, cli_values: dict) -> dict:
    """Merge defaults, file values and CLI overrides; validate every key."""
    allowed, defaults = COMMANDS[command]
    unknown = sorted(set(file_values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    cfg = {k: defaults.get(k, KEYS[k].default) for k in allowed}
    for source in (file_values, cli_values):
        for k, v in source.items():
            if v is None:
                continue
            spec = KEYS[k]
            try:
                cfg[k] = spec.kind(v)
            except (TypeError, ValueError):
                raise ConfigError(f"invalid value for {k}: {v!r}") from None
    for k in allowed:
        v = cfg[k]
        spec = KEYS[k]
        if v is None or spec.check is None:
            continue
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(f"{k} must be finite")
        if not spec.check(v):
            raise ConfigError(spec.message)
    if command == "sweep" and cfg["ells"] is None and cfg["ell_max"] < cfg["ell_min"]:
        raise ConfigError("ell_max must be ≥ ell_min")
    return cfg


def physics_config(cfg: dict) -> dict:
    """Configuration without execution-only keys (the cache key material)."""
    return {k: v for k, v in cfg.items() if k not in EXECUTION}


# ----------------------------------------------------------------------------
# numerics from a config


def _aspect(cfg: dict, ell: float) -> float:
    if cfg.get("nx") is None:
        return cfg["aspect"]
    L = cfg["L"] if cfg["L"] is not None else ell + cfg["L_margin"] * cfg["d"]
    return (2.0 * L / cfg["nx"]) * cfg["ny"] / cfg["d"]


def spectral_numerics(cfg: dict, ell: float):
    from .spectrum import Numerics

    return Numerics(ny=cfg["ny"], levels=cfg["levels"], aspect=_aspect(cfg, ell), L=cfg["L"],
                    L_margin=cfg["L_margin"], tol=cfg["tol"], n_modes=cfg["n_modes"],
                    seed=cfg["seed"])


def critical_numerics(cfg: dict):
    from .criticality import CriticalNumerics

    if cfg["L"] is not None:
        raise ConfigError("critical-length families set L from L_margin; L is not accepted")
    if cfg["nx"] is not None:
        raise ConfigError("critical-length families fix hx from the window; use aspect, not nx")
    return CriticalNumerics(d=cfg["d"], variant=cfg["variant"], ny=cfg["ny"], levels=cfg["levels"],
                            aspect=cfg["aspect"],
                            L_margin=cfg["L_margin"], n_modes=cfg["n_modes"], seed=cfg["seed"])


# ----------------------------------------------------------------------------
# commands


@dataclass
class Outcome:
    payload: dict
    columns: tuple
    rows: list
    summary: str
    ok: bool = True


def _spectrum_point(args):
    from .model import WaveguideSpec
    from .spectrum import discrete_spectrum

    cfg, ell = args
    spec = WaveguideSpec(cfg["d"], ell, cfg["variant"])
    return discrete_spectrum(spec, spectral_numerics(cfg, ell)).to_dict()


def _point_key(cfg: dict, ell: float) -> str:
    point = {k: cfg[k] for k in GRID}
    point["ell"] = ell
    return Cache.key("spectrum-point", point)


def _spectra(cfg: dict, ells, cache: Cache) -> list:
    keys = [_point_key(cfg, e) for e in ells]
    found = [cache.get(k) for k in keys]
    todo = [i for i, p in enumerate(found) if p is None]
    if cfg["jobs"] > 1 and len(todo) > 1:
        with cf.ProcessPoolExecutor(max_workers=cfg["jobs"]) as ex:
            futures = {ex.submit(_spectrum_point, (cfg, ells[i])): i for i in todo}
            for fut in cf.as_completed(futures):
                i = futures[fut]
                found[i] = cache.normalise(fut.result())
                cache.put(keys[i], found[i])
    else:
        for i in todo:
            found[i] = cache.normalise(_spectrum_point((cfg, ells[i])))
            cache.put(keys[i], found[i])
    log.info("cache hits: %d/%d", len(ells) - len(todo), len(ells))
    return found


SPECTRUM_COLUMNS = ("ell", "m", "lower", "upper", "extrapolated", "parity", "E1", "L", "nx", "ny")


def _spectrum_rows(rep: dict):
    fin = rep["levels"][-1]
    for e in rep["eigenvalues"] + rep["near_threshold"]:
        yield (rep["ell"], e["m"], e["lower"], e["upper"], e["extrapolated"], e["parity"], rep["E1"], fin["L"], fin["nx"], fin["ny"])


def cmd_spectrum(cfg: dict, cache: Cache) -> Outcome:
    from .model import aux_count_band

    if cfg["dump_matrix"]:
        _dump(cfg)
    rep = _spectra(cfg, [cfg["ell"]], cache)[0]
    ev = rep["eigenvalues"]
    lowest = f"[{fmt_float(ev[0]['lower'])}, {fmt_float(ev[0]['upper'])}]" if ev else "none"
    summary = f"count={rep['count']} E1={fmt_float(rep['E1'])} lowest={lowest}"
    ok = True
    if cfg["variant"] == "auxiliary":
        lo, hi = aux_count_band(cfg["ell"], cfg["d"])
        ok = lo <= rep["count"] <= hi
        summary += f" band=[{lo},{hi}] {'ok' if ok else 'VIOLATED'}"
    if rep["near_threshold"]:
        summary += f" near_threshold={len(rep['near_threshold'])}"
    return Outcome(rep, SPECTRUM_COLUMNS, list(_spectrum_rows(rep)), summary, ok)


def _dump(cfg: dict) -> None:
    from .discretize import assemble, build_grid, dump_grid, dump_matrix, transparent_end
    from .model import WaveguideSpec

    spec = WaveguideSpec(cfg["d"], cfg["ell"], cfg["variant"])
    grid = build_grid(spec, spectral_numerics(cfg, cfg["ell"]).gridspec(spec, 0))
    bundle = assemble(grid, transparent_end(0.0, cfg["n_modes"]))
    dump_matrix(bundle.A, cfg["dump_matrix"])
    dump_grid(bundle, cfg["dump_matrix"] + ".grid")
    log.info("matrix written to %s", cfg["dump_matrix"])


def sweep_values(cfg: dict) -> list:
    if cfg["ells"] is not None:
        vals = sorted(set(cfg["ells"]))
    else:
        k = int(math.floor((cfg["ell_max"] - cfg["ell_min"]) / cfg["ell_step"] + 1e-9))
        vals = [round(cfg["ell_min"] + i * cfg["ell_step"], 12) for i in range(k + 1)]
    return vals


SWEEP_COLUMNS = ("ell", "count", "E1", "spectrum_edge", "near_threshold", "eigenvalues")


def cmd_sweep(cfg: dict, cache: Cache) -> Outcome:
    ells = sweep_values(cfg)
    reps = _spectra(cfg, ells, cache)
    rows = []
    for r in reps:
        vals = " ".join(fmt_float(e["extrapolated"]) for e in r["eigenvalues"])
        rows.append((r["ell"], r["count"], r["E1"], r["spectrum_edge"], len(r["near_threshold"]),
                     vals))
    counts = [r["count"] for r in reps]
    monotone = all(b >= a for a, b in zip(counts, counts[1:]))
    payload = {"ells": ells, "counts": counts, "count_monotone": monotone, "reports": reps}
    summary = (f"points={len(ells)} counts={counts[0]}..{counts[-1]} "
               f"monotone={'yes' if monotone else 'NO'}")
    return Outcome(payload, SWEEP_COLUMNS, rows, summary, monotone)


def _cached(cache: Cache, command: str, cfg: dict, compute):
    key = Cache.key(command, physics_config(cfg))
    payload = cache.get(key)
    log.info("cache hits: %d/1", int(payload is not None))
    if payload is None:
        payload = cache.normalise(compute())
        cache.put(key, payload)
    return payload


CRITICAL_COLUMNS = ("n", "method", "value", "uncertainty", "lo", "hi", "level", "level_value")


def cmd_critical(cfg: dict, cache: Cache) -> Outcome:
    from .criticality import Method, critical_length

    num = critical_numerics(cfg)

    def compute():
        methods = (["indicator_zero", "count_bisection"] if cfg["method"] == "both"
                   else [cfg["method"]])
        out = {"n": cfg["n"], "d": cfg["d"], "results": []}
        guess = None
        for m in methods:
            b = critical_length(cfg["n"], num, Method(m), guess=guess)
            guess = (b.value, max(4 * b.uncertainty, 1e-3 * b.value))
            out["results"].append(b.to_dict())
        if len(out["results"]) == 2:
            a, c = (r["value"] for r in out["results"])
            out["relative_difference"] = abs(a - c) / abs(a)
        return out

    payload = _cached(cache, "critical", cfg, compute)
    rows = []
    for r in payload["results"]:
        for k, v in enumerate(r["level_values"]):
            rows.append((r["n"], r["method"], r["value"], r["uncertainty"], r["lo"], r["hi"], k, v))
    r0 = payload["results"][0]
    summary = (f"ell_{cfg['n']}={fmt_float(r0['value'])} +- {fmt_float(r0['uncertainty'])} "
               f"finest_level_root=[{fmt_float(r0['lo'])}, {fmt_float(r0['hi'])}]")
    if "relative_difference" in payload:
        summary += f" methods_rel_diff={payload['relative_difference']:.3g}"
    return Outcome(payload, CRITICAL_COLUMNS, rows, summary)


def cmd_threshold_mode(cfg: dict, cache: Cache) -> Outcome:
    from .criticality import threshold_modes

    num = critical_numerics(cfg)

    def compute():
        bracket, modes = threshold_modes(cfg["n"], num)
        fin = modes[-1]
        return {"bracket": bracket.to_dict(), "levels": [m.to_dict() for m in modes],
                "grid": {"x": fin.grid.x, "y": fin.grid.y, "values": fin.values}}

    payload = _cached(cache, "threshold-mode", cfg, compute)
    g = payload["grid"]
    rows = [(x, y, g["values"][i][j]) for i, x in enumerate(g["x"]) for j, y in enumerate(g["y"])]
    fin = payload["levels"][-1]
    summary = (f"ell={fmt_float(fin['ell'])} parity={fin['wp']:+d} alpha1={fmt_float(fin['alpha1'])} "
               f"amp_plus={fmt_float(fin['amp_plus'])}")
    return Outcome(payload, ("x1", "x2", "phi"), rows, summary)


EMERGE_COLUMNS = ("level", "eps", "lambda_direct", "mu_direct", "mu_mapped", "mu_pred")


def cmd_emerge(cfg: dict, cache: Cache) -> Outcome:
    from .perturbation import emergence_study

    num = critical_numerics(cfg)

    def compute():
        st = emergence_study(cfg["n"], num, eps_factors=cfg["eps_factors"], jobs=cfg["jobs"])
        out = st.to_dict()
        ext = st.extrapolated
        rel = abs(ext["mu1_fit"] - ext["mu1_integral"]) / abs(ext["mu1_integral"])
        out["mu1_agreement"] = {"relative_difference": rel, "agree": rel <= 0.05}
        out["mu2_discrepancy"] = mu2_discrepancy(ext)
        return out

    payload = _cached(cache, "emerge", cfg, compute)
    rows = []
    for k, s in enumerate(payload["levels"]):
        for row in zip(s["eps_grid"], s["lambda_direct"], s["mu_direct"], s["mu_mapped"],
                       s["mu_pred"]):
            rows.append((k,) + tuple(row))
    ext = payload["extrapolated"]
    agree = payload["mu1_agreement"]
    summary = (f"mu1_integral={fmt_float(ext['mu1_integral'])} mu1_fit={fmt_float(ext['mu1_fit'])} "
               f"agree={'yes' if agree['agree'] else 'no'} "
               f"mu2_formula={fmt_float(ext['mu2_formula'])} mu2_fit={fmt_float(ext['mu2_fit'])}")
    return Outcome(payload, EMERGE_COLUMNS, rows, summary)


def mu2_discrepancy(ext: dict) -> dict:
    """Relative gaps of the literal and cutoff-free variants to the formula value."""
    ref = ext["mu2_formula"]
    out = {"reference": ref}
    for name in ("mu2_literal", "mu2_cutoff_free", "mu2_fit", "mu2_fit3"):
        if name in ext:
            out[name] = {"value": ext[name], "relative_difference": abs(ext[name] - ref) / abs(ref)}
    return out


VALIDATE_COLUMNS = ("check", "passed", "detail")


def cmd_validate(cfg: dict, cache: Cache) -> Outcome:
    from .validation import run_validation

    checks = run_validation(quick=cfg["quick"], seed=cfg["seed"])
    ok = all(c["passed"] for c in checks)
    payload = {"quick": cfg["quick"], "seed": cfg["seed"], "passed": ok, "checks": checks}
    rows = [(c["check"], "pass" if c["passed"] else "FAIL", c["detail"]) for c in checks]
    failed = [c["check"] for c in checks if not c["passed"]]
    summary = f"checks={len(checks)} failed={len(failed)}" + (f" ({', '.join(failed)})" if failed else "")
    return Outcome(payload, VALIDATE_COLUMNS, rows, summary, ok)


HANDLERS = {
    "spectrum": cmd_spectrum,
    "sweep": cmd_sweep,
    "critical": cmd_critical,
    "threshold-mode": cmd_threshold_mode,
    "emerge": cmd_emerge,
    "validate": cmd_validate,
}


# ----------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twistguide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"twistguide {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (allowed, _) in COMMANDS.items():
        sp_ = sub.add_parser(name, help=f"run {name}")
        sp_.add_argument("--config", default=None, help="flat key = value file")
        sp_.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        for k in allowed:
            spec = KEYS[k]
            flag = "--" + k
            alias = ["--" + k.replace("_", "-")] if "_" in k else []
            if spec.kind is _bool:
                sp_.add_argument(flag, *alias, dest=k, nargs="?", const="true", default=None,
                                 help=spec.help)
            else:
                sp_.add_argument(flag, *alias, dest=k, default=None, help=spec.help)
    return p


def _emit(outcome: Outcome, cfg: dict, command: str) -> str:
    fmt = cfg.get("format") or "json"
    path = cfg.get("output") or f"{command}.{fmt}"
    text = dumps(outcome.payload) + "\n" if fmt == "json" else csv_text(outcome.columns, outcome.rows)
    atomic_write(path, text)
    return path


def main(argv=None) -> int:
    """Console entry point; returns the process exit code."""
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    from .criticality import NoCriticalPointError, NotCriticalError
    from .eigensolve import CountMismatchError, SingularShiftError
    from .perturbation import EmergenceError, ModeError
    from .spectrum import NumericsError

    numeric_errors = (NumericsError, NoCriticalPointError, NotCriticalError, EmergenceError,
                      ModeError, CountMismatchError, SingularShiftError, np.linalg.LinAlgError,
                      ArithmeticError, RuntimeError)
    try:
        args = make_parser().parse_args(argv)
        command = args.command
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        file_values = parse_config_file(args.config) if args.config else {}
        allowed, _ = COMMANDS[command]
        cli_values = {k: getattr(args, k) for k in allowed}
        cfg = build_config(command, file_values, cli_values)
        root = cfg.get("cache_dir") or default_cache_dir()
        cache = Cache(root, enabled=cfg.get("cache", False))
        outcome = HANDLERS[command](cfg, cache)
        path = _emit(outcome, cfg, command)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except numeric_errors as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(outcome.summary)
    log.info("report written to %s", path)
    return 0 if outcome.ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
