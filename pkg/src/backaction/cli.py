"""Config-driven experiment runner.

Usage::

    backaction run <config> [--seed S] [--jobs J] [--outdir D]
    backaction list
    backaction validate <config>

Configs are TOML files; a bare name such as ``fig2a`` resolves to a bundled
config. Artifacts land in ``<outdir>/<name>/<seed>/``. The default outdir is
taken from ``$BACKACTION_OUTDIR`` (falling back to ``./runs``). Exit status is
0 on success, 2 on a config error and 3 on a numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import re
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .basis import CapacityError, QuantumState, TruncationError, build_fixed_n_basis
from .entanglement import Bipartition, NumericalFailure, asymptotic_entropy, entanglement_entropy
from .lightmatter import (
    IncommensurateError,
    InconsistentMeasurementError,
    UnderdeterminedError,
    forward_measurements,
    reconstruct_occupations,
    travelling_wave_operator,
)
from .states import FAMILIES, StateRecipe, multimode_pdc
from .trajectory import (
    BhHamiltonian,
    DegenerateRecordError,
    DetectionScheme,
    NormAnomalyError,
    SCHEME_KINDS,
    StepSizeError,
    TrajectoryFailure,
    conditional_update,
    run_ensemble,
    run_trajectory,
    zeno_check,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUTDIR_ENV = "BACKACTION_OUTDIR"
EXPERIMENTS = ("trajectory", "ensemble", "project", "reconstruct", "entropy_sweep", "zeno")

NUMERIC_ERRORS = (
    StepSizeError, NormAnomalyError, TrajectoryFailure, DegenerateRecordError, NumericalFailure,
    TruncationError, CapacityError, UnderdeterminedError, InconsistentMeasurementError,
    IncommensurateError,
)

# section -> key -> kind; None is the top level
SCHEMA: dict[str | None, dict[str, str]] = {
    None: {"experiment": "str", "paper_ref": "str", "description": "str"},
    "state": {"family": "str", "params": "table", "occupation": "intlist"},
    "optics": {"delta": "float", "delta_over_pi": "float", "C": "complex", "illuminated": "intlist"},
    "scheme": {"kind": "str", "lo_offset": "lo", "kappa": "float"},
    "hamiltonian": {"t_hop": "float", "U": "float", "periodic": "bool"},
    "numerics": {"tau_max": "float", "dtau": "float", "n_traj": "int", "seed": "int",
                 "n_grid": "int", "cut": "intlist"},
    "record": {"m": "int", "t": "float"},
    "reconstruct": {"occupations": "intlist", "delta_over_pi": "floatlist"},
    "sweep": {"R": "intlist", "lam_over_R": "floatlist", "n_max": "int"},
    "zeno": {"kappa_strong": "float", "n_traj": "int", "dt": "float", "n_grid": "int"},
    "output": {"dir": "str"},
}

REQUIRED: dict[str, list[tuple[str, str | None]]] = {
    "trajectory": [("state", None), ("optics", None), ("numerics", "tau_max")],
    "ensemble": [("state", None), ("optics", None), ("numerics", "tau_max"), ("numerics", "n_traj")],
    "project": [("state", None)],
    "reconstruct": [("reconstruct", "occupations")],
    "entropy_sweep": [("sweep", "R"), ("sweep", "lam_over_R")],
    "zeno": [("state", "occupation"), ("optics", None), ("hamiltonian", "t_hop"),
             ("zeno", "kappa_strong"), ("numerics", "tau_max")],
}


class ConfigError(ValueError):
    """A config problem, reported as ``path:line: message``."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line, self.message = path, line, message


class _LineIndex:
    """Maps top-level keys, table headers and table keys to 1-based line numbers."""

    _header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]")
    _key = re.compile(r"^\s*([A-Za-z0-9_-]+)\s*=")

    def __init__(self, text: str):
        self.tables: dict[str, int] = {}
        self.keys: dict[tuple[str | None, str], int] = {}
        table = None
        for no, line in enumerate(text.splitlines(), start=1):
            m = self._header.match(line)
            if m:
                table = m.group(1)
                self.tables.setdefault(table, no)
                continue
            m = self._key.match(line)
            if m:
                self.keys.setdefault((table, m.group(1)), no)

    def line(self, section: str | None, key: str | None = None) -> int:
        if key is not None and (section, key) in self.keys:
            return self.keys[(section, key)]
        if section is not None and section in self.tables:
            return self.tables[section]
        return 1


@dataclass
class ExperimentConfig:
    path: str
    name: str
    raw: dict[str, Any]
    text: bytes
    index: _LineIndex

    @property
    def experiment(self) -> str:
        return self.raw["experiment"]

    def section(self, name: str) -> dict[str, Any]:
        return self.raw.get(name, {})

    def error(self, section: str | None, key: str | None, message: str) -> ConfigError:
        where = f"{section}.{key}" if section and key else (section or key or "config")
        return ConfigError(self.path, self.index.line(section, key), f"{where}: {message}")

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text).hexdigest()


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_kind(value, kind: str) -> bool:
    if kind == "str":
        return isinstance(value, str)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return _is_number(value) and math.isfinite(value)
    if kind == "complex":
        return _is_number(value) or (isinstance(value, list) and len(value) == 2
                                     and all(_is_number(x) for x in value))
    if kind == "lo":
        return value == "auto" or _check_kind(value, "complex")
    if kind == "table":
        return isinstance(value, dict)
    if kind == "intlist":
        return isinstance(value, list) and all(_check_kind(x, "int") for x in value)
    if kind == "floatlist":
        return isinstance(value, list) and all(_check_kind(x, "float") for x in value)
    raise AssertionError(kind)


def _as_complex(value) -> complex:
    return complex(value[0], value[1]) if isinstance(value, list) else complex(value)


def bundled_dir():
    return resources.files("backaction") / "configs"


def _resolve(path_or_name: str) -> Path:
    p = Path(path_or_name)
    if p.exists():
        return p
    candidate = bundled_dir() / f"{path_or_name}.toml"
    if candidate.is_file():
        return Path(str(candidate))
    return p


def load_config(path_or_name: str) -> ExperimentConfig:
    """Parse and validate a config; raises :class:`ConfigError`."""
    path = _resolve(path_or_name)
    shown = str(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(shown, 0, f"cannot read config: {exc.strerror or exc}") from None
    text = data.decode("utf-8", errors="replace")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(shown, int(m.group(1)) if m else 1, f"TOML syntax error: {exc}") from None
    cfg = ExperimentConfig(shown, path.stem, raw, data, _LineIndex(text))
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    raw = cfg.raw
    if not raw:
        raise cfg.error(None, "experiment", "config is empty")
    for key, value in raw.items():
        if isinstance(value, dict) and key in SCHEMA:
            continue
        if key not in SCHEMA[None]:
            raise cfg.error(None, key, "unknown key or section")
        if not _check_kind(value, SCHEMA[None][key]):
            raise cfg.error(None, key, f"expected {SCHEMA[None][key]}")
    if "experiment" not in raw:
        raise cfg.error(None, "experiment", "missing required key 'experiment'")
    if raw["experiment"] not in EXPERIMENTS:
        raise cfg.error(None, "experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    for section, body in raw.items():
        if section not in SCHEMA or section is None or not isinstance(body, dict):
            continue
        for key, value in body.items():
            kind = SCHEMA[section].get(key)
            if kind is None:
                raise cfg.error(section, key, "unknown key")
            if not _check_kind(value, kind):
                raise cfg.error(section, key, f"expected {kind}, got {value!r}")
    for section, key in REQUIRED[raw["experiment"]]:
        if section not in raw:
            raise cfg.error(None, None, f"missing required section [{section}]")
        if key is not None and key not in raw[section]:
            raise cfg.error(section, None, f"missing required key '{key}'")
    _validate_semantics(cfg)


def _positive(cfg, section, key, default=None, integer=False):
    value = cfg.section(section).get(key, default)
    if value is None:
        return None
    if value <= 0:
        raise cfg.error(section, key, "must be positive")
    return int(value) if integer else float(value)


def _validate_semantics(cfg: ExperimentConfig) -> None:
    state = cfg.section("state")
    if state:
        if "occupation" in state:
            if any(n < 0 for n in state["occupation"]) or not state["occupation"]:
                raise cfg.error("state", "occupation", "occupations must be a non-empty list of non-negative ints")
        elif "family" not in state:
            raise cfg.error("state", None, "give either 'family' (with 'params') or 'occupation'")
        elif state["family"] not in FAMILIES:
            raise cfg.error("state", "family", f"unknown family; expected one of {', '.join(FAMILIES)}")
    optics = cfg.section("optics")
    if optics and ("delta" in optics) == ("delta_over_pi" in optics):
        raise cfg.error("optics", None, "give exactly one of 'delta' or 'delta_over_pi'")
    scheme = cfg.section("scheme")
    if scheme:
        if scheme.get("kind", "photocount") not in SCHEME_KINDS:
            raise cfg.error("scheme", "kind", f"must be one of {', '.join(SCHEME_KINDS)}")
        if "lo_offset" in scheme and scheme.get("kind") != "phase_sensitive":
            raise cfg.error("scheme", "lo_offset", "only phase_sensitive detection takes a local oscillator")
        if scheme.get("kappa", 1.0) < 0:
            raise cfg.error("scheme", "kappa", "must be non-negative")
    for key in ("tau_max", "dtau"):
        _positive(cfg, "numerics", key)
    for key in ("n_traj", "n_grid"):
        _positive(cfg, "numerics", key, integer=True)
    if cfg.section("numerics").get("seed", 0) < 0:
        raise cfg.error("numerics", "seed", "must be non-negative")
    record = cfg.section("record")
    if record and (record.get("m", 0) < 0 or record.get("t", 0.0) < 0):
        raise cfg.error("record", None, "m and t must be non-negative")
    if record and not optics:
        raise cfg.error("record", None, "a measurement record needs an [optics] section")
    rec = cfg.section("reconstruct")
    if rec and (len(rec["occupations"]) < 1 or any(n < 0 for n in rec["occupations"])):
        raise cfg.error("reconstruct", "occupations", "need non-negative occupations")
    sweep = cfg.section("sweep")
    if sweep:
        if any(R < 2 for R in sweep["R"]):
            raise cfg.error("sweep", "R", "every R must be >= 2")
        if any(x <= 0 for x in sweep["lam_over_R"]):
            raise cfg.error("sweep", "lam_over_R", "values must be positive")
    if cfg.experiment == "zeno":
        _positive(cfg, "zeno", "kappa_strong")
        occ = state["occupation"]
        if len(occ) > 6 or sum(occ) > 8:
            raise cfg.error("state", "occupation", "zeno checks are limited to M <= 6 sites, N <= 8 atoms")
    if cfg.experiment in ("trajectory", "ensemble") and cfg.section("hamiltonian") and "occupation" not in state:
        raise cfg.error("hamiltonian", None, "Hamiltonian runs need a site-resolved [state] occupation")


# ---------------------------------------------------------------- builders

def _build_state(cfg: ExperimentConfig) -> QuantumState:
    state = cfg.section("state")
    if "occupation" in state:
        occ = tuple(state["occupation"])
        return QuantumState.fock(build_fixed_n_basis(len(occ), sum(occ)), occ)
    try:
        return StateRecipe(state["family"], dict(state.get("params", {}))).build()
    except (KeyError, TypeError) as exc:
        raise cfg.error("state", "params", f"bad parameters for {state['family']}: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, NUMERIC_ERRORS):
            raise
        raise cfg.error("state", "params", str(exc)) from None


def _build_operator(cfg: ExperimentConfig, n_slots: int):
    optics = cfg.section("optics")
    delta = optics["delta"] if "delta" in optics else math.pi * optics["delta_over_pi"]
    return travelling_wave_operator(n_slots, float(delta), _as_complex(optics.get("C", 1.0)),
                                    optics.get("illuminated"))


def _build_scheme(cfg: ExperimentConfig) -> DetectionScheme:
    s = cfg.section("scheme")
    kind = s.get("kind", "photocount")
    lo = s.get("lo_offset", 0.0)
    lo = None if lo == "auto" else _as_complex(lo)
    return DetectionScheme(kind, lo if kind == "phase_sensitive" else 0.0, float(s.get("kappa", 1.0)))


def _build_hamiltonian(cfg: ExperimentConfig, M: int) -> BhHamiltonian | None:
    h = cfg.section("hamiltonian")
    if not h:
        return None
    return BhHamiltonian(float(h["t_hop"]), float(h.get("U", 0.0)), M, bool(h.get("periodic", False)))


def _cut(cfg: ExperimentConfig, n_slots: int) -> Bipartition | None:
    part = cfg.section("numerics").get("cut")
    return Bipartition.of(part, n_slots) if part else None


# ---------------------------------------------------------------- runners

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _rows_csv(header: list[str], rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def _trajectory_kwargs(cfg, state):
    num = cfg.section("numerics")
    op = _build_operator(cfg, state.basis.slots)
    return dict(initial=state, op=op, scheme=_build_scheme(cfg),
                H=_build_hamiltonian(cfg, state.basis.slots),
                tau_max=float(num["tau_max"]), dtau=float(num.get("dtau", 1e-3)),
                n_grid=int(num.get("n_grid", 100)), cut=_cut(cfg, state.basis.slots))


def _run_trajectory(cfg, seed, jobs, out: Path) -> tuple[dict, list[int]]:
    state = _build_state(cfg)
    rec = run_trajectory(seed=seed, **_trajectory_kwargs(cfg, state))
    rec.to_csv(out / "trajectory_000.csv")
    dm = rec.d_mean[-1]
    return {"final_entropy": rec.final_entropy, "n_jumps": rec.n_jumps_total,
            "final_D_mean": [dm.real, dm.imag], "final_D_var": float(rec.d_var[-1])}, [seed]


def _run_ensemble(cfg, seed, jobs, out: Path) -> tuple[dict, list[int]]:
    state = _build_state(cfg)
    n_traj = int(cfg.section("numerics")["n_traj"])
    ens = run_ensemble(n_traj=n_traj, base_seed=seed, jobs=jobs, **_trajectory_kwargs(cfg, state))
    for i, rec in enumerate(ens.records):
        rec.to_csv(out / f"trajectory_{i:03d}.csv")
    (out / "final_entropies.csv").write_text(_rows_csv(
        ["seed", "final_entropy_bits", "n_jumps"],
        [(r.seed, float(r.final_entropy), r.n_jumps_total) for r in ens.records]))
    summary = ens.summary()
    summary.pop("seeds")
    return summary, ens.seeds


def _run_project(cfg, seed, jobs, out: Path) -> tuple[dict, list[int]]:
    state = _build_state(cfg)
    summary: dict[str, Any] = {"dim": state.basis.dim, "slots": state.basis.slots}
    record = cfg.section("record")
    if record:
        op = _build_operator(cfg, state.basis.slots)
        state = conditional_update(state, op, _build_scheme(cfg), int(record.get("m", 0)),
                                   float(record.get("t", 0.0)))
        summary["record"] = {"m": int(record.get("m", 0)), "t": float(record.get("t", 0.0))}
    if state.basis.slots >= 2:
        cut = _cut(cfg, state.basis.slots) or Bipartition.of([0], state.basis.slots)
        report = entanglement_entropy(state, cut)
        summary["entropy_bits"] = report.von_neumann_bits
        summary["renyi_bits"] = {str(m): v for m, v in report.renyi.items()}
        summary["schmidt_rank"] = report.schmidt_rank
    for key in ("dropped_mass", "family"):
        if key in state.meta:
            summary[key] = state.meta[key]
    (out / "state.json").write_text(state.to_json() + "\n")
    return summary, [seed]


def _run_reconstruct(cfg, seed, jobs, out: Path) -> tuple[dict, list[int]]:
    sec = cfg.section("reconstruct")
    truth = tuple(sec["occupations"])
    R = len(truth)
    deltas = [math.pi * x for x in sec["delta_over_pi"]] if "delta_over_pi" in sec else None
    ms = forward_measurements(truth, deltas)
    recovered = reconstruct_occupations(ms, R)
    print("recovered occupations:", " ".join(str(n) for n in recovered))
    (out / "measurements.json").write_text(ms.to_json() + "\n")
    return {"ground_truth": list(truth), "recovered": list(recovered),
            "match": recovered == truth}, [seed]


def _run_entropy_sweep(cfg, seed, jobs, out: Path) -> tuple[dict, list[int]]:
    sec = cfg.section("sweep")
    rows = []
    for R in sec["R"]:
        for x in sec["lam_over_R"]:
            lam = float(x) * R
            st = multimode_pdc(lam, R, sec.get("n_max"))
            s = entanglement_entropy(st, Bipartition.of([0], R), orders=(2,)).von_neumann_bits
            rows.append((R, lam, float(s), asymptotic_entropy(lam, R)))
    (out / "sweep.csv").write_text(_rows_csv(["R", "lam", "entropy_bits", "asymptotic_bits"], rows))
    worst = max(abs(s - a) for _, _, s, a in rows)
    return {"points": len(rows), "max_abs_deviation_bits": worst}, [seed]


def _run_zeno(cfg, seed, jobs, out: Path) -> tuple[dict, list[int]]:
    state = _build_state(cfg)
    M = state.basis.slots
    sec = cfg.section("zeno")
    rep = zeno_check(state, _build_operator(cfg, M), _build_hamiltonian(cfg, M),
                     float(sec["kappa_strong"]), float(cfg.section("numerics")["tau_max"]),
                     n_grid=int(sec.get("n_grid", 50)), dt=float(sec.get("dt", 1e-3)), seed=seed,
                     n_traj=int(sec.get("n_traj", 4)))
    n_modes = rep.measured_mode_mean.shape[1]
    header = ["t"] + [f"measured_N{r}" for r in range(n_modes)] + [f"free_N{r}" for r in range(n_modes)]
    header += ["measured_coh_re", "measured_coh_im", "free_coh_re", "free_coh_im"]
    rows = []
    for k, t in enumerate(rep.times):
        rows.append([float(t)] + [float(v) for v in rep.measured_mode_mean[k]]
                    + [float(v) for v in rep.free_mode_mean[k]]
                    + [float(rep.measured_intramode[k].real), float(rep.measured_intramode[k].imag),
                       float(rep.free_intramode[k].real), float(rep.free_intramode[k].imag)])
    (out / "zeno.csv").write_text(_rows_csv(header, rows))
    n = int(sec.get("n_traj", 4))
    return {"measured_drift": rep.measured_drift, "free_drift": rep.free_drift,
            "suppression": rep.suppression, "intramode_variation": rep.intramode_variation,
            "intramode_pair": list(rep.intramode_pair)}, [seed + i for i in range(n)]


RUNNERS = {
    "trajectory": _run_trajectory,
    "ensemble": _run_ensemble,
    "project": _run_project,
    "reconstruct": _run_reconstruct,
    "entropy_sweep": _run_entropy_sweep,
    "zeno": _run_zeno,
}


def run(cfg: ExperimentConfig, seed: int | None = None, jobs: int = 1,
        outdir: str | None = None) -> Path:
    """Execute a validated config; returns the artifact directory."""
    seed = int(cfg.section("numerics").get("seed", 0) if seed is None else seed)
    base = outdir or cfg.section("output").get("dir") or os.environ.get(OUTDIR_ENV) or "runs"
    out = Path(base) / cfg.name / str(seed)
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    summary, seeds = RUNNERS[cfg.experiment](cfg, seed, jobs, out)
    summary = {"experiment": cfg.experiment, "name": cfg.name, "seed": seed, **summary}
    if "paper_ref" in cfg.raw:
        summary["paper_ref"] = cfg.raw["paper_ref"]
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", {
        "config": cfg.path,
        "config_sha256": cfg.sha256,
        "experiment": cfg.experiment,
        "version": __version__,
        "seeds": seeds,
        "jobs": jobs,
        "started_utc": started.isoformat(),
        "wall_time_s": time.perf_counter() - t0,
        "python": platform.python_version(),
        "numpy": np.__version__,
    })
    return out


def list_experiments() -> list[dict[str, str]]:
    """Bundled configs sorted by name, with the experiment kind and target."""
    rows = []
    for entry in sorted(bundled_dir().iterdir(), key=lambda p: p.name):
        if not entry.name.endswith(".toml"):
            continue
        raw = tomllib.loads(entry.read_text())
        rows.append({"name": entry.name[:-5], "experiment": raw.get("experiment", "?"),
                     "paper_ref": raw.get("paper_ref", "")})
    return rows


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="backaction", description="Run measurement back-action experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a config and write artifacts")
    r.add_argument("config", help="path to a TOML config or the name of a bundled one")
    r.add_argument("--seed", type=int, default=None, help="override numerics.seed")
    r.add_argument("--jobs", type=int, default=1, help="worker processes for ensembles")
    r.add_argument("--outdir", default=None, help=f"artifact root (default ${OUTDIR_ENV} or ./runs)")
    sub.add_parser("list", help="list bundled configs")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list":
        rows = list_experiments()
        width = max(len(r["name"]) for r in rows)
        kind_w = max(len(r["experiment"]) for r in rows)
        for r in rows:
            print(f"{r['name']:<{width}}  {r['experiment']:<{kind_w}}  {r['paper_ref']}")
        return EXIT_OK
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        print(f"{cfg.path}: ok ({cfg.experiment})")
        return EXIT_OK
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        out = run(cfg, args.seed, args.jobs, args.outdir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
