"""Command-line runner: lobdiff <subcommand> --config run.json --out DIR."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, haar
from .config import ConfigError, RunConfig, dumps, load, to_dict
from .diagnostics import convergence_sweep, reports_to_json, stopped_price
from .limit import LimitInitial, Mode, UniquenessWarning, marginal_samples
from .micro import run_ensemble
from .model import LOBState, validate_spec
from .ortho import NotPSDError, TriangularArray, decompose, inverse_alpha

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _manifest(out: Path, command: str, cfg: RunConfig, files: Sequence[str], extra: Optional[dict] = None):
    body = {"command": command, "tool": "lobdiff", "version": __version__,
            "numpy": np.__version__, "seed": cfg.seed, "config": to_dict(cfg),
            "files": sorted(files)}
    body.update(extra or {})
    _write(out / MANIFEST, json.dumps(body, indent=1, sort_keys=True) + "\n")


def _initial_state(cfg: RunConfig, dx: float) -> LOBState:
    b0 = cfg.initial.b0
    if abs(b0 / dx - round(b0 / dx)) > 1e-9:
        raise ConfigError(f"initial.b0: {b0} is not on the tick grid of delta_x = {dx}")
    return cfg.initial_profile().state(round(b0 / dx) * dx, dx, cfg.initial.horizon)


def _limit_spec(cfg: RunConfig, command: str, exploratory: bool):
    overrides = cfg.limit.model if cfg.limit is not None else None
    spec = cfg.build_model(None, overrides)
    sde = cfg.sde_config()
    if sde.mode == Mode.GENERAL:
        if command == "converge" and not exploratory:
            raise UsageError("converge: general mode has no uniqueness guarantee; rerun with --exploratory")
        print("WARNING: general mode carries no uniqueness guarantee; results are exploratory",
              file=sys.stderr)
    s0 = LimitInitial.from_profile(cfg.initial.b0, cfg.initial_profile(), sde.indices) \
        if spec.has_volume else LimitInitial(cfg.initial.b0, np.zeros(0))
    return spec, sde, s0


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate_micro(cfg: RunConfig, out: Path, threads: int = 1) -> int:
    rungs = cfg.rungs()
    tracked = list(range(1, cfg.truncation.m_store + 1))
    files = []
    for r, params in enumerate(rungs):
        sub = Path(f"rung_{r}") if len(rungs) > 1 else Path(".")
        spec = cfg.build_model(params)
        state0 = _initial_state(cfg, params.delta_x)
        paths = run_ensemble(spec, state0, cfg.scaling.T, cfg.truncation.m, cfg.diagnostics.n_paths,
                             tracked, cfg.seed, record="full", threads=threads)
        for p in paths:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["step", "t", "B", "phi", "omega", "pi"] + [f"V_{i}" for i in tracked])
            t = p.times
            for k in range(p.n_steps + 1):
                ev = [int(p.phi[k - 1]), _fmt(p.omega[k - 1]), _fmt(p.pi[k - 1])] if k else ["", "", ""]
                coef = [_fmt(x) for x in p.coef[k]] if tracked else []
                w.writerow([k, _fmt(t[k]), _fmt(p.B[k])] + ev + coef)
            name = sub / f"path_{p.path_id:05d}.csv"
            _write(out / name, buf.getvalue())
            files.append(str(name))
    _manifest(out, "simulate-micro", cfg, files, {"rungs": [p.as_dict() for p in rungs],
                                                  "tracked_indices": tracked})
    return 0


def cmd_simulate_limit(cfg: RunConfig, out: Path, exploratory: bool = False) -> int:
    spec, sde, s0 = _limit_spec(cfg, "simulate-limit", exploratory)
    n_paths = cfg.limit.n_paths if cfg.limit is not None else cfg.diagnostics.n_paths
    obs = [i for i in range(1, cfg.truncation.m_store + 1)] if spec.has_volume else []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UniquenessWarning)
        table = marginal_samples(spec, s0, sde, n_paths, obs, cfg.seed)
    _write(out / "samples.csv", table.to_csv())
    _manifest(out, "simulate-limit", cfg, ["samples.csv"],
              {"sde": sde.as_dict(), "truncation_budget": sde.truncation_budget})
    return 0


def cmd_converge(cfg: RunConfig, out: Path, exploratory: bool = False, threads: int = 1) -> int:
    if cfg.limit is None:
        raise UsageError("converge: config has no limit block")
    spec_lim, sde, s0 = _limit_spec(cfg, "converge", exploratory)
    m = float(cfg.truncation.m)
    dcfg = cfg.diagnostics_config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UniquenessWarning)
        table = marginal_samples(spec_lim, s0, sde, cfg.limit.n_paths, (), cfg.seed)
    limit_obs = stopped_price(table.B_T, m)
    micro = []
    for r, params in enumerate(cfg.rungs()):
        spec = cfg.build_model(params)
        fin = run_ensemble(spec, _initial_state(cfg, params.delta_x), cfg.scaling.T, m,
                           cfg.diagnostics.n_paths, (), cfg.seed, record="final", threads=threads)
        micro.append((f"rung_{r}", params.delta_x, params.delta_p, stopped_price(fin.B, m)))
    result = convergence_sweep(micro, limit_obs, cfg.seed, dcfg)
    _write(out / "distances.csv", result.table_csv())
    verdict = {"pass": result.report.passed, "trend_ok": result.trend_ok, "final_ok": result.final_ok,
               "exploratory": bool(exploratory and sde.mode == Mode.GENERAL),
               "report": result.report.to_dict()}
    _write(out / "verdict.json", json.dumps(verdict, indent=1, sort_keys=True) + "\n")
    _manifest(out, "converge", cfg, ["distances.csv", "verdict.json"], {"sde": sde.as_dict()})
    return 0 if result.report.passed or verdict["exploratory"] else 1


def read_triangle(text: str) -> TriangularArray:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise UsageError("decompose: empty input")
    head = [h.strip() for h in rows[0]]
    if head != ["i", "j", "rho"]:
        raise UsageError("decompose: header must be i,j,rho")
    entries = []
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            entries.append((int(row[0]), int(row[1]), float(row[2])))
        except (ValueError, IndexError):
            raise UsageError(f"decompose: bad row at line {ln}: {row!r}") from None
    n = max(max(i, j) for i, j, _ in entries) if entries else 0
    for i, j, _ in entries:
        if i < 1 or j < 1 or j > i:
            raise UsageError(f"decompose: entry ({i}, {j}) is not in the lower triangle")
    tri = TriangularArray.from_entries(n, entries)
    for i in range(n):
        if tri.values[i, i] == 0.0:
            tri.values[i, i] = 1.0
    return tri


def cmd_decompose(in_csv: Path, out_csv: Path) -> int:
    tri = read_triangle(Path(in_csv).read_text(encoding="utf-8"))
    c = decompose(tri)
    a = inverse_alpha(c)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "c", "alpha"])
    for (i, j, cv), (_, _, av) in zip(c.entries(), a.entries()):
        w.writerow([i, j, _fmt(cv), _fmt(av)])
    _write(Path(out_csv), buf.getvalue())
    return 0


def cmd_basis(cfg: RunConfig, out: Path, points_per_unit: int = 64) -> int:
    idx = haar.index_set(cfg.truncation.m, cfg.truncation.l_max)
    y = np.arange(cfg.truncation.m * points_per_unit + 1) / points_per_unit
    f = haar.f_matrix(idx, y)
    F = haar.F_matrix(idx, y)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["y"] + [f"f_{i}" for i in idx] + [f"F_{i}" for i in idx])
    for r in range(len(y)):
        w.writerow([_fmt(y[r])] + [_fmt(x) for x in f[r]] + [_fmt(x) for x in F[r]])
    _write(out / "basis.csv", buf.getvalue())
    kl = io.StringIO()
    w = csv.writer(kl, lineterminator="\n")
    w.writerow(["i", "k", "l", "lo", "hi"])
    for i in idx:
        k, l = haar.index_to_kl(i)
        lo, hi = haar.support_of(k, l)
        w.writerow([i, k, l, _fmt(lo), _fmt(hi)])
    _write(out / "indices.csv", kl.getvalue())
    _manifest(out, "basis", cfg, ["basis.csv", "indices.csv"])
    return 0


def probe_states(cfg: RunConfig, dx: float, n_b: int = 21, scales=(0.0, 1.0, 3.0)) -> list[LOBState]:
    """Book states over a grid of bids and scaled initial profiles."""
    base = cfg.initial_profile()
    top = max(cfg.model.c1, dx)
    out = []
    for s in scales:
        for b in np.linspace(0.0, top, n_b):
            st = base.state(round(b / dx) * dx, dx, cfg.initial.horizon)
            out.append(LOBState.from_density(st.b, s * st.v, dx))
    return out


def cmd_validate(cfg: RunConfig, out: Path) -> int:
    results = []
    ok = True
    for params in cfg.rungs():
        spec = cfg.build_model(params)
        rep = validate_spec(spec, probe_states(cfg, params.delta_x))
        ok = ok and rep.ok
        results.append({"scaling": params.as_dict(), "n_states": rep.n_states, "ok": rep.ok,
                        "violations": [vars(v) for v in rep.violations]})
    _write(out / "validation.json", json.dumps(results, indent=1, sort_keys=True) + "\n")
    _manifest(out, "validate", cfg, ["validation.json"])
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lobdiff", description=__doc__)
    ap.add_argument("--version", action="version", version=f"lobdiff {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate-micro", "simulate-limit", "converge", "basis", "validate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--exploratory", action="store_true")
    p = sub.add_parser("decompose")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "decompose":
            return cmd_decompose(args.input, args.output)
        cfg = load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "config.json", dumps(cfg))
        if args.command == "simulate-micro":
            return cmd_simulate_micro(cfg, out, args.threads)
        if args.command == "simulate-limit":
            return cmd_simulate_limit(cfg, out, args.exploratory)
        if args.command == "converge":
            return cmd_converge(cfg, out, args.exploratory, args.threads)
        if args.command == "basis":
            return cmd_basis(cfg, out)
        return cmd_validate(cfg, out)
    except (ConfigError, UsageError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except NotPSDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
