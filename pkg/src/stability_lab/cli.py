"""Command line front end: ``stability-lab <command> --config f.json --out dir``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import jsonschema
import numpy as np

from . import __version__
from . import family as fam
from . import lyapunov as ly
from . import misiurewicz as mz
from . import postcritical as pc
from . import report as rp
from . import webbuilder as wb
from .schemas import CONFIG, OUTPUT, publish

COMMANDS = ("lyap", "bif", "mass", "ram", "web", "misiu", "report")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_COMPUTE = 3


class ConfigError(Exception):
    def __init__(self, message, path=()):
        super().__init__(message)
        self.path = list(path)


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


def load_config(command, path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    validate_config(command, cfg)
    return cfg


def validate_config(command, cfg):
    try:
        jsonschema.validate(cfg, CONFIG[command])
    except jsonschema.ValidationError as exc:
        raise ConfigError(exc.message, exc.absolute_path) from exc


def build_family(spec, base_dir="."):
    if "builtin" in spec:
        name = spec["builtin"]
        if name == "quadratic":
            return fam.quadratic_family()
        if name == "cubic":
            return fam.cubic_family()
        if name == "power":
            return fam.power_family(spec.get("d", 2))
        return fam.skew_product_family(spec.get("d", 2), spec.get("coupling", 1.0))
    if "path" in spec:
        p = spec["path"]
        if not os.path.isabs(p):
            p = os.path.join(base_dir, p)
        with open(p) as fh:
            return fam.FamilySpec.from_json(json.load(fh))
    return fam.FamilySpec.from_json(spec)


def grid_from(rect, resolution):
    nx, ny = (resolution, resolution) if isinstance(resolution, int) else resolution
    return fam.ParamGrid(rect[0], rect[1], rect[2], rect[3], int(nx), int(ny))


def window_from(obj):
    ball = None
    if "ball" in obj:
        c = obj["ball"]["center"]
        center = None if c is None else (np.inf if c == "inf" else complex(c[0], c[1]))
        ball = (center, obj["ball"]["radius"])
    if "disc" in obj:
        x, y, r = obj["disc"]
        return pc.Window.disc(complex(x, y), r, ball)
    return pc.Window.rect(*obj["rect"], ball=ball)


def ball_from(obj):
    if obj is None:
        return None
    c = obj["center"]
    center = None if c is None else (np.inf if c == "inf" else complex(c[0], c[1]))
    return (center, obj["radius"])


def resolve_threads(arg):
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("STABILITY_LAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"STABILITY_LAB_THREADS is not an integer: {env!r}")
    return 1


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _emit(command, out, name, meta, payload):
    obj = {"meta": meta}
    obj.update(payload)
    jsonschema.validate(obj, OUTPUT[command])
    _write_json(os.path.join(out, name), obj)
    return obj


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _raster(family, cfg, threads):
    grid = grid_from(cfg["rect"], cfg["resolution"])
    params = dict(cfg.get("params", {}))
    est = cfg.get("estimator", "green")
    if est == "birkhoff":
        params["seed"] = cfg["seed"]
    return ly.lyapunov_raster(family, grid, est, params, threads)


def _grid_json(g):
    return {"re0": g.re0, "re1": g.re1, "im0": g.im0, "im1": g.im1, "nx": g.nx, "ny": g.ny}


def cmd_lyap(family, cfg, out, meta, threads):
    r = _raster(family, cfg, threads)
    ly.write_raster_csv(r, os.path.join(out, "raster.csv"))
    ly.write_pgm(r.L, os.path.join(out, "L.pgm"), label="L")
    ly.write_pgm(r.laplacian, os.path.join(out, "laplacian.pgm"), label="laplacian")
    fin = np.isfinite(r.L)
    return _emit("lyap", out, "lyap.json", meta, {
        "grid": _grid_json(r.grid), "estimator": r.estimator,
        "total_mass": _num(r.total_mass()), "n_failed": r.n_failed, "notes": r.notes,
        "L_min": _num(np.min(r.L[fin])) if fin.any() else None,
        "L_max": _num(np.max(r.L[fin])) if fin.any() else None,
    })


def cmd_bif(family, cfg, out, meta, threads):
    r = _raster(family, cfg, threads)
    tau = cfg.get("tau", pc.TAU_LAPLACIAN)
    lap = np.abs(np.nan_to_num(r.laplacian))
    active = np.isfinite(r.laplacian) & (lap > tau)
    ly.write_pgm(np.where(np.isfinite(r.laplacian), active.astype(float), np.nan),
                 os.path.join(out, "bif.pgm"), 0.0, 1.0, label="bifurcation")
    lam = r.grid.lam()
    with open(os.path.join(out, "bif.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_re", "lambda_im", "laplacian", "active"])
        for i in range(lam.shape[0]):
            for j in range(lam.shape[1]):
                w.writerow([repr(float(lam[i, j].real)), repr(float(lam[i, j].imag)),
                            repr(float(r.laplacian[i, j])), int(active[i, j])])
    payload = {"grid": _grid_json(r.grid), "tau": tau, "n_active": int(active.sum()),
               "active_mass": _num(lap[active].sum()), "total_mass": _num(r.total_mass())}
    if family.k == 1 and family.is_polynomial() and not family.is_constant():
        chk = rp.raster_vs_oracle(r, family, tau, cfg.get("radius_cells", 2),
                                  cfg.get("oracle_iter", rp.ESCAPE_ITER))
        payload["oracle"] = chk.to_json()
    return _emit("bif", out, "bif.json", meta, payload)


def cmd_mass(family, cfg, out, meta, threads):
    wins = [window_from(w) for w in cfg["windows"]]
    fits = pc.growth_batch(family, wins, cfg["N_max"], n_base=cfg.get("n_base", 8),
                           degree_fallback=cfg.get("degree_fallback", True))
    tol = cfg.get("rate_tol", pc.TAU_RATE)
    rows = []
    for w, f in zip(wins, fits):
        d = f.to_json()
        d["window"] = w.to_json()
        d["verdict"] = "stable" if f.stable and f.rate <= tol else "unstable"
        rows.append(d)
    with open(os.path.join(out, "growth.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["window", "n", "mass"])
        for i, f in enumerate(fits):
            for n, m in enumerate(f.masses):
                wr.writerow([i, n, repr(float(m))])
    return _emit("mass", out, "growth.json", meta, {"fits": rows})


def cmd_ram(family, cfg, out, meta, threads):
    fb = cfg.get("degree_fallback", True)
    nb = cfg.get("n_base", 8)
    if "windows" in cfg:
        wins = [window_from(w) for w in cfg["windows"]]
        lo = min(w.bounding_grid(2).re0 for w in wins)
        hi = max(w.bounding_grid(2).re1 for w in wins)
        blo = min(w.bounding_grid(2).im0 for w in wins)
        bhi = max(w.bounding_grid(2).im1 for w in wins)
        grid = fam.ParamGrid(lo, hi, blo, bhi, 16, 16)
        marks = fam.critical_marking(family, grid)
        series = pc.ramification_batch(family, marks, wins, cfg["N_max"], nb, degree_fallback=fb)
        payload = {"series": [s.to_json() for s in series]}
    else:
        sc = cfg["scan"]
        grid = grid_from(sc["rect"], sc["resolution"])
        balls = [ball_from(b) for b in sc["balls"]]
        cmap = pc.convergence_map(family, grid, balls, cfg["N_max"], n_base=nb,
                                  degree_fallback=cfg.get("degree_fallback", False))
        series = [s for row in cmap.series for s in row]
        payload = {"series": [s.to_json() for s in series], "grid": _grid_json(grid),
                   "converged_fraction": [float(np.mean(cmap.converged(b)))
                                          for b in range(len(balls))],
                   "nested_violations": len(cmap.nested_violations())}
    pc.write_series_csv(series, os.path.join(out, "series.csv"))
    return _emit("ram", out, "ramification.json", meta, payload)


def cmd_web(family, cfg, out, meta, threads):
    seed = cfg["seed"]
    region = window_from(cfg["region"])
    z0 = cfg.get("z0", [0.5, 0.0])
    base = wb.pick_base(family, region, cfg.get("N_scan", 30), complex(z0[0], z0[1]),
                        cfg.get("min_clearance", 0.05), seed=seed)
    r = cfg.get("r", 0.1)
    eps = cfg.get("eps", wb.EPS_DEFAULT)
    lines = wb.good_lines(family, base, r, eps, cfg.get("N_lines_max", 25),
                          cfg.get("n_lines", 16), seed)
    tree = wb.build_branch_tree(family, base, r, cfg.get("tau", wb.TAU_DEFAULT), eps,
                                cfg.get("n_max", 12), lines, seed=seed)
    web = wb.build_web(tree)
    acrit = wb.acriticality_check(tree, web, family, cfg.get("p_max", 3),
                                  cfg.get("acrit_tol", 1e-3))
    ks = [wb.marginal_ks(family, tree, web.samples[-1], i, cfg.get("ks_points", 2048), seed)
          for i in range(min(3, tree.D0.size))]
    payload = wb.tree_report(tree, web, acrit)
    payload["lines"] = [l.to_json() for l in lines]
    payload["marginal_ks"] = [{"lambda": [tree.D0[i].real, tree.D0[i].imag], "ks": k}
                              for i, k in enumerate(ks)]
    payload["acriticality"] = acrit.to_json()
    payload["mass_sequence"] = web.mass_sequence
    payload["max_parent_multiplicity"] = tree.max_parent_multiplicity()
    if cfg.get("write_atoms", False):
        wb.write_atoms_csv(tree, os.path.join(out, "atoms.csv"))
    with open(os.path.join(out, "levels.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "fiber_size", "S_size", "defect", "defect_interior", "defect_bound"])
        for lv in payload["levels"]:
            w.writerow([lv["n"], lv["fiber_size"], lv["S_size"], repr(lv.get("defect", 0.0)),
                        repr(lv.get("defect_interior", 0.0)),
                        repr(lv.get("defect_bound", 0.0))])
    return _emit("web", out, "web.json", meta, _clean(payload))


def cmd_misiu(family, cfg, out, meta, threads):
    hits = mz.find_misiurewicz(family, cfg["rect"], cfg["q"], cfg["p"],
                               cfg.get("n_starts", 8), cfg["seed"])
    rcfg = cfg.get("raster", {})
    rect = rcfg.get("rect", [-2.5, 1.5, -2.0, 2.0])
    grid = grid_from(rect, rcfg.get("resolution", 512))
    flags = []
    if hits:
        raster = ly.lyapunov_raster(family, grid, "green", None, threads)
        flags = mz.check_in_bifurcation(hits, raster, cfg.get("radius_cells", 2),
                                        cfg.get("tau", pc.TAU_LAPLACIAN))
    mz.write_hits_csv(hits, os.path.join(out, "hits.csv"), flags)
    rows = []
    for h, f in zip(hits, flags):
        d = h.to_json()
        d["in_bifurcation"] = bool(f)
        rows.append(d)
    return _emit("misiu", out, "hits.json", meta, {"hits": rows, "search": hits.summary()})


def cmd_report(family, cfg, out, meta, threads):
    grid = grid_from(cfg["rect"], cfg["resolution"])
    rep = rp.stability_report(family, grid, cfg.get("N_max", 20), cfg.get("supersample", 4),
                              cfg.get("n_base", 4), cfg.get("min_distance", 2), threads,
                              cfg.get("oracle_iter", rp.ESCAPE_ITER))
    rp.write_report_csv(rep, os.path.join(out, "report.csv"))
    return _emit("report", out, "report.json", meta, rep.to_json())


def _clean(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


HANDLERS = {"lyap": cmd_lyap, "bif": cmd_bif, "mass": cmd_mass, "ram": cmd_ram,
            "web": cmd_web, "misiu": cmd_misiu, "report": cmd_report}


def run(command, cfg, out, threads=1, base_dir="."):
    """Validate ``cfg``, run ``command`` and write its artifacts into ``out``."""
    validate_config(command, cfg)
    family = build_family(cfg["family"], base_dir)
    os.makedirs(out, exist_ok=True)
    meta = {"command": command, "config_sha256": config_hash(cfg),
            "seed": cfg.get("seed"), "version": __version__}
    return HANDLERS[command](family, cfg, out, meta, threads)


def _fail(code, kind, message, path=()):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "path": list(path)},
                                sort_keys=True) + "\n")
    return code


def main(argv=None):
    ap = argparse.ArgumentParser(prog="stability-lab",
                                 description="Stability diagnostics for holomorphic families.")
    ap.add_argument("command", choices=COMMANDS + ("schemas",))
    ap.add_argument("--config", help="JSON run config")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: $STABILITY_LAB_THREADS or 1)")
    args = ap.parse_args(argv)
    if args.command == "schemas":
        publish(args.out)
        return EXIT_OK
    if not args.config:
        return _fail(EXIT_CONFIG, "config", "--config is required")
    try:
        threads = resolve_threads(args.threads)
        cfg = load_config(args.command, args.config)
        run(args.command, cfg, args.out, threads,
            os.path.dirname(os.path.abspath(args.config)))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), exc.path)
    except (fam.FamilyError, ValueError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_COMPUTE, type(exc).__name__, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
