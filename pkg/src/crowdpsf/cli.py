"""Command-line interface: ``crowdpsf {simulate,estimate,evaluate,benchmark,export-slices}``.

Settings are resolved in three layers: built-in defaults, an optional INI
file (``--params``) and command-line flags. Every command writes the
fully-resolved configuration to ``config.ini`` in its output directory.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.
"""

import argparse
import configparser
import csv
import dataclasses
import io
import json
import logging
import os
import sys

import numpy as np

from . import __version__, bench, cdl, metric, starfield, tilefile
from ._accel import backend
from .sparse import SolverError

log = logging.getLogger("crowdpsf")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "CROWDPSF_OUT"
DEFAULT_OUT = "crowdpsf-out"


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# --- configuration ---------------------------------------------------------

_SCENE_KEYS = {"shape": str, "density": float, "seed": int, "size": int, "noise": bool,
               "n_stars": int, "background": float, "inverse_gain": float, "noise_level": float}
_PARAM_TYPES = {f.name: f.type for f in dataclasses.fields(cdl.CdlParams)}
_BENCH_KEYS = {"shapes": str, "densities": str, "seeds": str, "m_values": str, "jobs": int}


def _coerce(value, typ, key):
    if isinstance(typ, str):
        typ = {"int": int, "float": float, "bool": bool, "str": str}[typ]
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            v = str(value).strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def load_config(path):
    """Read an INI file into ``{"scene": {...}, "params": {...}, "metric": {...}, "benchmark": {...}}``."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as f:
            cp.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    known = {"scene": _SCENE_KEYS, "params": _PARAM_TYPES, "metric": {"nr": int},
             "benchmark": _BENCH_KEYS}
    out = {k: {} for k in known}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key, raw in cp.items(section):
            if key not in known[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}] of {path}")
            out[section][key] = _coerce(raw, known[section][key], f"{section}.{key}")
    return out


def dump_config(cfg):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for section, values in cfg.items():
        cp[section] = {k: str(v) for k, v in values.items() if v is not None}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _split(text, typ, key):
    return [_coerce(t, typ, key) for t in str(text).replace(",", " ").split()]


# --- helpers ---------------------------------------------------------------

def _out_dir(args):
    d = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    os.makedirs(d, exist_ok=True)
    return d


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _resolve(args, file_cfg):
    scene = dict(shape="narrow", density=10.0, seed=0, size=256, noise=True)
    scene.update(file_cfg.get("scene", {}))
    for key in ("shape", "density", "seed", "size", "n_stars"):
        v = getattr(args, key, None)
        if v is not None:
            scene[key] = v
    if getattr(args, "no_noise", False):
        scene["noise"] = False
    params = dict(file_cfg.get("params", {}))
    if getattr(args, "m", None) is not None:
        params["M"] = args.m
    if getattr(args, "k", None) is not None:
        params["K"] = args.k
    met = dict(nr=50)
    met.update(file_cfg.get("metric", {}))
    if getattr(args, "nr", None) is not None:
        met["nr"] = args.nr
    if met["nr"] < 1:
        raise ConfigError("nr must be a positive integer")
    if scene["shape"] not in starfield.SHAPES:
        raise ConfigError(f"unknown shape {scene['shape']!r}; expected one of {starfield.SHAPES}")
    if not scene["density"] > 0:
        raise ConfigError("density must be positive")
    return scene, params, met


def _params(scene, overrides):
    try:
        return cdl.params_for(scene["shape"], scene["density"], **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid parameters: {exc}") from None


def _write_config(out, command, **sections):
    cfg = {"run": dict(command=command, version=__version__, backend=backend())}
    cfg.update(sections)
    tilefile.atomic_write_text(os.path.join(out, "config.ini"), dump_config(cfg))


# --- commands --------------------------------------------------------------

def cmd_simulate(args, file_cfg):
    scene, _, _ = _resolve(args, file_cfg)
    spec_kw = dict(width=scene["size"], height=scene["size"], density=scene["density"],
                   seed=scene["seed"], noise=scene["noise"])
    for key in ("n_stars", "background", "inverse_gain", "noise_level"):
        if key in scene:
            spec_kw[key] = scene[key]
    try:
        spec = starfield.SceneSpec(**spec_kw)
        img, truth = starfield.render_scene(spec, scene["shape"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args)
    meta = {"kind": "tile", "shape": scene["shape"], "flux_scale": repr(truth.flux_scale),
            "generator": f"crowdpsf {__version__}"}
    meta.update({f"scene.{k}": v for k, v in spec.to_dict().items()})
    tilefile.write_tile(os.path.join(out, "tile.tile"), img, meta)
    rows = [(repr(x), repr(y), repr(f)) for x, y, f in truth.stars]
    tilefile.atomic_write_text(os.path.join(out, "truth.csv"), _csv_text(("x", "y", "flux"), rows))
    if args.fits:
        tilefile.write_fits(os.path.join(out, "tile.fits"), img, meta)
    _write_config(out, "simulate", scene={k: scene[k] for k in sorted(scene)})
    print(f"wrote {os.path.join(out, 'tile.tile')} ({len(rows)} stars)")
    return EXIT_OK


def cmd_estimate(args, file_cfg):
    img, meta = tilefile.read_tile(args.tile)
    if args.shape is None and "shape" in meta:
        args.shape = meta["shape"]
    if args.density is None and "scene.density" in meta:
        args.density = float(meta["scene.density"])
    if args.shape is None or args.density is None:
        raise ConfigError("estimate needs --shape and --density (or a tile header that records them)")
    scene, overrides, _ = _resolve(args, file_cfg)
    params = _params(scene, overrides)
    out = _out_dir(args)
    res = cdl.run_cdl(img.astype(np.float64), params)
    psf_meta = {"kind": "psf", "shape": scene["shape"], "source": os.path.basename(args.tile),
                "support": params.support, "norm": repr(float(np.linalg.norm(res.psf)))}
    tilefile.write_tile(os.path.join(out, "psf.tile"), res.psf, psf_meta)
    tilefile.atomic_write_text(os.path.join(out, "psf.csv"),
                               "\n".join(",".join(repr(float(v)) for v in row) for row in res.psf) + "\n")
    trace = [(i, repr(v)) for i, v in enumerate(res.objective_trace)]
    tilefile.atomic_write_text(os.path.join(out, "trace.csv"), _csv_text(("iteration", "objective"), trace))
    if args.fits:
        tilefile.write_fits(os.path.join(out, "psf.fits"), res.psf, psf_meta)
    _write_config(out, "estimate", scene={"shape": scene["shape"], "density": scene["density"],
                                          "tile": os.path.abspath(args.tile)},
                  params=params.to_dict())
    print(f"wrote {os.path.join(out, 'psf.tile')}; main loop {res.timings['main']:.1f} s")
    return EXIT_OK


def _load_psf(path):
    if path.endswith(".csv"):
        return np.loadtxt(path, delimiter=",", ndmin=2), {}
    data, meta = tilefile.read_tile(path)
    return data.astype(np.float64), meta


def cmd_evaluate(args, file_cfg):
    h, meta = _load_psf(args.psf)
    if args.shape is None:
        args.shape = meta.get("shape")
    if args.shape is None:
        raise ConfigError("evaluate needs --shape (the PSF file does not record one)")
    args.density = args.density or 10.0
    scene, _, met = _resolve(args, file_cfg)
    ref = starfield.make_reference_psf(scene["shape"])
    try:
        m = metric.evaluate(ref, h, n_r=met["nr"])
    except metric.MetricError as exc:
        raise ConfigError(f"cannot evaluate {args.psf}: {exc}") from None
    text = _csv_text(("snr_db", "offset_row", "offset_col", "scale", "correlation", "nr"),
                     [(f"{m.snr_db:.6f}", m.best_offset[0], m.best_offset[1], repr(m.scale),
                       f"{m.correlation:.12f}", m.n_r)])
    sys.stdout.write(text)
    if args.out:
        out = _out_dir(args)
        tilefile.atomic_write_text(os.path.join(out, "metric.csv"), text)
        _write_config(out, "evaluate", scene={"shape": scene["shape"], "psf": os.path.abspath(args.psf)},
                      metric=met)
    return EXIT_OK


def cmd_benchmark(args, file_cfg):
    bcfg = dict(shapes="narrow,wide,elong,complex", densities="1,10,25,50,100", seeds="0,1,2", jobs=1)
    bcfg.update(file_cfg.get("benchmark", {}))
    for key in ("shapes", "densities", "seeds", "m_values", "jobs"):
        v = getattr(args, key, None)
        if v is not None:
            bcfg[key] = v
    shapes = _split(bcfg["shapes"], str, "shapes")
    bad = [s for s in shapes if s not in starfield.SHAPES]
    if bad:
        raise ConfigError(f"unknown shapes {bad}")
    densities = _split(bcfg["densities"], float, "densities")
    if any(d <= 0 for d in densities):
        raise ConfigError("densities must be positive")
    seeds = _split(bcfg["seeds"], int, "seeds")
    m_values = _split(bcfg["m_values"], int, "m_values") if bcfg.get("m_values") else None
    scene, overrides, met = _resolve(args, file_cfg)
    if m_values is None and "M" in overrides:
        m_values = [overrides["M"]]
    _params(dict(shape=shapes[0], density=densities[0]), overrides)  # validate early
    cells = bench.make_cells(shapes, densities, seeds, size=scene["size"], noise=scene["noise"],
                             overrides=overrides, m_values=m_values, n_r=met["nr"])
    out = _out_dir(args)
    rows = bench.run_grid(cells, jobs=int(bcfg["jobs"]))
    summary = bench.summarize(rows)
    tilefile.atomic_write_text(os.path.join(out, "benchmark.csv"), bench.to_csv(rows))
    tilefile.atomic_write_text(os.path.join(out, "summary.json"), json.dumps(summary, indent=2) + "\n")
    table = bench.format_table(summary)
    tilefile.atomic_write_text(os.path.join(out, "summary.txt"), table + "\n")
    bcfg["m_values"] = ",".join(map(str, m_values)) if m_values else ""
    _write_config(out, "benchmark", benchmark=bcfg, scene={"size": scene["size"], "noise": scene["noise"]},
                  params=overrides, metric=met)
    print(table)
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        log.warning("%d of %d cells failed; see benchmark.csv", failed, len(rows))
    return EXIT_OK


def contour_polylines(grid, levels):
    """Iso-level polylines of ``grid`` as ``(level, path_id, x, y)`` rows (x = column)."""
    import contourpy
    gen = contourpy.contour_generator(z=np.asarray(grid, dtype=np.float64),
                                      line_type=contourpy.LineType.Separate)
    rows = []
    pid = 0
    for level in levels:
        for path in gen.lines(level):
            for x, y in path:
                rows.append((level, pid, float(x), float(y)))
            pid += 1
    return rows


def slice_table(h, ref_aligned):
    """Central row/column profiles of the estimate, aligned reference and their difference."""
    c = h.shape[0] // 2
    d = h - ref_aligned
    return [(i - c, h[c, i], ref_aligned[c, i], d[c, i], h[i, c], ref_aligned[i, c], d[i, c])
            for i in range(h.shape[0])]


def cmd_export_slices(args, file_cfg):
    h, meta = _load_psf(args.psf)
    if args.shape is None:
        args.shape = meta.get("shape")
    if args.shape is None:
        raise ConfigError("export-slices needs --shape")
    args.density = args.density or 10.0
    scene, _, met = _resolve(args, file_cfg)
    ref = starfield.make_reference_psf(scene["shape"])
    m = metric.evaluate(ref, h, n_r=met["nr"])
    g = metric.aligned_reference(ref, h, m)
    out = _out_dir(args)
    rows = [tuple(repr(float(v)) if not isinstance(v, int) else v for v in r) for r in slice_table(h, g)]
    tilefile.atomic_write_text(os.path.join(out, "slices.csv"), _csv_text(
        ("offset", "est_row", "ref_row", "diff_row", "est_col", "ref_col", "diff_col"), rows))
    tilefile.write_tile(os.path.join(out, "difference.tile"), h - g,
                        {"kind": "difference", "shape": scene["shape"], "snr_db": f"{m.snr_db:.6f}"})
    peak = float(g.max())
    levels = [peak * f for f in (0.5, 0.1, 0.01, 0.001)]
    crows = [("estimate",) + r for r in contour_polylines(h, levels)]
    crows += [("reference",) + r for r in contour_polylines(g, levels)]
    tilefile.atomic_write_text(os.path.join(out, "contours.csv"),
                               _csv_text(("source", "level", "path", "x", "y"), crows))
    _write_config(out, "export-slices", scene={"shape": scene["shape"], "psf": os.path.abspath(args.psf)},
                  metric=met)
    print(f"snr_db={m.snr_db:.2f}; wrote slices.csv, contours.csv, difference.tile to {out}")
    return EXIT_OK


# --- entry point -----------------------------------------------------------

def build_parser():
    p = _Parser(prog="crowdpsf", description="PSF estimation in crowded star fields by "
                                             "convolutional dictionary learning.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, scene=True):
        sp.add_argument("--params", metavar="FILE", help="INI configuration file")
        sp.add_argument("--out", metavar="DIR", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        if scene:
            sp.add_argument("--shape", choices=starfield.SHAPES)
            sp.add_argument("--density", type=float, help="pixels per star")

    sp = sub.add_parser("simulate", help="render a synthetic star-field tile")
    common(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int, help="tile side length (px)")
    sp.add_argument("--n-stars", type=int, dest="n_stars", help="override the star count")
    sp.add_argument("--no-noise", action="store_true")
    sp.add_argument("--fits", action="store_true", help="also write FITS (needs astropy)")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate", help="estimate the PSF of a tile")
    sp.add_argument("tile")
    common(sp)
    sp.add_argument("--m", type=int, help="sub-pixel offsets per axis")
    sp.add_argument("--k", type=int, help="Lanczos order")
    sp.add_argument("--fits", action="store_true", help="also write FITS (needs astropy)")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("evaluate", help="score a PSF file against an analytic reference")
    sp.add_argument("psf")
    common(sp)
    sp.add_argument("--nr", type=int, help="sub-pixel search resolution (default 50)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("benchmark", help="run the shape x density x seed grid")
    common(sp, scene=False)
    sp.add_argument("--shapes", help="comma-separated shapes")
    sp.add_argument("--densities", help="comma-separated densities")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--m-sweep", dest="m_values", help="comma-separated M values (M-sweep mode)")
    sp.add_argument("--size", type=int)
    sp.add_argument("--no-noise", action="store_true")
    sp.add_argument("--m", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--nr", type=int)
    sp.add_argument("--jobs", type=int, help="concurrent cells")
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("export-slices", help="plot-ready slices and contours vs the reference")
    sp.add_argument("psf")
    common(sp)
    sp.add_argument("--nr", type=int)
    sp.set_defaults(func=cmd_export_slices)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"crowdpsf: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = load_config(args.params) if args.params else {}
        return args.func(args, file_cfg)
    except ConfigError as exc:
        print(f"crowdpsf: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"crowdpsf: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, tilefile.TileFormatError, RuntimeError) as exc:
        print(f"crowdpsf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"crowdpsf: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
